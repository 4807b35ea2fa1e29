//! Vision Transformer backbone: patch and position embedding, pre-norm
//! transformer blocks and the classification head.
//!
//! Activations are row-major `[tokens, d]`. Linear weights follow the
//! `[out, in]` convention, so a projection computes `x · Wᵀ + b`.

use crate::autodiff::{Graph, VarId};
use crate::error::{Error, Result};
use crate::params::{Init, ParamSpec};
use crate::peft::{self, LoraVars};
use crate::tensor::Tensor;

/// Std of the truncated-normal initializer used for synthetic backbones.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub channels: usize,
    pub ln_eps: f64,
}

impl VitConfig {
    /// Canonical CPU test configuration.
    pub fn tiny() -> Self {
        VitConfig {
            image_size: 32,
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            num_classes: 6,
            channels: 3,
            ln_eps: 1e-6,
        }
    }

    /// ViT-B/16 at 224×224.
    pub fn vit_b16() -> Self {
        VitConfig {
            image_size: 224,
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            num_classes: 6,
            channels: 3,
            ln_eps: 1e-6,
        }
    }

    pub fn with_classes(mut self, n: usize) -> Self {
        self.num_classes = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
            ("channels", self.channels),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

pub fn block_prefix(i: usize) -> String {
    format!("blocks.{i}")
}

/// Parameter layout of the backbone and head, all frozen.
pub fn backbone_layout(cfg: &VitConfig) -> Vec<ParamSpec> {
    let d = cfg.embed_dim;
    let h = cfg.mlp_hidden();
    let tn = Init::TruncNormal(INIT_STD);
    let mut out = vec![
        ParamSpec::new("patch_embed.weight", &[d, cfg.patch_dim()], tn),
        ParamSpec::new("patch_embed.bias", &[d], Init::Zeros),
        ParamSpec::new("cls_token", &[1, d], Init::Zeros),
        ParamSpec::new("pos_embed", &[cfg.seq_len(), d], tn),
    ];
    for i in 0..cfg.depth {
        let p = block_prefix(i);
        out.push(ParamSpec::new(format!("{p}.norm1.weight"), &[d], Init::Ones));
        out.push(ParamSpec::new(format!("{p}.norm1.bias"), &[d], Init::Zeros));
        for proj in ["q", "k", "v", "proj"] {
            out.push(ParamSpec::new(format!("{p}.attn.{proj}.weight"), &[d, d], tn));
            out.push(ParamSpec::new(format!("{p}.attn.{proj}.bias"), &[d], Init::Zeros));
        }
        out.push(ParamSpec::new(format!("{p}.norm2.weight"), &[d], Init::Ones));
        out.push(ParamSpec::new(format!("{p}.norm2.bias"), &[d], Init::Zeros));
        out.push(ParamSpec::new(format!("{p}.mlp.fc1.weight"), &[h, d], tn));
        out.push(ParamSpec::new(format!("{p}.mlp.fc1.bias"), &[h], Init::Zeros));
        out.push(ParamSpec::new(format!("{p}.mlp.fc2.weight"), &[d, h], tn));
        out.push(ParamSpec::new(format!("{p}.mlp.fc2.bias"), &[d], Init::Zeros));
    }
    out.push(ParamSpec::new("norm.weight", &[d], Init::Ones));
    out.push(ParamSpec::new("norm.bias", &[d], Init::Zeros));
    out.extend(head_layout(cfg));
    out
}

pub fn head_layout(cfg: &VitConfig) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new("head.weight", &[cfg.num_classes, cfg.embed_dim], Init::TruncNormal(INIT_STD)),
        ParamSpec::new("head.bias", &[cfg.num_classes], Init::Zeros),
    ]
}

/// Splits a `[C, S, S]` image into `[N, C·p·p]` flattened patches, grid in
/// row-major order, each patch flattened channel-major.
pub fn patchify(image: &Tensor, cfg: &VitConfig) -> Result<Tensor> {
    let (c, s, p) = (cfg.channels, cfg.image_size, cfg.patch_size);
    if image.shape() != [c, s, s] {
        return Err(Error::dim("patchify", image.shape(), &[c, s, s]));
    }
    let g = cfg.grid();
    let x = image.data();
    let mut out = Vec::with_capacity(cfg.num_patches() * cfg.patch_dim());
    for gy in 0..g {
        for gx in 0..g {
            for ch in 0..c {
                for dy in 0..p {
                    let row = (ch * s + gy * p + dy) * s + gx * p;
                    out.extend_from_slice(&x[row..row + p]);
                }
            }
        }
    }
    Tensor::new(&[cfg.num_patches(), cfg.patch_dim()], out)
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: VarId,
    pub bias: VarId,
}

#[derive(Debug, Clone, Copy)]
pub struct NormVars {
    pub gamma: VarId,
    pub beta: VarId,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub norm1: NormVars,
    pub q: LinearVars,
    pub k: LinearVars,
    pub v: LinearVars,
    pub proj: LinearVars,
    pub norm2: NormVars,
    pub fc1: LinearVars,
    pub fc2: LinearVars,
}

#[derive(Debug, Clone, Copy)]
pub struct EmbedVars {
    pub weight: VarId,
    pub bias: VarId,
    pub cls: VarId,
    pub pos: VarId,
}

/// Optional low-rank updates on the four attention projections.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProjectionDeltas {
    pub query: Option<LoraVars>,
    pub key: Option<LoraVars>,
    pub value: Option<LoraVars>,
    pub output: Option<LoraVars>,
}

pub fn linear(g: &mut Graph<'_>, x: VarId, l: LinearVars) -> Result<VarId> {
    let y = g.matmul_nt(x, l.weight)?;
    g.add_bias(y, l.bias)
}

fn projection(g: &mut Graph<'_>, x: VarId, l: LinearVars, delta: Option<LoraVars>) -> Result<VarId> {
    match delta {
        Some(lora) => peft::lora_linear(g, x, l, lora),
        None => linear(g, x, l),
    }
}

pub fn norm(g: &mut Graph<'_>, x: VarId, n: NormVars, eps: f64) -> Result<VarId> {
    g.layer_norm(x, n.gamma, n.beta, eps)
}

/// Projects `[N, C·p·p]` patches to `d`, prepends the class token and adds
/// position embeddings: `[N+1, d]`.
pub fn patch_embed(g: &mut Graph<'_>, patches: VarId, e: EmbedVars) -> Result<VarId> {
    let tokens = linear(
        g,
        patches,
        LinearVars {
            weight: e.weight,
            bias: e.bias,
        },
    )?;
    g.assemble_tokens(tokens, e.cls, e.pos)
}

#[derive(Debug, Clone, Copy)]
pub struct MhaOutput {
    pub out: VarId,
    /// Attention node; its probabilities are retrievable from the graph.
    pub attention: VarId,
}

/// Multi-head self-attention including the output projection.
pub fn mha_forward(
    g: &mut Graph<'_>,
    x: VarId,
    b: &BlockVars,
    heads: usize,
    deltas: &ProjectionDeltas,
) -> Result<MhaOutput> {
    let q = projection(g, x, b.q, deltas.query)?;
    let k = projection(g, x, b.k, deltas.key)?;
    let v = projection(g, x, b.v, deltas.value)?;
    let attention = g.attention(q, k, v, heads)?;
    let out = projection(g, attention, b.proj, deltas.output)?;
    Ok(MhaOutput { out, attention })
}

pub fn mlp_forward(g: &mut Graph<'_>, x: VarId, b: &BlockVars) -> Result<VarId> {
    let h = linear(g, x, b.fc1)?;
    let h = g.gelu(h);
    linear(g, h, b.fc2)
}

/// Pre-norm block: `x' = MHA(LN(x)) + x; out = MLP(LN(x')) + x'`.
pub fn block_forward(g: &mut Graph<'_>, x: VarId, b: &BlockVars, cfg: &VitConfig) -> Result<(VarId, VarId)> {
    let h = norm(g, x, b.norm1, cfg.ln_eps)?;
    let mha = mha_forward(g, h, b, cfg.heads, &ProjectionDeltas::default())?;
    let x1 = g.add(mha.out, x)?;
    let h2 = norm(g, x1, b.norm2, cfg.ln_eps)?;
    let m = mlp_forward(g, h2, b)?;
    Ok((g.add(m, x1)?, mha.attention))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> VitConfig {
        VitConfig {
            image_size: 32,
            patch_size: 16,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 3,
            channels: 1,
            ln_eps: 1e-6,
        }
    }

    /// Binds one block's parameters from `store` into `g`.
    pub(crate) fn bind_block<'a>(g: &mut Graph<'a>, store: &'a ParamStore, i: usize) -> BlockVars {
        let p = block_prefix(i);
        let mut v = |n: &str| g.leaf(store.get(&format!("{p}.{n}")).unwrap());
        BlockVars {
            norm1: NormVars { gamma: v("norm1.weight"), beta: v("norm1.bias") },
            q: LinearVars { weight: v("attn.q.weight"), bias: v("attn.q.bias") },
            k: LinearVars { weight: v("attn.k.weight"), bias: v("attn.k.bias") },
            v: LinearVars { weight: v("attn.v.weight"), bias: v("attn.v.bias") },
            proj: LinearVars { weight: v("attn.proj.weight"), bias: v("attn.proj.bias") },
            norm2: NormVars { gamma: v("norm2.weight"), beta: v("norm2.bias") },
            fc1: LinearVars { weight: v("mlp.fc1.weight"), bias: v("mlp.fc1.bias") },
            fc2: LinearVars { weight: v("mlp.fc2.weight"), bias: v("mlp.fc2.bias") },
        }
    }

    #[test]
    fn presets_are_consistent() {
        let b16 = VitConfig::vit_b16();
        b16.validate().unwrap();
        assert_eq!(b16.seq_len(), 197);
        assert_eq!(b16.embed_dim, 768);
        let tiny = VitConfig::tiny();
        tiny.validate().unwrap();
        assert_eq!(tiny.seq_len(), 17);
        let mut bad = tiny;
        bad.patch_size = 7;
        assert!(bad.validate().is_err());
        bad = tiny;
        bad.heads = 5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn patch_embed_sequence_shapes() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let store = ParamStore::from_layout(&backbone_layout(&cfg), &mut rng);
        let img = Tensor::randn(&[1, 32, 32], 1.0, &mut rng);
        let patches = patchify(&img, &cfg).unwrap();
        assert_eq!(patches.shape(), &[4, 256]);
        let mut g = Graph::new();
        let pv = g.input(patches);
        let e = EmbedVars {
            weight: g.leaf(store.get("patch_embed.weight").unwrap()),
            bias: g.leaf(store.get("patch_embed.bias").unwrap()),
            cls: g.leaf(store.get("cls_token").unwrap()),
            pos: g.leaf(store.get("pos_embed").unwrap()),
        };
        let seq = patch_embed(&mut g, pv, e).unwrap();
        assert_eq!(g.shape(seq), &[5, 8]);

        let wrong = Tensor::zeros(&[1, 16, 16]);
        assert!(patchify(&wrong, &cfg).is_err());
    }

    #[test]
    fn zero_image_and_weights_give_position_embeddings() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::from_layout(&backbone_layout(&cfg), &mut rng);
        *store.get_mut("patch_embed.weight").unwrap() = Tensor::zeros(&[8, 256]);
        *store.get_mut("cls_token").unwrap() = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let img = Tensor::zeros(&[1, 32, 32]);
        let mut g = Graph::new();
        let pv = g.input(patchify(&img, &cfg).unwrap());
        let e = EmbedVars {
            weight: g.leaf(store.get("patch_embed.weight").unwrap()),
            bias: g.leaf(store.get("patch_embed.bias").unwrap()),
            cls: g.leaf(store.get("cls_token").unwrap()),
            pos: g.leaf(store.get("pos_embed").unwrap()),
        };
        let seq = patch_embed(&mut g, pv, e).unwrap();
        let pos = store.get("pos_embed").unwrap().data();
        let cls = store.get("cls_token").unwrap().data();
        let out = g.data(seq);
        for j in 0..8 {
            assert_eq!(out[j], pos[j] + cls[j]);
        }
        assert_eq!(&out[8..], &pos[8..]);
    }

    #[test]
    fn patchify_layout_matches_conv_flattening() {
        let cfg = VitConfig {
            image_size: 4,
            patch_size: 2,
            channels: 2,
            ..small_cfg()
        };
        let img = Tensor::new(&[2, 4, 4], (0..32).map(f64::from).collect()).unwrap();
        let p = patchify(&img, &cfg).unwrap();
        // Patch (0,1): channel 0 rows 0..2 cols 2..4, then channel 1.
        assert_eq!(&p.data()[8..16], &[2.0, 3.0, 6.0, 7.0, 18.0, 19.0, 22.0, 23.0]);
    }

    /// Straight-line multi-head attention written directly from the formula.
    fn attention_oracle(x: &Tensor, w: [&Tensor; 4], bias: [&Tensor; 4], heads: usize) -> (Tensor, Vec<Vec<Vec<f64>>>) {
        let (t, d) = x.dims2().unwrap();
        let hd = d / heads;
        let proj = |wi: &Tensor, bi: &Tensor, inp: &Tensor| -> Vec<Vec<f64>> {
            (0..t)
                .map(|r| {
                    (0..d)
                        .map(|o| bi.data()[o] + (0..d).map(|c| inp.get2(r, c) * wi.get2(o, c)).sum::<f64>())
                        .collect()
                })
                .collect()
        };
        let q = proj(w[0], bias[0], x);
        let k = proj(w[1], bias[1], x);
        let v = proj(w[2], bias[2], x);
        let mut concat = vec![vec![0.0; d]; t];
        let mut maps = Vec::new();
        for h in 0..heads {
            let mut a = vec![vec![0.0; t]; t];
            for i in 0..t {
                let logits: Vec<f64> = (0..t)
                    .map(|j| (0..hd).map(|c| q[i][h * hd + c] * k[j][h * hd + c]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for j in 0..t {
                    a[i][j] = (logits[j] - m).exp() / z;
                }
                for c in 0..hd {
                    concat[i][h * hd + c] = (0..t).map(|j| a[i][j] * v[j][h * hd + c]).sum();
                }
            }
            maps.push(a);
        }
        let ct = Tensor::new(&[t, d], concat.concat()).unwrap();
        let out = proj(w[3], bias[3], &ct);
        (Tensor::new(&[t, d], out.concat()).unwrap(), maps)
    }

    #[test]
    fn mha_matches_straight_line_oracle() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::from_layout(&backbone_layout(&cfg), &mut rng);
        for n in ["q", "k", "v", "proj"] {
            *store.get_mut(&format!("blocks.0.attn.{n}.weight")).unwrap() = Tensor::randn(&[8, 8], 0.5, &mut rng);
            *store.get_mut(&format!("blocks.0.attn.{n}.bias")).unwrap() = Tensor::randn(&[8], 0.5, &mut rng);
        }
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let b = bind_block(&mut g, &store, 0);
        let out = mha_forward(&mut g, xv, &b, 2, &ProjectionDeltas::default()).unwrap();
        let w = |n: &str| store.get(&format!("blocks.0.attn.{n}.weight")).unwrap();
        let bb = |n: &str| store.get(&format!("blocks.0.attn.{n}.bias")).unwrap();
        let (expect, maps) = attention_oracle(
            &x,
            [w("q"), w("k"), w("v"), w("proj")],
            [bb("q"), bb("k"), bb("v"), bb("proj")],
            2,
        );
        assert!(g.value(out.out).max_abs_diff(&expect) < 1e-12);
        let probs = g.attention_probs(out.attention).unwrap();
        for h in 0..2 {
            for i in 0..5 {
                let row = &probs.data()[(h * 5 + i) * 5..(h * 5 + i + 1) * 5];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for j in 0..5 {
                    assert!((row[j] - maps[h][i][j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_token_and_zero_qk_attention() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::from_layout(&backbone_layout(&cfg), &mut rng);
        let x1 = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.leaf(&x1);
        let b = bind_block(&mut g, &store, 0);
        let out = mha_forward(&mut g, xv, &b, 2, &ProjectionDeltas::default()).unwrap();
        assert_eq!(g.attention_probs(out.attention).unwrap().data(), &[1.0, 1.0]);
        drop(g);

        *store.get_mut("blocks.0.attn.q.weight").unwrap() = Tensor::zeros(&[8, 8]);
        *store.get_mut("blocks.0.attn.k.weight").unwrap() = Tensor::zeros(&[8, 8]);
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let b = bind_block(&mut g, &store, 0);
        let out = mha_forward(&mut g, xv, &b, 2, &ProjectionDeltas::default()).unwrap();
        for p in g.attention_probs(out.attention).unwrap().data() {
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_weight_block_is_identity_and_blocks_compose() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::from_layout(&backbone_layout(&cfg), &mut rng);
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
        {
            let mut g = Graph::new();
            let xv = g.leaf(&x);
            let b0 = bind_block(&mut g, &store, 0);
            let b1 = bind_block(&mut g, &store, 1);
            let (y0, _) = block_forward(&mut g, xv, &b0, &cfg).unwrap();
            let (y1, _) = block_forward(&mut g, y0, &b1, &cfg).unwrap();
            let twice = g.value(y1);
            let mut g2 = Graph::new();
            let x2 = g2.leaf(&x);
            let c0 = bind_block(&mut g2, &store, 0);
            let (z0, _) = block_forward(&mut g2, x2, &c0, &cfg).unwrap();
            let mid = g2.value(z0);
            let mut g3 = Graph::new();
            let m = g3.leaf(&mid);
            let c1 = bind_block(&mut g3, &store, 1);
            let (z1, _) = block_forward(&mut g3, m, &c1, &cfg).unwrap();
            assert_eq!(g3.value(z1), twice);
        }
        let names: Vec<String> = store
            .names()
            .filter(|n| n.starts_with("blocks.0.") && !n.contains("norm"))
            .map(String::from)
            .collect();
        for n in names {
            let t = store.get_mut(&n).unwrap();
            *t = Tensor::zeros(t.shape());
        }
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let b = bind_block(&mut g, &store, 0);
        let (y, _) = block_forward(&mut g, xv, &b, &cfg).unwrap();
        assert_eq!(g.value(y), x);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layout: Vec<ParamSpec> = backbone_layout(&cfg)
            .into_iter()
            .filter(|s| s.name.starts_with("blocks.0."))
            .collect();
        let mut params: Vec<Tensor> = layout
            .iter()
            .map(|s| {
                let t = Tensor::randn(&s.shape, 0.3, &mut rng);
                if s.name.ends_with("norm1.weight") || s.name.ends_with("norm2.weight") {
                    t.add(&Tensor::ones(&s.shape)).unwrap()
                } else {
                    t
                }
                .with_requires_grad(true)
            })
            .collect();
        params.push(Tensor::randn(&[5, 8], 1.0, &mut rng).with_requires_grad(true));
        let w = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let names: Vec<String> = layout.iter().map(|s| s.name.trim_start_matches("blocks.0.").to_string()).collect();
        let rep = check_gradients(&params, 1e-5, |g, v| {
            let find = |n: &str| v[names.iter().position(|x| x == n).unwrap()];
            let lin = |a: &str| LinearVars { weight: find(&format!("{a}.weight")), bias: find(&format!("{a}.bias")) };
            let nrm = |a: &str| NormVars { gamma: find(&format!("{a}.weight")), beta: find(&format!("{a}.bias")) };
            let b = BlockVars {
                norm1: nrm("norm1"),
                q: lin("attn.q"),
                k: lin("attn.k"),
                v: lin("attn.v"),
                proj: lin("attn.proj"),
                norm2: nrm("norm2"),
                fc1: lin("mlp.fc1"),
                fc2: lin("mlp.fc2"),
            };
            let (y, _) = block_forward(g, *v.last().unwrap(), &b, &cfg)?;
            let wv = g.input(w.clone());
            let p = g.mul(y, wv)?;
            Ok(g.sum(p))
        })
        .unwrap();
        rep.assert_within_or_abs(1e-4, 1e-8);
    }
}
