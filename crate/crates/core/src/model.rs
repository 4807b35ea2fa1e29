//! A ViT backbone together with the PEFT modules of a fine-tuning mode.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, VarId};
use crate::error::{Error, Result};
use crate::params::{count_layout, ParamCount, ParamSpec, ParamStore};
use crate::peft::{
    adapter_name, lora_name, peft_layout, selafd_block_forward, AdapterVars, FineTuneMode, LoraTarget, LoraVars,
    PeftBlockVars, PeftConfig, Placement, PEFT_NAMESPACE,
};
use crate::tensor::Tensor;
use crate::vit::{
    backbone_layout, block_prefix, head_layout, linear, norm, patch_embed, patchify, BlockVars, EmbedVars, LinearVars,
    NormVars, ProjectionDeltas, VitConfig,
};

const STREAM_BACKBONE: u64 = 0;
const STREAM_HEAD: u64 = 1;
const STREAM_PEFT: u64 = 2;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn is_head(name: &str) -> bool {
    name.starts_with("head.")
}

fn is_peft(name: &str) -> bool {
    name.starts_with(PEFT_NAMESPACE)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub vit: VitConfig,
    pub mode: FineTuneMode,
    pub peft: PeftConfig,
    pub params: ParamStore,
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward<'a> {
    pub logits: VarId,
    /// Final-norm class-token feature `[1, d]`.
    pub features: VarId,
    /// One attention node per block.
    pub attention: Vec<VarId>,
    /// Leaves bound with gradient tracking, by parameter name.
    pub trainable: Vec<(&'a str, VarId)>,
}

struct Binder<'a, 'g> {
    g: &'g mut Graph<'a>,
    store: &'a ParamStore,
    track: bool,
    bound: Vec<(&'a str, VarId)>,
}

impl<'a> Binder<'a, '_> {
    fn var(&mut self, name: &str) -> Result<VarId> {
        let (key, t) = self
            .store
            .entry(name)
            .map_err(|_| Error::Config(format!("incomplete model: missing parameter `{name}`")))?;
        if self.track && t.requires_grad() {
            let v = self.g.leaf(t);
            self.bound.push((key, v));
            Ok(v)
        } else {
            Ok(self.g.constant(t))
        }
    }

    fn linear(&mut self, prefix: &str) -> Result<LinearVars> {
        Ok(LinearVars {
            weight: self.var(&format!("{prefix}.weight"))?,
            bias: self.var(&format!("{prefix}.bias"))?,
        })
    }

    fn norm(&mut self, prefix: &str) -> Result<NormVars> {
        Ok(NormVars {
            gamma: self.var(&format!("{prefix}.weight"))?,
            beta: self.var(&format!("{prefix}.bias"))?,
        })
    }

    fn block(&mut self, i: usize) -> Result<BlockVars> {
        let p = block_prefix(i);
        Ok(BlockVars {
            norm1: self.norm(&format!("{p}.norm1"))?,
            q: self.linear(&format!("{p}.attn.q"))?,
            k: self.linear(&format!("{p}.attn.k"))?,
            v: self.linear(&format!("{p}.attn.v"))?,
            proj: self.linear(&format!("{p}.attn.proj"))?,
            norm2: self.norm(&format!("{p}.norm2"))?,
            fc1: self.linear(&format!("{p}.mlp.fc1"))?,
            fc2: self.linear(&format!("{p}.mlp.fc2"))?,
        })
    }

    fn lora(&mut self, i: usize, t: LoraTarget) -> Result<LoraVars> {
        Ok(LoraVars {
            a: self.var(&lora_name(i, t, "a"))?,
            b: self.var(&lora_name(i, t, "b"))?,
        })
    }

    fn adapter(&mut self, i: usize, pl: Placement) -> Result<AdapterVars> {
        Ok(AdapterVars {
            w_down: self.var(&adapter_name(i, pl, "down.weight"))?,
            b_down: self.var(&adapter_name(i, pl, "down.bias"))?,
            w_up: self.var(&adapter_name(i, pl, "up.weight"))?,
            b_up: self.var(&adapter_name(i, pl, "up.bias"))?,
        })
    }
}

impl Model {
    /// Full parameter layout of `mode` with trainable flags applied.
    pub fn layout(vit: &VitConfig, mode: FineTuneMode, peft: &PeftConfig) -> Vec<ParamSpec> {
        let mut out = backbone_layout(vit);
        for s in &mut out {
            s.trainable = !mode.freezes_backbone() || is_head(&s.name);
        }
        out.extend(peft_layout(vit, peft, mode));
        out
    }

    pub fn count_layout(vit: &VitConfig, mode: FineTuneMode, peft: &PeftConfig) -> ParamCount {
        count_layout(&Model::layout(vit, mode, peft))
    }

    /// A freshly initialized ("synthetically pretrained") model.
    pub fn init(vit: VitConfig, mode: FineTuneMode, peft: PeftConfig, seed: u64) -> Result<Model> {
        vit.validate()?;
        if mode.has_lora() || mode.has_adapters() {
            peft.validate(vit.embed_dim)?;
        }
        let layout = Model::layout(&vit, mode, &peft);
        let (backbone, rest): (Vec<_>, Vec<_>) = layout.into_iter().partition(|s| !is_head(&s.name) && !is_peft(&s.name));
        let (head, peft_specs): (Vec<_>, Vec<_>) = rest.into_iter().partition(|s| is_head(&s.name));
        let mut params = ParamStore::from_layout(&backbone, &mut stream_rng(seed, STREAM_BACKBONE));
        for (k, v) in ParamStore::from_layout(&head, &mut stream_rng(seed, STREAM_HEAD)).iter() {
            params.insert(k, v.clone());
        }
        for (k, v) in ParamStore::from_layout(&peft_specs, &mut stream_rng(seed, STREAM_PEFT)).iter() {
            params.insert(k, v.clone());
        }
        Ok(Model { vit, mode, peft, params })
    }

    /// Wraps the backbone of `base` for fine-tuning in `mode`.
    ///
    /// PEFT modules of `base` are dropped and fresh zero-update modules are
    /// added. The head is kept when `num_classes` matches the base, and
    /// re-initialized from `seed` otherwise. The backbone is frozen unless
    /// `mode` is [`FineTuneMode::Full`].
    pub fn wrap(base: &Model, mode: FineTuneMode, peft: PeftConfig, num_classes: usize, seed: u64) -> Result<Model> {
        let vit = base.vit.with_classes(num_classes);
        vit.validate()?;
        if mode.has_lora() || mode.has_adapters() {
            peft.validate(vit.embed_dim)?;
        }
        let fresh_head = num_classes != base.vit.num_classes;
        let mut params = ParamStore::new();
        for (k, t) in base.params.iter() {
            if is_peft(k) || (fresh_head && is_head(k)) {
                continue;
            }
            params.insert(k, t.clone());
        }
        if fresh_head {
            for (k, v) in ParamStore::from_layout(&head_layout(&vit), &mut stream_rng(seed, STREAM_HEAD)).iter() {
                params.insert(k, v.clone());
            }
        }
        let peft_specs = peft_layout(&vit, &peft, mode);
        for (k, v) in ParamStore::from_layout(&peft_specs, &mut stream_rng(seed, STREAM_PEFT)).iter() {
            params.insert(k, v.clone());
        }
        let mut model = Model { vit, mode, peft, params };
        model.validate()?;
        if mode.freezes_backbone() {
            model.freeze_backbone();
        } else {
            model.params.iter_mut().for_each(|(_, t)| t.set_requires_grad(true));
        }
        Ok(model)
    }

    /// Marks every backbone tensor frozen; head and PEFT modules stay trainable.
    pub fn freeze_backbone(&mut self) {
        for (name, t) in self.params.iter_mut() {
            t.set_requires_grad(is_head(name) || is_peft(name));
        }
    }

    pub fn count_trainable(&self) -> ParamCount {
        self.params.count()
    }

    /// Checks that every layout entry is present with the expected shape.
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        for spec in Model::layout(&self.vit, self.mode, &self.peft) {
            let t = self
                .params
                .get(&spec.name)
                .map_err(|_| Error::Config(format!("incomplete model: missing parameter `{}`", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    /// Tokens through every block, then the final norm on the class token.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, image: &Tensor, track: bool) -> Result<Forward<'a>> {
        let patches = patchify(image, &self.vit)?;
        let mut b = Binder {
            g,
            store: &self.params,
            track,
            bound: Vec::new(),
        };
        let embed = EmbedVars {
            weight: b.var("patch_embed.weight")?,
            bias: b.var("patch_embed.bias")?,
            cls: b.var("cls_token")?,
            pos: b.var("pos_embed")?,
        };
        let pv = b.g.input(patches);
        let mut x = patch_embed(b.g, pv, embed)?;
        let mut attention = Vec::with_capacity(self.vit.depth);
        for i in 0..self.vit.depth {
            let block = b.block(i)?;
            let mut peft = PeftBlockVars::default();
            if self.mode.has_lora() {
                let mut deltas = ProjectionDeltas::default();
                for &t in &self.peft.targets {
                    let l = Some(b.lora(i, t)?);
                    match t {
                        LoraTarget::Query => deltas.query = l,
                        LoraTarget::Key => deltas.key = l,
                        LoraTarget::Value => deltas.value = l,
                        LoraTarget::Output => deltas.output = l,
                    }
                }
                peft.deltas = deltas;
            }
            if self.mode.has_adapters() {
                peft.serial = Some(b.adapter(i, Placement::Serial)?);
                peft.parallel = Some(b.adapter(i, Placement::Parallel)?);
            }
            let (y, attn) = selafd_block_forward(b.g, x, &block, &peft, &self.vit, self.peft.scale)?;
            x = y;
            attention.push(attn);
        }
        let final_norm = b.norm("norm")?;
        let cls = b.g.select_row(x, 0)?;
        let features = norm(b.g, cls, final_norm, self.vit.ln_eps)?;
        let head = b.linear("head")?;
        let logits = linear(b.g, features, head)?;
        Ok(Forward {
            logits,
            features,
            attention,
            trainable: b.bound,
        })
    }

    /// Head applied to a precomputed feature row.
    pub fn head_forward<'a>(&'a self, g: &mut Graph<'a>, features: VarId, track: bool) -> Result<(VarId, Vec<(&'a str, VarId)>)> {
        let mut b = Binder {
            g,
            store: &self.params,
            track,
            bound: Vec::new(),
        };
        let head = b.linear("head")?;
        let logits = linear(b.g, features, head)?;
        Ok((logits, b.bound))
    }

    /// Logits for one `[C, S, S]` image.
    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, image, false)?;
        g.value(f.logits).reshape(&[self.vit.num_classes])
    }

    /// Final-norm class-token feature `[1, d]` for one image.
    pub fn features(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, image, false)?;
        Ok(g.value(f.features))
    }

    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        Ok(argmax(self.logits(image)?.data()))
    }

    /// Per-block attention probabilities, each `[heads, T, T]`.
    pub fn attention_maps(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, image, false)?;
        f.attention
            .iter()
            .map(|&a| g.attention_probs(a).ok_or_else(|| Error::Contract("attention node without probabilities".into())))
            .collect()
    }

    /// Copy of the backbone and head only (PEFT entries removed).
    pub fn backbone_params(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, t) in self.params.iter().filter(|(k, _)| !is_peft(k)) {
            out.insert(k, t.clone());
        }
        out
    }
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Logits `[num_classes]` for `image`.
pub fn classify(image: &Tensor, model: &Model) -> Result<Tensor> {
    model.logits(image)
}
