//! LoRA in weight space and serial/parallel bottleneck adapters in feature
//! space.
//!
//! A LoRA-wrapped projection computes `x·W0ᵀ + b + (x·Aᵀ)·Bᵀ`, i.e. the
//! frozen weight plus the rank-`r` update `ΔW = B·A` with `A: [r, d_in]` and
//! `B: [d_out, r]`. No `alpha / r` scaling is applied.
//!
//! Adapters act on row activations: `up(ReLU(h·W_down + b_down))` with
//! `W_down: [d, m]` and `W_up: [m, d]`. The serial adapter sits after the
//! full attention output (including its output projection) and carries its
//! own skip connection; the parallel adapter reads the same normalized input
//! as the MLP and is added scaled by `s`.
//!
//! `B`, `W_up` and `b_up` start at zero so a freshly wrapped block computes
//! exactly the frozen block.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Graph, VarId};
use crate::error::{Error, Result};
use crate::params::{Init, ParamSpec};
use crate::tensor::Tensor;
use crate::vit::{block_prefix, linear, mha_forward, mlp_forward, norm, BlockVars, LinearVars, ProjectionDeltas, VitConfig};

/// Std of the normal initializer for LoRA `A`.
pub const LORA_A_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LoraTarget {
    Query,
    Key,
    Value,
    Output,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 4] = [LoraTarget::Query, LoraTarget::Key, LoraTarget::Value, LoraTarget::Output];

    pub fn short(self) -> &'static str {
        match self {
            LoraTarget::Query => "q",
            LoraTarget::Key => "k",
            LoraTarget::Value => "v",
            LoraTarget::Output => "o",
        }
    }
}

impl FromStr for LoraTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "q" | "query" => Ok(LoraTarget::Query),
            "k" | "key" => Ok(LoraTarget::Key),
            "v" | "value" => Ok(LoraTarget::Value),
            "o" | "output" | "proj" => Ok(LoraTarget::Output),
            other => Err(Error::Config(format!("unknown LoRA target `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeftConfig {
    pub rank: usize,
    pub bottleneck_ratio: f64,
    pub scale: f64,
    pub targets: Vec<LoraTarget>,
}

impl Default for PeftConfig {
    fn default() -> Self {
        PeftConfig {
            rank: 8,
            bottleneck_ratio: 0.5,
            scale: 0.2,
            targets: vec![LoraTarget::Query, LoraTarget::Value],
        }
    }
}

impl PeftConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.rank == 0 || self.rank >= d {
            return Err(Error::Config(format!("LoRA rank {} must satisfy 0 < r < d = {d}", self.rank)));
        }
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return Err(Error::Config(format!("parallel scale {} outside (0, 1]", self.scale)));
        }
        if !(self.bottleneck_ratio > 0.0) || bottleneck_dim(d, self.bottleneck_ratio) == 0 {
            return Err(Error::Config(format!("bottleneck ratio {} gives an empty adapter", self.bottleneck_ratio)));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("LoRA target set is empty".into()));
        }
        Ok(())
    }

    pub fn targets_string(&self) -> String {
        self.targets.iter().map(|t| t.short()).collect::<Vec<_>>().join(",")
    }
}

/// Adapter bottleneck width `m = round(d · ratio)`.
pub fn bottleneck_dim(d: usize, ratio: f64) -> usize {
    (d as f64 * ratio).round() as usize
}

/// Closed-form LoRA parameter count: `depth · |targets| · 2 · r · d`.
pub fn lora_param_count(depth: usize, targets: usize, rank: usize, d: usize) -> usize {
    depth * targets * 2 * rank * d
}

/// Closed-form size of one adapter: `2·d·m + m + d`.
pub fn adapter_param_count(d: usize, m: usize) -> usize {
    2 * d * m + m + d
}

/// Which modules are added and which weights train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FineTuneMode {
    /// LoRA on the configured projections plus both adapters.
    Selafd,
    /// LoRA only ("w/o adapter").
    LoraOnly,
    /// Serial and parallel adapters only ("w/o lora").
    AdapterOnly,
    /// Classification head only.
    Linear,
    /// Every backbone weight trainable, no added modules.
    Full,
}

impl FineTuneMode {
    pub const ALL: [FineTuneMode; 5] = [
        FineTuneMode::Selafd,
        FineTuneMode::LoraOnly,
        FineTuneMode::AdapterOnly,
        FineTuneMode::Linear,
        FineTuneMode::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FineTuneMode::Selafd => "selafd",
            FineTuneMode::LoraOnly => "lora_only",
            FineTuneMode::AdapterOnly => "adapter_only",
            FineTuneMode::Linear => "linear",
            FineTuneMode::Full => "full",
        }
    }

    pub fn has_lora(self) -> bool {
        matches!(self, FineTuneMode::Selafd | FineTuneMode::LoraOnly)
    }

    pub fn has_adapters(self) -> bool {
        matches!(self, FineTuneMode::Selafd | FineTuneMode::AdapterOnly)
    }

    pub fn freezes_backbone(self) -> bool {
        !matches!(self, FineTuneMode::Full)
    }
}

impl fmt::Display for FineTuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FineTuneMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        FineTuneMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = FineTuneMode::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown mode `{s}`; valid modes: {}", valid.join(", ")))
            })
    }
}

pub const PEFT_NAMESPACE: &str = "peft/";

pub fn lora_name(block: usize, target: LoraTarget, part: &str) -> String {
    format!("{PEFT_NAMESPACE}{}.lora_{}.{part}", block_prefix(block), target.short())
}

pub fn adapter_name(block: usize, placement: Placement, part: &str) -> String {
    format!("{PEFT_NAMESPACE}{}.{}.{part}", block_prefix(block), placement.name())
}

/// Layout of the PEFT modules `mode` adds; every entry is trainable.
pub fn peft_layout(vit: &VitConfig, peft: &PeftConfig, mode: FineTuneMode) -> Vec<ParamSpec> {
    let d = vit.embed_dim;
    let r = peft.rank;
    let m = bottleneck_dim(d, peft.bottleneck_ratio);
    let down = Init::Uniform(1.0 / (d as f64).sqrt());
    let mut out = Vec::new();
    for i in 0..vit.depth {
        if mode.has_lora() {
            for &t in &peft.targets {
                out.push(ParamSpec::new(lora_name(i, t, "a"), &[r, d], Init::Normal(LORA_A_STD)));
                out.push(ParamSpec::new(lora_name(i, t, "b"), &[d, r], Init::Zeros));
            }
        }
        if mode.has_adapters() {
            for pl in [Placement::Serial, Placement::Parallel] {
                out.push(ParamSpec::new(adapter_name(i, pl, "down.weight"), &[d, m], down));
                out.push(ParamSpec::new(adapter_name(i, pl, "down.bias"), &[m], Init::Zeros));
                out.push(ParamSpec::new(adapter_name(i, pl, "up.weight"), &[m, d], Init::Zeros));
                out.push(ParamSpec::new(adapter_name(i, pl, "up.bias"), &[d], Init::Zeros));
            }
        }
    }
    for s in &mut out {
        s.trainable = true;
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct LoraVars {
    pub a: VarId,
    pub b: VarId,
}

#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub w_down: VarId,
    pub b_down: VarId,
    pub w_up: VarId,
    pub b_up: VarId,
}

/// PEFT modules of one block; absent entries fall back to the frozen path.
#[derive(Debug, Clone, Copy, Default)]
pub struct PeftBlockVars {
    pub deltas: ProjectionDeltas,
    pub serial: Option<AdapterVars>,
    pub parallel: Option<AdapterVars>,
}

/// `x·W0ᵀ + b + (x·Aᵀ)·Bᵀ`
pub fn lora_linear(g: &mut Graph<'_>, x: VarId, base: LinearVars, lora: LoraVars) -> Result<VarId> {
    let frozen = linear(g, x, base)?;
    let down = g.matmul_nt(x, lora.a)?;
    let delta = g.matmul_nt(down, lora.b)?;
    g.add(frozen, delta)
}

/// Bottleneck branch `ReLU(h·W_down + b_down)·W_up + b_up`, without skip.
pub fn adapter_branch(g: &mut Graph<'_>, h: VarId, ad: AdapterVars) -> Result<VarId> {
    let z = g.matmul(h, ad.w_down)?;
    let z = g.add_bias(z, ad.b_down)?;
    let z = g.relu(z);
    let u = g.matmul(z, ad.w_up)?;
    g.add_bias(u, ad.b_up)
}

/// Serial adapter with its internal skip: `h + branch(h)`.
pub fn serial_adapter(g: &mut Graph<'_>, h: VarId, ad: AdapterVars) -> Result<VarId> {
    let branch = adapter_branch(g, h, ad)?;
    g.add(h, branch)
}

/// One adapted transformer block:
///
/// ```text
/// x' = SerialAdapter(MHA_lora(LN1(x))) + x
/// y  = MLP(LN2(x')) + s · ParallelAdapter(LN2(x')) + x'
/// ```
///
/// Returns the block output and the attention node.
pub fn selafd_block_forward(
    g: &mut Graph<'_>,
    x: VarId,
    block: &BlockVars,
    peft: &PeftBlockVars,
    cfg: &VitConfig,
    s: f64,
) -> Result<(VarId, VarId)> {
    let h = norm(g, x, block.norm1, cfg.ln_eps)?;
    let mha = mha_forward(g, h, block, cfg.heads, &peft.deltas)?;
    let attn_out = match peft.serial {
        Some(ad) => serial_adapter(g, mha.out, ad)?,
        None => mha.out,
    };
    let x1 = g.add(attn_out, x)?;
    let h2 = norm(g, x1, block.norm2, cfg.ln_eps)?;
    let mut m = mlp_forward(g, h2, block)?;
    if let Some(ad) = peft.parallel {
        let p = adapter_branch(g, h2, ad)?;
        let p = g.scale(p, s);
        m = g.add(m, p)?;
    }
    Ok((g.add(m, x1)?, mha.attention))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Placement {
    Serial,
    Parallel,
}

impl Placement {
    pub fn name(self) -> &'static str {
        match self {
            Placement::Serial => "serial",
            Placement::Parallel => "parallel",
        }
    }
}

/// Stand-alone LoRA factors for one projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    pub a: Tensor,
    pub b: Tensor,
    pub target: LoraTarget,
    merged: bool,
}

impl LoraLayer {
    /// `A ~ N(0, 0.02²)`, `B = 0`.
    pub fn new<R: Rng + ?Sized>(d: usize, rank: usize, target: LoraTarget, rng: &mut R) -> Result<Self> {
        if rank == 0 || rank >= d {
            return Err(Error::Config(format!("LoRA rank {rank} must satisfy 0 < r < d = {d}")));
        }
        Ok(LoraLayer {
            a: Tensor::randn(&[rank, d], LORA_A_STD, rng),
            b: Tensor::zeros(&[d, rank]),
            target,
            merged: false,
        })
    }

    pub fn from_factors(a: Tensor, b: Tensor, target: LoraTarget) -> Result<Self> {
        let (r, d_in) = a.dims2()?;
        let (d_out, r2) = b.dims2()?;
        if r != r2 {
            return Err(Error::dim("lora factors", a.shape(), b.shape()));
        }
        if r >= d_in.min(d_out) {
            return Err(Error::Config(format!("LoRA rank {r} not below model dimension")));
        }
        Ok(LoraLayer { a, b, target, merged: false })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    /// `ΔW = B·A`
    pub fn delta(&self) -> Result<Tensor> {
        self.b.matmul(&self.a)
    }

    /// Folds `B·A` into `w0` in place. Refused while already merged.
    pub fn merge_into(&mut self, w0: &mut Tensor) -> Result<()> {
        *w0 = lora_merge(w0, self)?;
        self.merged = true;
        Ok(())
    }

    /// Re-zeroes `B`, which clears the merged state.
    pub fn rezero(&mut self) {
        self.b = Tensor::zeros(self.b.shape());
        self.merged = false;
    }
}

/// Applies a LoRA-wrapped projection (no bias) to rows `x: [n, d]`.
pub fn lora_forward(x: &Tensor, w0: &Tensor, lora: &LoraLayer) -> Result<Tensor> {
    let (d_out, d_in) = w0.dims2()?;
    if lora.a.shape() != [lora.rank(), d_in] || lora.b.shape() != [d_out, lora.rank()] {
        return Err(Error::dim("lora_forward", w0.shape(), lora.a.shape()));
    }
    let zero_bias = Tensor::zeros(&[d_out]);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let base = LinearVars {
        weight: g.constant(w0),
        bias: g.constant(&zero_bias),
    };
    let lv = LoraVars {
        a: g.constant(&lora.a),
        b: g.constant(&lora.b),
    };
    let y = lora_linear(&mut g, xv, base, lv)?;
    Ok(g.value(y))
}

/// `W0 + B·A`; refuses a layer whose update was already folded in.
pub fn lora_merge(w0: &Tensor, lora: &LoraLayer) -> Result<Tensor> {
    if lora.merged {
        return Err(Error::Contract(
            "LoRA update already merged; re-zero B before merging again".into(),
        ));
    }
    let delta = lora.delta()?;
    if delta.shape() != w0.shape() {
        return Err(Error::dim("lora_merge", w0.shape(), delta.shape()));
    }
    w0.add(&delta)
}

/// Stand-alone bottleneck adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub w_down: Tensor,
    pub b_down: Tensor,
    pub w_up: Tensor,
    pub b_up: Tensor,
    pub placement: Placement,
}

impl Adapter {
    /// Down-projection uniform in ±1/√d, up-projection and biases zero.
    pub fn new<R: Rng + ?Sized>(d: usize, ratio: f64, placement: Placement, rng: &mut R) -> Result<Self> {
        let m = bottleneck_dim(d, ratio);
        if m == 0 {
            return Err(Error::Config(format!("bottleneck ratio {ratio} gives an empty adapter for d = {d}")));
        }
        let bound = 1.0 / (d as f64).sqrt();
        Ok(Adapter {
            w_down: Tensor::uniform(&[d, m], -bound, bound, rng),
            b_down: Tensor::zeros(&[m]),
            w_up: Tensor::zeros(&[m, d]),
            b_up: Tensor::zeros(&[d]),
            placement,
        })
    }

    pub fn bottleneck(&self) -> usize {
        self.b_down.numel()
    }

    pub fn param_count(&self) -> usize {
        self.w_down.numel() + self.b_down.numel() + self.w_up.numel() + self.b_up.numel()
    }

    fn bind<'a>(&'a self, g: &mut Graph<'a>) -> AdapterVars {
        AdapterVars {
            w_down: g.constant(&self.w_down),
            b_down: g.constant(&self.b_down),
            w_up: g.constant(&self.w_up),
            b_up: g.constant(&self.b_up),
        }
    }
}

/// `h + W_up·ReLU(W_down·h + b_down) + b_up` for rows `h: [n, d]`.
pub fn serial_adapter_apply(h: &Tensor, adapter: &Adapter) -> Result<Tensor> {
    if adapter.placement != Placement::Serial {
        return Err(Error::Config("serial_adapter_apply needs a serial adapter".into()));
    }
    let mut g = Graph::new();
    let hv = g.constant(h);
    let ad = adapter.bind(&mut g);
    let y = serial_adapter(&mut g, hv, ad)?;
    Ok(g.value(y))
}

/// `s · (W_up·ReLU(W_down·h + b_down) + b_up)` for rows `h: [n, d]`.
pub fn parallel_adapter_apply(h: &Tensor, adapter: &Adapter, s: f64) -> Result<Tensor> {
    if adapter.placement != Placement::Parallel {
        return Err(Error::Config("parallel_adapter_apply needs a parallel adapter".into()));
    }
    let mut g = Graph::new();
    let hv = g.constant(h);
    let ad = adapter.bind(&mut g);
    let y = adapter_branch(&mut g, hv, ad)?;
    let y = g.scale(y, s);
    Ok(g.value(y))
}
