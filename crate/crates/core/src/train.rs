//! Cross-entropy training with Adam and a cosine-annealed learning rate.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::dataset::{Dataset, DatasetSplit};
use crate::error::{Error, Result};
use crate::model::{argmax, Model};
use crate::params::ParamStore;
use crate::peft::FineTuneMode;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub eta_min: f64,
    pub seed: u64,
    /// Test accuracy is measured every `eval_every` epochs and after the last.
    pub eval_every: usize,
    /// Log `wall_ms` as 0 so identical runs give identical logs.
    pub deterministic_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 128,
            epochs: 200,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            eta_min: 0.0,
            seed: 0,
            eval_every: 1,
            deterministic_timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam needs 0 <= beta < 1 and eps > 0".into()));
        }
        if !(self.eta_min >= 0.0 && self.eta_min <= self.lr) {
            return Err(Error::Config(format!("eta_min {} outside [0, lr]", self.eta_min)));
        }
        Ok(())
    }
}

/// `eta_min + ½(lr0 − eta_min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, eta_min: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    eta_min + 0.5 * (lr0 - eta_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Mean cross-entropy of `[B, C]` logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits);
    let loss = g.cross_entropy(l, labels)?;
    Ok(g.data(loss)[0])
}

/// First and second moments for every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let mut m = BTreeMap::new();
        for (name, t) in params.iter().filter(|(_, t)| t.requires_grad()) {
            m.insert(name.to_string(), vec![0.0; t.numel()]);
        }
        AdamState {
            beta1,
            beta2,
            eps,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.m.keys().map(String::as_str)
    }
}

/// One bias-corrected Adam update. Parameters without a gradient entry or
/// without moment buffers are left untouched.
pub fn adam_step(params: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>, state: &mut AdamState, lr: f64) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (name, g) in grads {
        let (Some(m), Some(v)) = (state.m.get_mut(name), state.v.get_mut(name)) else {
            continue;
        };
        let p = params.get_mut(name)?;
        if !p.requires_grad() {
            continue;
        }
        if g.len() != m.len() || p.numel() != m.len() {
            return Err(Error::dim("adam_step", p.shape(), &[g.len()]));
        }
        for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = state.beta1 * *mi + (1.0 - state.beta1) * gi;
            *vi = state.beta2 * *vi + (1.0 - state.beta2) * gi * gi;
            let mh = *mi / c1;
            let vh = *vi / c2;
            *w -= lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    /// `None` on epochs without evaluation.
    pub test_acc: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub header: Vec<(String, String)>,
    pub epochs: Vec<EpochLog>,
}

pub const LOG_COLUMNS: &str = "epoch lr train_loss train_acc test_acc wall_ms";

impl TrainLog {
    /// `# key=value` header, column line, then one line per epoch.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.header {
            let _ = writeln!(s, "# {k}={v}");
        }
        let _ = writeln!(s, "# {LOG_COLUMNS}");
        for e in &self.epochs {
            let test = e.test_acc.map_or_else(|| "-".to_string(), |a| format!("{a:e}"));
            let _ = writeln!(
                s,
                "{} {:e} {:e} {:e} {} {}",
                e.epoch, e.lr, e.train_loss, e.train_acc, test, e.wall_ms
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<TrainLog> {
        let mut log = TrainLog::default();
        let bad = |line: &str| Error::Input(format!("bad training log line `{line}`"));
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("# ") {
                if let Some((k, v)) = rest.split_once('=') {
                    log.header.push((k.to_string(), v.to_string()));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(' ').collect();
            if f.len() != 6 {
                return Err(bad(line));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
            log.epochs.push(EpochLog {
                epoch: f[0].parse().map_err(|_| bad(line))?,
                lr: num(f[1])?,
                train_loss: num(f[2])?,
                train_acc: num(f[3])?,
                test_acc: if f[4] == "-" { None } else { Some(num(f[4])?) },
                wall_ms: f[5].parse().map_err(|_| bad(line))?,
            });
        }
        Ok(log)
    }

    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the epoch with the best test accuracy (earliest on ties).
    pub best: Model,
    pub best_epoch: usize,
    pub best_test_acc: f64,
    pub last: Model,
    pub log: TrainLog,
    /// Mean training-set loss before the first update.
    pub initial_loss: f64,
    pub optimizer: AdamState,
}

/// Per-sample forward/backward, summing parameter gradients by name.
struct Step {
    loss: f64,
    correct: bool,
}

enum Inputs<'d> {
    Images(&'d Dataset),
    /// Cached final-norm class-token features (linear mode).
    Features(Vec<Tensor>, &'d Dataset),
}

impl Inputs<'_> {
    fn label(&self, i: usize) -> usize {
        match self {
            Inputs::Images(d) | Inputs::Features(_, d) => d.samples[i].label,
        }
    }

    fn id(&self, i: usize) -> &str {
        match self {
            Inputs::Images(d) | Inputs::Features(_, d) => &d.samples[i].id,
        }
    }

    fn run(&self, model: &Model, i: usize, grads: Option<&mut BTreeMap<String, Vec<f64>>>, scale: f64) -> Result<Step> {
        let label = self.label(i);
        let track = grads.is_some();
        let mut g = Graph::new();
        let (logits, bound) = match self {
            Inputs::Images(d) => {
                let f = model.forward(&mut g, &d.samples[i].image, track)?;
                (f.logits, f.trainable)
            }
            Inputs::Features(feats, _) => {
                let fv = g.constant(&feats[i]);
                model.head_forward(&mut g, fv, track)?
            }
        };
        let correct = argmax(g.data(logits)) == label;
        let loss = g.cross_entropy(logits, &[label])?;
        let value = g.data(loss)[0];
        if let Some(acc) = grads {
            if value.is_finite() {
                g.backward(loss)?;
                for (name, v) in bound {
                    if let Some(gr) = g.grad(v) {
                        let slot = acc.entry(name.to_string()).or_insert_with(|| vec![0.0; gr.len()]);
                        slot.iter_mut().zip(gr).for_each(|(s, x)| *s += scale * x);
                    }
                }
            }
        }
        Ok(Step { loss: value, correct })
    }
}

fn accuracy(inputs: &Inputs<'_>, model: &Model, idx: &[usize]) -> Result<f64> {
    let mut ok = 0;
    for &i in idx {
        ok += usize::from(inputs.run(model, i, None, 0.0)?.correct);
    }
    Ok(ok as f64 / idx.len() as f64)
}

fn mean_loss(inputs: &Inputs<'_>, model: &Model, idx: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for &i in idx {
        total += inputs.run(model, i, None, 0.0)?.loss;
    }
    Ok(total / idx.len() as f64)
}

/// Config and model description written at the top of every log.
pub fn log_header(model: &Model, split: &DatasetSplit, cfg: &TrainConfig, batch: usize) -> Vec<(String, String)> {
    let count = model.count_trainable();
    let v = &model.vit;
    [
        ("mode", model.mode.to_string()),
        ("lr", format!("{:e}", cfg.lr)),
        ("batch_size", batch.to_string()),
        ("epochs", cfg.epochs.to_string()),
        ("optimizer", format!("adam(beta1={},beta2={},eps={:e})", cfg.beta1, cfg.beta2, cfg.adam_eps)),
        ("schedule", format!("cosine(t_max={},eta_min={:e})", cfg.epochs, cfg.eta_min)),
        ("seed", cfg.seed.to_string()),
        (
            "vit",
            format!(
                "image={},patch={},dim={},depth={},heads={},mlp_ratio={},classes={},channels={}",
                v.image_size, v.patch_size, v.embed_dim, v.depth, v.heads, v.mlp_ratio, v.num_classes, v.channels
            ),
        ),
        (
            "peft",
            format!(
                "rank={},ratio={},scale={},targets={}",
                model.peft.rank,
                model.peft.bottleneck_ratio,
                model.peft.scale,
                model.peft.targets_string()
            ),
        ),
        ("trainable", count.trainable.to_string()),
        ("total", count.total.to_string()),
        ("split_hash", split.hash()),
        ("split", format!("ratio={},seed={},train={},test={}", split.ratio, split.seed, split.train.len(), split.test.len())),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// Trains the trainable parameters of `model` on `split.train`.
pub fn train(mut model: Model, data: &Dataset, split: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::Input("training needs non-empty train and test splits".into()));
    }
    if data.classes.len() != model.vit.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model head has {}",
            data.classes.len(),
            model.vit.num_classes
        )));
    }
    if let Some(&i) = split.train.iter().chain(&split.test).find(|&&i| i >= data.len()) {
        return Err(Error::Input(format!("split index {i} outside a dataset of {}", data.len())));
    }
    let batch = cfg.batch_size.min(split.train.len());
    if batch < cfg.batch_size {
        log::info!("batch size reduced from {} to the {} training samples", cfg.batch_size, batch);
    }

    let inputs = if model.mode == FineTuneMode::Linear {
        let feats = data
            .samples
            .iter()
            .map(|s| model.features(&s.image))
            .collect::<Result<Vec<_>>>()?;
        Inputs::Features(feats, data)
    } else {
        Inputs::Images(data)
    };

    let mut state = AdamState::new(&model.params, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut log = TrainLog {
        header: log_header(&model, split, cfg, batch),
        epochs: Vec::new(),
    };
    let initial_loss = mean_loss(&inputs, &model, &split.train)?;
    let mut order = split.train.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(7);
    let mut best: Option<(usize, f64, ParamStore)> = None;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr, cfg.eta_min);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, chunk) in order.chunks(batch).enumerate() {
            let mut grads = BTreeMap::new();
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let step = inputs.run(&model, i, Some(&mut grads), scale)?;
                if !step.loss.is_finite() {
                    let ids: Vec<&str> = chunk.iter().map(|&j| inputs.id(j)).collect();
                    return Err(Error::Numerical {
                        epoch,
                        batch: b,
                        detail: format!("loss {} on sample `{}`; batch ids [{}]", step.loss, inputs.id(i), ids.join(", ")),
                    });
                }
                loss_sum += step.loss;
                correct += usize::from(step.correct);
            }
            adam_step(&mut model.params, &grads, &mut state, lr)?;
        }
        let evaluate = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        let test_acc = if evaluate {
            Some(accuracy(&inputs, &model, &split.test)?)
        } else {
            None
        };
        if let Some(acc) = test_acc {
            if best.as_ref().is_none_or(|(_, b, _)| acc > *b) {
                best = Some((epoch, acc, model.params.clone()));
            }
        }
        let entry = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / order.len() as f64,
            train_acc: correct as f64 / order.len() as f64,
            test_acc,
            wall_ms: if cfg.deterministic_timing {
                0
            } else {
                started.elapsed().as_millis() as u64
            },
        };
        log::info!(
            "epoch {epoch}: lr {lr:.3e} loss {:.4} train {:.3} test {}",
            entry.train_loss,
            entry.train_acc,
            test_acc.map_or("-".into(), |a| format!("{a:.3}"))
        );
        log.epochs.push(entry);
    }

    let (best_epoch, best_test_acc, best_params) = best.expect("final epoch is always evaluated");
    let best = Model {
        params: best_params,
        ..model.clone()
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_test_acc,
        last: model,
        log,
        initial_loss,
        optimizer: state,
    })
}
