//! Metrics, prediction dumps, attention views and the ablation sweep.

use std::fmt::Write as _;

use crate::dataset::{Dataset, DatasetSplit};
use crate::error::{Error, Result};
use crate::model::{argmax, Model};
use crate::peft::{FineTuneMode, PeftConfig};
use crate::radar::resize_bilinear;
use crate::tensor::Tensor;
use crate::train::{train, TrainConfig, TrainOutcome};

pub const FALL_LABEL: &str = "falling";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction {
    pub truth: usize,
    pub prediction: usize,
    pub sample_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub mode: String,
    pub classes: Vec<String>,
    /// `confusion[truth][prediction]`.
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    /// `None` for classes absent from the evaluated set.
    pub recall: Vec<Option<f64>>,
    pub trainable: usize,
    pub total: usize,
    pub config: Vec<(String, String)>,
}

impl MetricsReport {
    pub fn from_predictions(mode: &str, classes: &[String], preds: &[Prediction], trainable: usize, total: usize) -> Result<Self> {
        if preds.is_empty() {
            return Err(Error::Input("cannot report on an empty test set".into()));
        }
        let c = classes.len();
        let mut confusion = vec![vec![0usize; c]; c];
        for p in preds {
            if p.truth >= c || p.prediction >= c {
                return Err(Error::Input(format!("prediction for `{}` outside {c} classes", p.sample_id)));
            }
            confusion[p.truth][p.prediction] += 1;
        }
        let trace: usize = (0..c).map(|i| confusion[i][i]).sum();
        let recall = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[i] as f64 / n as f64)
            })
            .collect();
        Ok(MetricsReport {
            mode: mode.to_string(),
            classes: classes.to_vec(),
            confusion,
            accuracy: trace as f64 / preds.len() as f64,
            recall,
            trainable,
            total,
            config: Vec::new(),
        })
    }

    pub fn with_config(mut self, key: &str, value: impl ToString) -> Self {
        self.config.push((key.to_string(), value.to_string()));
        self
    }

    pub fn test_count(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.trainable as f64 / self.total as f64
        }
    }

    /// Line-oriented `key=value` record.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode={}", self.mode);
        let _ = writeln!(s, "classes={}", self.classes.join(","));
        let _ = writeln!(s, "test_samples={}", self.test_count());
        let _ = writeln!(s, "accuracy={}", self.accuracy);
        let _ = writeln!(s, "trainable={}", self.trainable);
        let _ = writeln!(s, "total={}", self.total);
        let _ = writeln!(s, "trainable_fraction={}", self.fraction());
        for (name, r) in self.classes.iter().zip(&self.recall) {
            let _ = writeln!(s, "recall.{name}={}", r.map_or("nan".to_string(), |v| v.to_string()));
        }
        for (name, row) in self.classes.iter().zip(&self.confusion) {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            let _ = writeln!(s, "confusion.{name}={}", cells.join(","));
        }
        for (k, v) in &self.config {
            let _ = writeln!(s, "config.{k}={v}");
        }
        s
    }
}

/// `confusion[fall][fall] / row_sum(fall)`.
pub fn fall_recall(report: &MetricsReport) -> Result<f64> {
    let i = report
        .classes
        .iter()
        .position(|c| c == FALL_LABEL)
        .ok_or_else(|| Error::Input("report has no `falling` class".into()))?;
    report.recall[i].ok_or_else(|| Error::Input("no falling samples in the evaluated set".into()))
}

/// Argmax prediction (ties to the lower class index) for every index.
pub fn predict(model: &Model, data: &Dataset, idx: &[usize]) -> Result<Vec<Prediction>> {
    idx.iter()
        .map(|&i| {
            let s = data
                .samples
                .get(i)
                .ok_or_else(|| Error::Input(format!("index {i} outside a dataset of {}", data.len())))?;
            Ok(Prediction {
                truth: s.label,
                prediction: argmax(model.logits(&s.image)?.data()),
                sample_id: s.id.clone(),
            })
        })
        .collect()
}

/// Report over `split.test`, with the split echoed into the config block.
pub fn evaluate(model: &Model, split: &DatasetSplit, data: &Dataset) -> Result<(MetricsReport, Vec<Prediction>)> {
    if split.test.is_empty() {
        return Err(Error::Input("empty test set".into()));
    }
    let preds = predict(model, data, &split.test)?;
    let count = model.count_trainable();
    let report = MetricsReport::from_predictions(model.mode.name(), &data.classes, &preds, count.trainable, count.total)?
        .with_config("split_hash", split.hash())
        .with_config("split_seed", split.seed)
        .with_config("split_ratio", split.ratio)
        .with_config("stratified", split.stratified);
    Ok((report, preds))
}

/// `truth,prediction,sample_id` lines with class names.
pub fn predictions_csv(classes: &[String], preds: &[Prediction]) -> String {
    let mut s = String::from("truth,prediction,sample_id\n");
    for p in preds {
        let _ = writeln!(s, "{},{},{}", classes[p.truth], classes[p.prediction], p.sample_id);
    }
    s
}

/// Retained attention of every block for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSet {
    /// `[heads, T, T]` per block.
    pub layers: Vec<Tensor>,
    pub grid: usize,
    pub image_size: usize,
}

/// Class-token attention to the patch grid, before and after upsampling.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub layer: usize,
    /// `None` for the head mean.
    pub head: Option<usize>,
    /// `[grid, grid]`.
    pub patches: Tensor,
    /// `[image_size, image_size]`.
    pub upsampled: Tensor,
}

pub fn extract_attention(model: &Model, image: &Tensor) -> Result<AttentionSet> {
    Ok(AttentionSet {
        layers: model.attention_maps(image)?,
        grid: model.vit.grid(),
        image_size: model.vit.image_size,
    })
}

impl AttentionSet {
    pub fn heads(&self) -> usize {
        self.layers.first().map_or(0, |l| l.shape()[0])
    }

    pub fn map(&self, layer: usize, head: Option<usize>) -> Result<AttentionMap> {
        let a = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::Input(format!("layer {layer} outside {} blocks", self.layers.len())))?;
        let (h, t) = (a.shape()[0], a.shape()[1]);
        let heads: Vec<usize> = match head {
            Some(k) if k < h => vec![k],
            Some(k) => return Err(Error::Input(format!("head {k} outside {h} heads"))),
            None => (0..h).collect(),
        };
        let n = self.grid * self.grid;
        let mut cells = vec![0.0; n];
        for &k in &heads {
            let cls_row = &a.data()[k * t * t..k * t * t + t];
            for (c, v) in cells.iter_mut().zip(&cls_row[1..]) {
                *c += v;
            }
        }
        cells.iter_mut().for_each(|c| *c /= heads.len() as f64);
        let patches = Tensor::new(&[self.grid, self.grid], cells)?;
        let upsampled = resize_bilinear(&patches, self.image_size, self.image_size)?;
        Ok(AttentionMap {
            layer,
            head,
            patches,
            upsampled,
        })
    }

    /// Last block, mean over heads.
    pub fn default_view(&self) -> Result<AttentionMap> {
        self.map(self.layers.len() - 1, None)
    }
}

/// One row of the ablation sweep.
#[derive(Debug)]
pub struct AblationRun {
    pub mode: FineTuneMode,
    pub result: Result<(TrainOutcome, MetricsReport, Vec<Prediction>)>,
}

#[derive(Debug)]
pub struct AblationTable {
    pub header: Vec<(String, String)>,
    pub runs: Vec<AblationRun>,
}

/// Trains every mode from the same base, split, seed and schedule. Failures
/// become failed rows.
pub fn ablate(base: &Model, data: &Dataset, split: &DatasetSplit, cfg: &TrainConfig, peft: &PeftConfig) -> AblationTable {
    let header = vec![
        ("split_hash".to_string(), split.hash()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("epochs".to_string(), cfg.epochs.to_string()),
        ("schedule".to_string(), format!("cosine(t_max={},eta_min={:e})", cfg.epochs, cfg.eta_min)),
        ("lr".to_string(), format!("{:e}", cfg.lr)),
        ("batch_size".to_string(), cfg.batch_size.min(split.train.len()).to_string()),
        ("modes".to_string(), FineTuneMode::ALL.len().to_string()),
    ];
    let runs = FineTuneMode::ALL
        .into_iter()
        .map(|mode| {
            log::info!("ablation: training {mode}");
            let result = Model::wrap(base, mode, peft.clone(), data.classes.len(), cfg.seed)
                .and_then(|m| train(m, data, split, cfg))
                .and_then(|out| {
                    let (report, preds) = evaluate(&out.best, split, data)?;
                    let report = report
                        .with_config("best_epoch", out.best_epoch)
                        .with_config("epochs", cfg.epochs)
                        .with_config("seed", cfg.seed);
                    Ok((out, report, preds))
                });
            if let Err(e) = &result {
                log::warn!("ablation mode {mode} failed: {e}");
            }
            AblationRun { mode, result }
        })
        .collect();
    AblationTable { header, runs }
}

impl AblationTable {
    /// Header block, then one `[mode]` block per row.
    pub fn to_text(&self) -> String {
        let mut s = String::from("[ablation]\n");
        for (k, v) in &self.header {
            let _ = writeln!(s, "{k}={v}");
        }
        for run in &self.runs {
            let _ = writeln!(s, "\n[{}]", run.mode);
            match &run.result {
                Ok((_, report, _)) => {
                    let _ = writeln!(s, "status=ok");
                    let _ = writeln!(s, "split_hash={}", self.split_hash());
                    let _ = writeln!(s, "accuracy={}", report.accuracy);
                    let fall = fall_recall(report).map_or("nan".to_string(), |v| v.to_string());
                    let _ = writeln!(s, "fall_recall={fall}");
                    let _ = writeln!(s, "trainable={}", report.trainable);
                    let _ = writeln!(s, "total={}", report.total);
                }
                Err(e) => {
                    let _ = writeln!(s, "status=failed");
                    let _ = writeln!(s, "split_hash={}", self.split_hash());
                    let _ = writeln!(s, "error={}", e.to_string().replace('\n', " "));
                }
            }
        }
        s
    }

    /// Fixed-width table for reading.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<14} {:>9} {:>12} {:>10} {:>10} {:>9}\n",
            "mode", "accuracy", "fall_recall", "trainable", "total", "fraction"
        );
        for run in &self.runs {
            match &run.result {
                Ok((_, r, _)) => {
                    let fall = fall_recall(r).map_or("n/a".to_string(), |v| format!("{v:.4}"));
                    let _ = writeln!(
                        s,
                        "{:<14} {:>9.4} {:>12} {:>10} {:>10} {:>9.5}",
                        run.mode.name(),
                        r.accuracy,
                        fall,
                        r.trainable,
                        r.total,
                        r.fraction()
                    );
                }
                Err(_) => {
                    let _ = writeln!(s, "{:<14} {:>9}", run.mode.name(), "FAILED");
                }
            }
        }
        s
    }

    pub fn split_hash(&self) -> &str {
        self.header
            .iter()
            .find(|(k, _)| k == "split_hash")
            .map_or("", |(_, v)| v.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes() -> Vec<String> {
        crate::radar::Activity::names()
    }

    fn preds(pairs: &[(usize, usize)]) -> Vec<Prediction> {
        pairs
            .iter()
            .enumerate()
            .map(|(i, &(t, p))| Prediction {
                truth: t,
                prediction: p,
                sample_id: format!("s{i}"),
            })
            .collect()
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let perfect: Vec<(usize, usize)> = (0..60).map(|i| (i % 6, i % 6)).collect();
        let r = MetricsReport::from_predictions("x", &classes(), &preds(&perfect), 1, 2).unwrap();
        assert_eq!(r.accuracy, 1.0);
        for i in 0..6 {
            assert_eq!(r.confusion[i][i], 10);
        }
        let constant: Vec<(usize, usize)> = (0..60).map(|i| (i % 6, 2)).collect();
        let r = MetricsReport::from_predictions("x", &classes(), &preds(&constant), 1, 2).unwrap();
        assert!((r.accuracy - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn fall_recall_arithmetic() {
        let mut pairs: Vec<(usize, usize)> = (0..20).map(|_| (5, 5)).collect();
        pairs[3] = (5, 1);
        pairs.push((0, 0));
        let r = MetricsReport::from_predictions("x", &classes(), &preds(&pairs), 1, 2).unwrap();
        assert!((fall_recall(&r).unwrap() - 0.95).abs() < 1e-15);
        let none = MetricsReport::from_predictions("x", &classes(), &preds(&[(0, 0)]), 1, 2).unwrap();
        assert!(fall_recall(&none).is_err());
        assert!(MetricsReport::from_predictions("x", &classes(), &[], 1, 2).is_err());
    }

    #[test]
    fn uniform_attention_gives_flat_map() {
        let t = 5;
        let set = AttentionSet {
            layers: vec![Tensor::full(&[2, t, t], 1.0 / t as f64)],
            grid: 2,
            image_size: 8,
        };
        let m = set.default_view().unwrap();
        assert!(m.patches.data().iter().all(|&v| v == 0.2));
        assert!(m.upsampled.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        assert!(m.patches.data().iter().sum::<f64>() <= 1.0);
    }
}
