//! Labelled corpora, stratified splits and corpus synthesis.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::radar::{
    rasterize, read_corpus_manifest, read_recording, stft, synth_recording, write_corpus_manifest, write_recording,
    Activity, CwRecording, Distractor, ManifestEntry, RasterConfig, StftParams, SynthConfig,
};
use crate::tensor::Tensor;

/// Which synthetic label set a corpus draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Activity,
    Distractor,
}

impl Task {
    pub fn classes(self) -> Vec<String> {
        match self {
            Task::Activity => Activity::names(),
            Task::Distractor => Distractor::names(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Activity => "activity",
            Task::Distractor => "distractor",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "activity" => Ok(Task::Activity),
            "distractor" => Ok(Task::Distractor),
            other => Err(Error::Config(format!("unknown task `{other}` (expected activity or distractor)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
    pub id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_index(&self, label: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::Input(format!("label `{label}` is not one of {:?}", self.classes)))
    }

    /// Spectrogram, then raster, for every recording.
    pub fn from_recordings(
        classes: Vec<String>,
        recordings: &[(String, CwRecording)],
        stft_params: Option<StftParams>,
        raster: &RasterConfig,
    ) -> Result<Dataset> {
        let mut ds = Dataset {
            classes,
            samples: Vec::with_capacity(recordings.len()),
        };
        for (id, rec) in recordings {
            let label = ds.class_index(&rec.label)?;
            let p = stft_params.unwrap_or_else(|| StftParams::for_sample_rate(rec.sample_rate));
            let sp = stft(rec, &p)?;
            ds.samples.push(Sample {
                image: rasterize(&sp, raster)?,
                label,
                id: id.clone(),
            });
        }
        Ok(ds)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
    pub ratio: f64,
    pub stratified: bool,
}

impl DatasetSplit {
    /// SHA-256 over both index lists.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"train");
        for i in &self.train {
            h.update((*i as u64).to_le_bytes());
        }
        h.update(b"test");
        for i in &self.test {
            h.update((*i as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Stratified, seeded split. Each class keeps `round(n·ratio)` samples for
/// training, clamped so both sides get at least one.
pub fn split(labels: &[usize], ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} outside (0, 1)")));
    }
    if labels.is_empty() {
        return Err(Error::Input("cannot split an empty dataset".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::Input(format!("class {c} has {} sample(s); stratification needs 2", idx.len())));
        }
        idx.shuffle(&mut rng);
        let n_train = ((idx.len() as f64 * ratio).round() as usize).clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(DatasetSplit {
        train,
        test,
        seed,
        ratio,
        stratified: true,
    })
}

/// Manifest entries for `per_class` recordings of every class of `task`.
pub fn corpus_entries(task: Task, per_class: usize, seed: u64) -> Result<Vec<ManifestEntry>> {
    if per_class == 0 {
        return Err(Error::Config("per_class must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for label in task.classes() {
        for k in 0..per_class {
            let id = format!("{label}_{k:04}");
            out.push(ManifestEntry {
                path: format!("{id}.rec"),
                id,
                label: label.clone(),
                seed: rng.next_u64(),
            });
        }
    }
    Ok(out)
}

/// In-memory synthetic corpus.
pub fn synth_corpus(task: Task, per_class: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<(ManifestEntry, CwRecording)>> {
    corpus_entries(task, per_class, seed)?
        .into_iter()
        .map(|e| {
            let rec = synth_recording(&e.label, cfg, e.seed)?;
            Ok((e, rec))
        })
        .collect()
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Writes every recording plus `manifest.tsv` into `dir`.
pub fn write_corpus(dir: &Path, corpus: &[(ManifestEntry, CwRecording)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (e, rec) in corpus {
        write_recording(&dir.join(&e.path), rec)?;
    }
    let entries: Vec<ManifestEntry> = corpus.iter().map(|(e, _)| e.clone()).collect();
    write_corpus_manifest(&dir.join(MANIFEST_NAME), &entries)
}

pub fn read_corpus(dir: &Path) -> Result<Vec<(ManifestEntry, CwRecording)>> {
    read_corpus_manifest(&dir.join(MANIFEST_NAME))?
        .into_iter()
        .map(|e| {
            let rec = read_recording(&dir.join(&e.path))?;
            Ok((e, rec))
        })
        .collect()
}

/// Class list of a corpus: the activity set when every label is an
/// activity, the distractor set when every label is a distractor.
pub fn infer_classes(labels: &[&str]) -> Result<Vec<String>> {
    if labels.iter().all(|l| l.parse::<Activity>().is_ok()) {
        Ok(Task::Activity.classes())
    } else if labels.iter().all(|l| l.parse::<Distractor>().is_ok()) {
        Ok(Task::Distractor.classes())
    } else {
        let mut c: Vec<String> = labels.iter().map(|s| s.to_string()).collect();
        c.sort();
        c.dedup();
        Ok(c)
    }
}

/// Dataset of a synthesized or loaded corpus.
pub fn corpus_dataset(corpus: &[(ManifestEntry, CwRecording)], raster: &RasterConfig) -> Result<Dataset> {
    let labels: Vec<&str> = corpus.iter().map(|(e, _)| e.label.as_str()).collect();
    let classes = infer_classes(&labels)?;
    let recs: Vec<(String, CwRecording)> = corpus.iter().map(|(e, r)| (e.id.clone(), r.clone())).collect();
    Dataset::from_recordings(classes, &recs, None, raster)
}

/// Nearest-centroid classification of flattened maps; returns the
/// confusion matrix `[truth][prediction]` over `test`.
pub fn nearest_centroid(maps: &[Tensor], labels: &[usize], classes: usize, train: &[usize], test: &[usize]) -> Vec<Vec<usize>> {
    let dim = maps[0].numel();
    let mut centroids = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for &i in train {
        counts[labels[i]] += 1;
        for (c, v) in centroids[labels[i]].iter_mut().zip(maps[i].data()) {
            *c += v;
        }
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= (*n).max(1) as f64);
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for &i in test {
        let mut best = (0, f64::INFINITY);
        for (k, c) in centroids.iter().enumerate() {
            let d: f64 = c.iter().zip(maps[i].data()).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        confusion[labels[i]][best.0] += 1;
    }
    confusion
}
