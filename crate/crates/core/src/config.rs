//! Flat `key = value` configuration files with `[section]` headers, and the
//! resolved run configuration built from them.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::peft::{LoraTarget, PeftConfig};
use crate::radar::{RasterConfig, RasterNorm, SynthConfig};
use crate::train::TrainConfig;
use crate::vit::VitConfig;

pub const SEED_ENV: &str = "SELAFD_SEED";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl ConfigFile {
    /// Keys before the first header land in section `""`. `#` and `;` start
    /// comment lines.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut out = ConfigFile::default();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(origin, format!("line {}: expected key = value", n + 1)))?;
            out.sections
                .entry(section.clone())
                .or_default()
                .insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ConfigFile::parse(&text, path)
    }

    pub fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        match self.raw(section, key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("[{section}] {key} = `{v}` is not valid"))),
        }
    }

    /// Every `(section, key)` pair, for rejecting unknown keys.
    pub fn keys(&self) -> impl Iterator<Item = (&str, &str)> {
        self.sections
            .iter()
            .flat_map(|(s, kv)| kv.keys().map(move |k| (s.as_str(), k.as_str())))
    }
}

/// Everything a training-style command needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub peft: PeftConfig,
    pub vit: VitConfig,
    pub split_ratio: f64,
    pub split_seed: u64,
    pub raster_mean: f64,
    pub raster_std: f64,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            peft: PeftConfig::default(),
            vit: VitConfig::vit_b16(),
            split_ratio: 0.8,
            split_seed: 0,
            raster_mean: 0.5,
            raster_std: 0.5,
            synth: SynthConfig::default(),
        }
    }
}

const KNOWN: &[(&str, &str)] = &[
    ("train", "lr"),
    ("train", "batch_size"),
    ("train", "epochs"),
    ("train", "beta1"),
    ("train", "beta2"),
    ("train", "adam_eps"),
    ("train", "eta_min"),
    ("train", "seed"),
    ("train", "eval_every"),
    ("train", "deterministic_timing"),
    ("peft", "rank"),
    ("peft", "bottleneck_ratio"),
    ("peft", "scale"),
    ("peft", "targets"),
    ("model", "preset"),
    ("model", "image_size"),
    ("model", "patch_size"),
    ("model", "embed_dim"),
    ("model", "depth"),
    ("model", "heads"),
    ("model", "mlp_ratio"),
    ("model", "channels"),
    ("data", "split_ratio"),
    ("data", "split_seed"),
    ("data", "raster_mean"),
    ("data", "raster_std"),
    ("data", "duration_s"),
    ("data", "sample_rate"),
    ("data", "snr_db"),
];

fn set<T: FromStr>(file: &ConfigFile, section: &str, key: &str, slot: &mut T) -> Result<bool> {
    match file.get(section, key)? {
        Some(v) => {
            *slot = v;
            Ok(true)
        }
        None => Ok(false),
    }
}

impl RunConfig {
    /// Applies file values on top of `self`. Returns whether the file set
    /// the training seed.
    pub fn apply_file(&mut self, file: &ConfigFile) -> Result<bool> {
        if let Some((s, k)) = file.keys().find(|sk| !KNOWN.contains(sk)) {
            return Err(Error::Config(format!("unknown config key [{s}] {k}")));
        }
        if let Some(preset) = file.raw("model", "preset") {
            self.vit = match preset {
                "tiny" => VitConfig::tiny(),
                "base" | "vit_b16" => VitConfig::vit_b16(),
                other => return Err(Error::Config(format!("unknown model preset `{other}`"))),
            }
            .with_classes(self.vit.num_classes);
        }
        let t = &mut self.train;
        set(file, "train", "lr", &mut t.lr)?;
        set(file, "train", "batch_size", &mut t.batch_size)?;
        set(file, "train", "epochs", &mut t.epochs)?;
        set(file, "train", "beta1", &mut t.beta1)?;
        set(file, "train", "beta2", &mut t.beta2)?;
        set(file, "train", "adam_eps", &mut t.adam_eps)?;
        set(file, "train", "eta_min", &mut t.eta_min)?;
        let seeded = set(file, "train", "seed", &mut t.seed)?;
        set(file, "train", "eval_every", &mut t.eval_every)?;
        set(file, "train", "deterministic_timing", &mut t.deterministic_timing)?;
        let p = &mut self.peft;
        set(file, "peft", "rank", &mut p.rank)?;
        set(file, "peft", "bottleneck_ratio", &mut p.bottleneck_ratio)?;
        set(file, "peft", "scale", &mut p.scale)?;
        if let Some(list) = file.raw("peft", "targets") {
            p.targets = parse_targets(list)?;
        }
        let v = &mut self.vit;
        set(file, "model", "image_size", &mut v.image_size)?;
        set(file, "model", "patch_size", &mut v.patch_size)?;
        set(file, "model", "embed_dim", &mut v.embed_dim)?;
        set(file, "model", "depth", &mut v.depth)?;
        set(file, "model", "heads", &mut v.heads)?;
        set(file, "model", "mlp_ratio", &mut v.mlp_ratio)?;
        set(file, "model", "channels", &mut v.channels)?;
        set(file, "data", "split_ratio", &mut self.split_ratio)?;
        set(file, "data", "split_seed", &mut self.split_seed)?;
        set(file, "data", "raster_mean", &mut self.raster_mean)?;
        set(file, "data", "raster_std", &mut self.raster_std)?;
        set(file, "data", "duration_s", &mut self.synth.duration_s)?;
        set(file, "data", "sample_rate", &mut self.synth.sample_rate)?;
        if let Some(snr) = file.get::<f64>("data", "snr_db")? {
            self.synth.snr_db = Some(snr);
        }
        Ok(seeded)
    }

    pub fn raster(&self) -> RasterConfig {
        RasterConfig {
            out_size: self.vit.image_size,
            channels: self.vit.channels,
            norm: RasterNorm::Standardize {
                mean: self.raster_mean,
                std: self.raster_std,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.vit.validate()?;
        self.peft.validate(self.vit.embed_dim)?;
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!("split ratio {} outside (0, 1)", self.split_ratio)));
        }
        Ok(())
    }

    /// Resolved values as `key=value` pairs.
    pub fn echo(&self) -> Vec<(String, String)> {
        let t = &self.train;
        let v = &self.vit;
        let p = &self.peft;
        [
            ("lr", format!("{}", t.lr)),
            ("batch", t.batch_size.to_string()),
            ("epochs", t.epochs.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("adam_eps", format!("{:e}", t.adam_eps)),
            ("eta_min", t.eta_min.to_string()),
            ("seed", t.seed.to_string()),
            ("eval_every", t.eval_every.to_string()),
            ("s", p.scale.to_string()),
            ("ratio", p.bottleneck_ratio.to_string()),
            ("rank", p.rank.to_string()),
            ("targets", p.targets_string()),
            ("image_size", v.image_size.to_string()),
            ("patch_size", v.patch_size.to_string()),
            ("embed_dim", v.embed_dim.to_string()),
            ("depth", v.depth.to_string()),
            ("heads", v.heads.to_string()),
            ("mlp_ratio", v.mlp_ratio.to_string()),
            ("channels", v.channels.to_string()),
            ("split_ratio", self.split_ratio.to_string()),
            ("split_seed", self.split_seed.to_string()),
            ("raster_mean", self.raster_mean.to_string()),
            ("raster_std", self.raster_std.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

pub fn parse_targets(list: &str) -> Result<Vec<LoraTarget>> {
    let mut out: Vec<LoraTarget> = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

/// Seed from the environment fallback, if set and valid.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}
