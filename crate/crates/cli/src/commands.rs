use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use selafd::checkpoint::{Checkpoint, Dtype};
use selafd::config::{env_seed, ConfigFile, RunConfig};
use selafd::dataset::{self, corpus_dataset, read_corpus, write_corpus, Dataset, DatasetSplit, MANIFEST_NAME};
use selafd::eval::{self, fall_recall, predictions_csv};
use selafd::manifest::{hash_path, RunManifest};
use selafd::model::Model;
use selafd::params::ParamStore;
use selafd::radar::{self, IngestConfig, IngestFormat, RasterConfig, RasterNorm, StftParams, SynthConfig};
use selafd::vit::VitConfig;
use selafd::Error;

use crate::{AblateArgs, EvalArgs, ExportAttnArgs, ModelArgs, SpectrogramArgs, SynthArgs, TrainArgs};

pub const CHECKPOINT_NAME: &str = "model.ckpt";
pub const TRAIN_LOG_NAME: &str = "train_log.txt";
pub const REPORT_NAME: &str = "report.txt";
pub const PREDICTIONS_NAME: &str = "predictions.csv";
pub const SPECTROGRAMS_NAME: &str = "spectrograms.ckpt";
pub const DEFAULT_SEED: u64 = 0;

/// 2 for usage, configuration and input errors, 3 for file errors, 4 for
/// numerical aborts.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Io { .. } | Error::Format { .. } => 3,
                Error::Numerical { .. } => 4,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))?;
    Ok(())
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(io_err(path, std::io::Error::new(std::io::ErrorKind::NotFound, format!("{what} not found"))).into());
    }
    Ok(())
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

/// Flag, then file, then `SELAFD_SEED`, then the default.
fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<(u64, &'static str)> {
    if let Some(s) = flag {
        return Ok((s, "flag"));
    }
    if let Some(s) = file {
        return Ok((s, "config"));
    }
    if let Some(s) = env_seed()? {
        return Ok((s, "env"));
    }
    Ok((DEFAULT_SEED, "default"))
}

struct Resolved {
    rc: RunConfig,
    notes: Vec<String>,
    config_hash: Option<(String, String)>,
    split_seed_set: bool,
}

fn resolve(args: &ModelArgs) -> Result<Resolved> {
    let mut rc = RunConfig::default();
    let mut notes = Vec::new();
    if args.tiny {
        rc.vit = VitConfig::tiny();
    }
    let mut file_seed = None;
    let mut split_seed_set = false;
    let mut config_hash = None;
    match &args.config {
        Some(path) => {
            require(path, "config file")?;
            let file = ConfigFile::load(path)?;
            if rc.apply_file(&file)? {
                file_seed = Some(rc.train.seed);
            }
            split_seed_set = file.raw("data", "split_seed").is_some();
            config_hash = Some((display(path), hash_path(path)?));
        }
        None => notes.push("no config file; defaults used".to_string()),
    }
    if args.tiny {
        rc.vit = VitConfig::tiny().with_classes(rc.vit.num_classes);
    } else if args.base {
        rc.vit = VitConfig::vit_b16().with_classes(rc.vit.num_classes);
    }
    let (seed, origin) = resolve_seed(args.seed, file_seed)?;
    rc.train.seed = seed;
    notes.push(format!("seed from {origin}"));
    if !split_seed_set {
        rc.split_seed = seed;
    }
    if let Some(v) = args.epochs {
        rc.train.epochs = v;
    }
    if let Some(v) = args.lr {
        rc.train.lr = v;
    }
    if let Some(v) = args.batch_size {
        rc.train.batch_size = v;
    }
    if let Some(v) = args.rank {
        rc.peft.rank = v;
    }
    if args.deterministic_timing {
        rc.train.deterministic_timing = true;
    }
    Ok(Resolved {
        rc,
        notes,
        config_hash,
        split_seed_set,
    })
}

fn manifest(command: &str, r: &Resolved) -> RunManifest {
    let mut m = RunManifest::new(command, r.rc.train.seed);
    m.config = r.rc.echo();
    m.notes = r.notes.clone();
    if let Some(h) = &r.config_hash {
        m.inputs.push(h.clone());
    }
    m
}

fn raster_for(vit: &VitConfig, mean: f64, std: f64) -> RasterConfig {
    RasterConfig {
        out_size: vit.image_size,
        channels: vit.channels,
        norm: RasterNorm::Standardize { mean, std },
    }
}

fn load_dataset(corpus: &Path, raster: &RasterConfig) -> Result<Dataset> {
    require(&corpus.join(MANIFEST_NAME), "corpus manifest")?;
    let entries = read_corpus(corpus)?;
    let data = corpus_dataset(&entries, raster)?;
    log::info!("loaded {} samples over {} classes", data.len(), data.classes.len());
    Ok(data)
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let per_class = a.per_class as usize;
    let (seed, origin) = resolve_seed(a.seed, None)?;
    let cfg = SynthConfig {
        duration_s: a.duration_s,
        sample_rate: a.sample_rate,
        snr_db: Some(a.snr_db),
    };
    let corpus = dataset::synth_corpus(a.task, per_class, seed, &cfg)?;
    create_dir(&a.out)?;
    write_corpus(&a.out, &corpus)?;
    let mut m = RunManifest::new("synth", seed);
    m.config = vec![
        ("task".into(), a.task.name().into()),
        ("per_class".into(), per_class.to_string()),
        ("snr_db".into(), a.snr_db.to_string()),
        ("duration_s".into(), a.duration_s.to_string()),
        ("sample_rate".into(), a.sample_rate.to_string()),
    ];
    m.notes.push(format!("seed from {origin}"));
    m.outputs.push(display(&a.out.join(MANIFEST_NAME)));
    m.outputs.extend(corpus.iter().map(|(e, _)| display(&a.out.join(&e.path))));
    m.write(&a.out)?;
    println!("wrote {} recordings to {}", corpus.len(), a.out.display());
    Ok(())
}

fn ingest_config(path: &Path) -> Result<IngestConfig> {
    let file = ConfigFile::load(path)?;
    for (s, k) in file.keys() {
        let known = s == "ingest"
            && (matches!(k, "format" | "header_lines" | "sample_rate" | "extension" | "expect_full_corpus") || k.starts_with("label."));
        if !known {
            return Err(Error::Config(format!("unknown ingest key [{s}] {k}")).into());
        }
    }
    let mut cfg = match file.raw("ingest", "format").unwrap_or("native") {
        "native" => IngestConfig::default(),
        "text" => {
            let fs: f64 = file.get("ingest", "sample_rate")?.unwrap_or(SynthConfig::default().sample_rate);
            let mut c = IngestConfig::uog_text(fs);
            if let Some(h) = file.get("ingest", "header_lines")? {
                c.format = IngestFormat::TextIq {
                    header_lines: h,
                    sample_rate: fs,
                };
            }
            c
        }
        other => return Err(Error::Config(format!("unknown ingest format `{other}` (native, text)")).into()),
    };
    if let Some(ext) = file.raw("ingest", "extension") {
        cfg.extension = if ext == "*" { None } else { Some(ext.to_string()) };
    }
    if let Some(v) = file.get("ingest", "expect_full_corpus")? {
        cfg.expect_full_corpus = v;
    }
    let labels: Vec<(String, String)> = file
        .keys()
        .filter_map(|(_, k)| k.strip_prefix("label.").map(|sub| (sub.to_string(), k.to_string())))
        .map(|(sub, k)| (sub, file.raw("ingest", &k).unwrap_or_default().to_string()))
        .collect();
    if !labels.is_empty() {
        cfg.label_map = labels;
    }
    Ok(cfg)
}

pub fn spectrogram(a: SpectrogramArgs) -> Result<()> {
    let mut m = RunManifest::new("spectrogram", 0);
    m.inputs.push((display(&a.input), hash_path(&a.input)?));
    let recordings: Vec<(String, radar::CwRecording)> = match &a.ingest_config {
        None => {
            require(&a.input.join(MANIFEST_NAME), "corpus manifest")?;
            read_corpus(&a.input)?.into_iter().map(|(e, r)| (e.id, r)).collect()
        }
        Some(path) => {
            m.inputs.push((display(path), hash_path(path)?));
            let cfg = ingest_config(path)?;
            let report = radar::ingest_uog(&a.input, &cfg)?;
            create_dir(&a.out)?;
            if !report.skipped.is_empty() {
                let skip = a.out.join("skipped.tsv");
                write_text(&skip, &report.skip_manifest())?;
                m.outputs.push(display(&skip));
                m.notes.push(format!("{} files skipped", report.skipped.len()));
            }
            report.recordings.into_iter().map(|r| (r.source_id.clone(), r)).collect()
        }
    };
    create_dir(&a.out)?;
    let mut store = ParamStore::new();
    let mut ck_meta = Vec::new();
    let mut params = None;
    for (id, rec) in &recordings {
        let p = StftParams::for_sample_rate(rec.sample_rate);
        let sp = radar::stft(rec, &p)?;
        if a.pgm {
            let pgm = a.out.join(format!("{id}.pgm"));
            radar::write_pgm(&pgm, &sp.td)?;
            m.outputs.push(display(&pgm));
        }
        ck_meta.push((format!("label.{id}"), rec.label.clone()));
        store.insert(format!("td/{id}"), sp.td.with_requires_grad(false));
        params = Some(p);
    }
    let mut ck = Checkpoint::new(store).with_meta("count", recordings.len());
    if let Some(p) = params {
        ck = ck
            .with_meta("stft.window_len", p.window_len)
            .with_meta("stft.hop", p.hop)
            .with_meta("stft.fft_len", p.fft_len)
            .with_meta("stft.dynamic_range_db", p.dynamic_range_db);
        m.config = vec![
            ("window_len".into(), p.window_len.to_string()),
            ("hop".into(), p.hop.to_string()),
            ("fft_len".into(), p.fft_len.to_string()),
            ("dynamic_range_db".into(), p.dynamic_range_db.to_string()),
        ];
    }
    for (k, v) in ck_meta {
        ck = ck.with_meta(&k, v);
    }
    let path = a.out.join(SPECTROGRAMS_NAME);
    ck.save(&path, Dtype::F64)?;
    m.outputs.insert(0, display(&path));
    m.write(&a.out)?;
    println!("wrote {} Time-Doppler maps to {}", recordings.len(), path.display());
    Ok(())
}

fn split_for(data: &Dataset, ratio: f64, seed: u64) -> Result<DatasetSplit> {
    Ok(dataset::split(&data.labels(), ratio, seed)?)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let r = resolve(&a.model)?;
    let rc = &r.rc;
    let mut m = manifest("train", &r);
    m.config.push(("mode".into(), a.mode.name().into()));
    let base = match &a.base_checkpoint {
        Some(path) => {
            require(path, "base checkpoint")?;
            m.inputs.push((display(path), hash_path(path)?));
            Some(Model::load(path).with_context(|| format!("loading base checkpoint {}", path.display()))?)
        }
        None => {
            m.notes.push("no base checkpoint; backbone freshly initialized".into());
            None
        }
    };
    let vit = base.as_ref().map_or(rc.vit, |b| b.vit);
    let data = load_dataset(&a.corpus, &raster_for(&vit, rc.raster_mean, rc.raster_std))?;
    m.inputs.push((display(&a.corpus), hash_path(&a.corpus)?));
    rc.validate()?;
    let model = match &base {
        Some(b) => Model::wrap(b, a.mode, rc.peft.clone(), data.classes.len(), rc.train.seed)?,
        None => Model::init(vit.with_classes(data.classes.len()), a.mode, rc.peft.clone(), rc.train.seed)?,
    };
    let split = split_for(&data, rc.split_ratio, rc.split_seed)?;
    let outcome = selafd::train::train(model, &data, &split, &rc.train)?;

    create_dir(&a.out)?;
    let ck_path = a.out.join(CHECKPOINT_NAME);
    outcome
        .best
        .to_checkpoint()
        .with_meta("split.seed", split.seed)
        .with_meta("split.ratio", split.ratio)
        .with_meta("split.hash", split.hash())
        .with_meta("data.raster_mean", rc.raster_mean)
        .with_meta("data.raster_std", rc.raster_std)
        .with_meta("train.best_epoch", outcome.best_epoch)
        .save(&ck_path, Dtype::F64)?;
    let log_path = a.out.join(TRAIN_LOG_NAME);
    write_text(&log_path, &outcome.log.to_text())?;
    m.outputs.extend([display(&ck_path), display(&log_path)]);
    m.notes.push(format!("checkpoint is the best-by-test epoch {}", outcome.best_epoch));
    if r.split_seed_set {
        m.notes.push("split seed from config".into());
    }
    m.write(&a.out)?;
    let count = outcome.best.count_trainable();
    println!(
        "mode={} best_epoch={} test_acc={:.4} trainable={} total={}",
        a.mode,
        outcome.best_epoch,
        outcome.best_test_acc,
        count.trainable,
        count.total
    );
    Ok(())
}

/// Model plus the split and raster settings stored alongside it.
fn load_trained(path: &Path, rc: &RunConfig) -> Result<(Model, f64, u64, f64, f64)> {
    require(path, "checkpoint")?;
    let ck = Checkpoint::load(path)?;
    let model = Model::from_checkpoint(&ck)?;
    let ratio = ck.meta_value("split.ratio").unwrap_or(rc.split_ratio);
    let seed = ck.meta_value("split.seed").unwrap_or(rc.split_seed);
    let mean = ck.meta_value("data.raster_mean").unwrap_or(rc.raster_mean);
    let std = ck.meta_value("data.raster_std").unwrap_or(rc.raster_std);
    Ok((model, ratio, seed, mean, std))
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let r = resolve(&a.model)?;
    let mut m = manifest("eval", &r);
    let (model, ratio, seed, mean, std) = load_trained(&a.checkpoint, &r.rc)?;
    m.inputs.push((display(&a.checkpoint), hash_path(&a.checkpoint)?));
    let data = load_dataset(&a.corpus, &raster_for(&model.vit, mean, std))?;
    m.inputs.push((display(&a.corpus), hash_path(&a.corpus)?));
    let split = split_for(&data, ratio, seed)?;
    let (report, preds) = eval::evaluate(&model, &split, &data)?;

    create_dir(&a.out)?;
    let report_path = a.out.join(REPORT_NAME);
    let preds_path = a.out.join(PREDICTIONS_NAME);
    write_text(&report_path, &report.to_text())?;
    write_text(&preds_path, &predictions_csv(&data.classes, &preds))?;
    m.config.push(("split_seed_used".into(), seed.to_string()));
    m.config.push(("split_ratio_used".into(), ratio.to_string()));
    m.outputs.extend([display(&report_path), display(&preds_path)]);
    m.write(&a.out)?;
    let fall = fall_recall(&report).map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!("accuracy={:.4} fall_recall={fall} test={}", report.accuracy, report.test_count());
    Ok(())
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let r = resolve(&a.model)?;
    let rc = &r.rc;
    let mut m = manifest("ablate", &r);
    require(&a.base_checkpoint, "base checkpoint")?;
    let base = Model::load(&a.base_checkpoint)?;
    m.inputs.push((display(&a.base_checkpoint), hash_path(&a.base_checkpoint)?));
    let data = load_dataset(&a.corpus, &raster_for(&base.vit, rc.raster_mean, rc.raster_std))?;
    m.inputs.push((display(&a.corpus), hash_path(&a.corpus)?));
    rc.train.validate()?;
    rc.peft.validate(base.vit.embed_dim)?;
    let split = split_for(&data, rc.split_ratio, rc.split_seed)?;
    let table = eval::ablate(&base, &data, &split, &rc.train, &rc.peft);

    create_dir(&a.out)?;
    let text_path = a.out.join("ablation.txt");
    let table_path = a.out.join("ablation_table.txt");
    write_text(&text_path, &table.to_text())?;
    write_text(&table_path, &table.to_table())?;
    m.outputs.extend([display(&text_path), display(&table_path)]);
    for run in &table.runs {
        let Ok((outcome, report, preds)) = &run.result else {
            m.notes.push(format!("mode {} failed", run.mode));
            continue;
        };
        let dir = a.out.join(run.mode.name());
        create_dir(&dir)?;
        let files: [(PathBuf, String); 3] = [
            (dir.join(REPORT_NAME), report.to_text()),
            (dir.join(PREDICTIONS_NAME), predictions_csv(&data.classes, preds)),
            (dir.join(TRAIN_LOG_NAME), outcome.log.to_text()),
        ];
        for (path, text) in &files {
            write_text(path, text)?;
            m.outputs.push(display(path));
        }
        let ck_path = dir.join(CHECKPOINT_NAME);
        outcome
            .best
            .to_checkpoint()
            .with_meta("split.seed", split.seed)
            .with_meta("split.ratio", split.ratio)
            .with_meta("split.hash", split.hash())
            .with_meta("data.raster_mean", rc.raster_mean)
            .with_meta("data.raster_std", rc.raster_std)
            .with_meta("train.best_epoch", outcome.best_epoch)
            .save(&ck_path, Dtype::F64)?;
        m.outputs.push(display(&ck_path));
    }
    m.write(&a.out)?;
    print!("{}", table.to_table());
    Ok(())
}

pub fn export_attn(a: ExportAttnArgs) -> Result<()> {
    let r = resolve(&a.model)?;
    let mut m = manifest("export-attn", &r);
    let (model, _, _, mean, std) = load_trained(&a.checkpoint, &r.rc)?;
    m.inputs.push((display(&a.checkpoint), hash_path(&a.checkpoint)?));
    let data = load_dataset(&a.corpus, &raster_for(&model.vit, mean, std))?;
    m.inputs.push((display(&a.corpus), hash_path(&a.corpus)?));
    let layer = a.layer.unwrap_or(model.vit.depth.saturating_sub(1));
    let view = match a.head {
        Some(h) => format!("layer {layer}, head {h}"),
        None => format!("layer {layer}, mean over heads"),
    };
    m.config.push(("view".into(), view));
    create_dir(&a.out)?;
    let mut written = 0;
    for (c, class) in data.classes.iter().enumerate() {
        for s in data.samples.iter().filter(|s| s.label == c).take(a.per_class as usize) {
            let set = eval::extract_attention(&model, &s.image)?;
            let map = set.map(layer, a.head)?;
            let path = a.out.join(format!("attn_{class}_{}.pgm", s.id));
            radar::write_pgm(&path, &map.upsampled)?;
            m.outputs.push(display(&path));
            written += 1;
        }
    }
    m.write(&a.out)?;
    println!("wrote {written} attention maps to {}", a.out.display());
    Ok(())
}
