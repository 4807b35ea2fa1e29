//! Recording files, corpus manifests, graymap export and raw-data ingestion.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Complex64, CwRecording};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RECORDING_MAGIC: &str = "SELAFD-REC 1";

/// Size of the public six-activity corpus.
pub const EXPECTED_UOG_COUNT: usize = 1753;

pub fn recording_to_bytes(rec: &CwRecording) -> Result<Vec<u8>> {
    if rec.label.contains('\n') || rec.source_id.contains('\n') {
        return Err(Error::Input("recording label and source id must be single-line".into()));
    }
    let mut header = String::new();
    let _ = writeln!(header, "{RECORDING_MAGIC}");
    let _ = writeln!(header, "sample_rate={}", rec.sample_rate);
    let _ = writeln!(header, "label={}", rec.label);
    let _ = writeln!(header, "length={}", rec.samples.len());
    let _ = writeln!(header, "source_id={}", rec.source_id);
    header.push('\n');
    let mut out = header.into_bytes();
    out.reserve(rec.samples.len() * 16);
    for z in &rec.samples {
        out.extend_from_slice(&z.re.to_le_bytes());
        out.extend_from_slice(&z.im.to_le_bytes());
    }
    Ok(out)
}

pub fn recording_from_bytes(bytes: &[u8], origin: &Path) -> Result<CwRecording> {
    let bad = |reason: String| Error::format(origin, reason);
    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| bad("header is not terminated by a blank line".into()))?;
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some(RECORDING_MAGIC) {
        return Err(bad(format!("missing `{RECORDING_MAGIC}` magic")));
    }
    let (mut rate, mut label, mut length, mut source) = (None, None, None, None);
    for line in lines {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("bad header line `{line}`")))?;
        match k {
            "sample_rate" => rate = Some(v.parse::<f64>().map_err(|_| bad(format!("bad sample_rate `{v}`")))?),
            "label" => label = Some(v.to_string()),
            "length" => length = Some(v.parse::<usize>().map_err(|_| bad(format!("bad length `{v}`")))?),
            "source_id" => source = Some(v.to_string()),
            _ => {}
        }
    }
    let rate = rate.ok_or_else(|| bad("missing sample_rate".into()))?;
    let label = label.ok_or_else(|| bad("missing label".into()))?;
    let length = length.ok_or_else(|| bad("missing length".into()))?;
    let payload = &bytes[split + 2..];
    if payload.len() != length * 16 {
        return Err(bad(format!("expected {} payload bytes, found {}", length * 16, payload.len())));
    }
    let samples = payload
        .chunks_exact(16)
        .map(|c| {
            Complex64::new(
                f64::from_le_bytes(c[..8].try_into().unwrap()),
                f64::from_le_bytes(c[8..].try_into().unwrap()),
            )
        })
        .collect();
    let rec = CwRecording {
        samples,
        sample_rate: rate,
        label,
        source_id: source.unwrap_or_else(|| origin.display().to_string()),
    };
    rec.validate().map_err(|e| bad(e.to_string()))?;
    Ok(rec)
}

pub fn write_recording(path: &Path, rec: &CwRecording) -> Result<()> {
    fs::write(path, recording_to_bytes(rec)?).map_err(|e| Error::io(path, e))
}

pub fn read_recording(path: &Path) -> Result<CwRecording> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    recording_from_bytes(&bytes, path)
}

/// One corpus manifest record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub label: String,
    /// Relative to the manifest's directory.
    pub path: String,
    pub seed: u64,
}

/// Tab-separated `id label path seed`, one record per line.
pub fn write_corpus_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut s = String::from("# id\tlabel\tpath\tseed\n");
    for e in entries {
        for field in [&e.id, &e.label, &e.path] {
            if field.contains(['\t', '\n']) {
                return Err(Error::Input(format!("manifest field `{field}` contains a tab or newline")));
            }
        }
        let _ = writeln!(s, "{}\t{}\t{}\t{}", e.id, e.label, e.path, e.seed);
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_corpus_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(Error::format(path, format!("line {}: expected 4 fields", n + 1)));
        }
        let seed = f[3]
            .parse()
            .map_err(|_| Error::format(path, format!("line {}: bad seed `{}`", n + 1, f[3])))?;
        out.push(ManifestEntry {
            id: f[0].into(),
            label: f[1].into(),
            path: f[2].into(),
            seed,
        });
    }
    Ok(out)
}

/// Binary graymap (P5, maxval 255) of a `[rows, cols]` map or the first
/// channel of a `[C, H, W]` image, min-max scaled.
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let (rows, cols) = match image.shape() {
        [r, c] => (*r, *c),
        [_, h, w] => (*h, *w),
        other => {
            return Err(Error::Shape {
                shape: other.to_vec(),
                reason: "graymap export needs a 2-D map or [C, H, W] image".into(),
            })
        }
    };
    let plane = &image.data()[..rows * cols];
    let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(plane.iter().map(|&v| {
        if range > 0.0 && range.is_finite() {
            ((v - lo) / range * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Raw file layouts understood by [`ingest_uog`].
#[derive(Debug, Clone, PartialEq)]
pub enum IngestFormat {
    /// `SELAFD-REC 1` files.
    Native,
    /// `header_lines` ignored lines, then one complex sample per line as
    /// `a+bi`, `a-bi`, `a,b` or `a b`.
    TextIq { header_lines: usize, sample_rate: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestConfig {
    pub format: IngestFormat,
    /// Only files with this extension are read; `None` reads every file.
    pub extension: Option<String>,
    /// `(substring, label)`: the first substring found in a file name names
    /// its label. Native files fall back to their header label.
    pub label_map: Vec<(String, String)>,
    /// Warn when the ingested count differs from [`EXPECTED_UOG_COUNT`].
    pub expect_full_corpus: bool,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            format: IngestFormat::Native,
            extension: Some("rec".into()),
            label_map: Vec::new(),
            expect_full_corpus: false,
        }
    }
}

impl IngestConfig {
    /// Text layout with activity codes `A01`..`A06` in file names.
    pub fn uog_text(sample_rate: f64) -> Self {
        let codes = ["walking", "sitting", "standing", "drinking", "picking_up", "falling"];
        IngestConfig {
            format: IngestFormat::TextIq {
                header_lines: 4,
                sample_rate,
            },
            extension: Some("dat".into()),
            label_map: codes
                .iter()
                .enumerate()
                .map(|(i, l)| (format!("A{:02}", i + 1), l.to_string()))
                .collect(),
            expect_full_corpus: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub recordings: Vec<CwRecording>,
    /// Files that could not be read, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

impl IngestReport {
    pub fn skip_manifest(&self) -> String {
        self.skipped
            .iter()
            .map(|(p, r)| format!("{}\t{}\n", p.display(), r.replace('\n', " ")))
            .collect()
    }
}

fn parse_complex(token: &str) -> Option<Complex64> {
    let t = token.trim();
    if let Some((a, b)) = t.split_once(',').or_else(|| t.split_once(char::is_whitespace)) {
        return Some(Complex64::new(a.trim().parse().ok()?, b.trim().parse().ok()?));
    }
    let body = t.strip_suffix(['i', 'j'])?;
    let bytes = body.as_bytes();
    let cut = (1..bytes.len())
        .rev()
        .find(|&k| (bytes[k] == b'+' || bytes[k] == b'-') && !matches!(bytes[k - 1], b'e' | b'E'))?;
    let re: f64 = body[..cut].parse().ok()?;
    let im_str = &body[cut..];
    let im: f64 = match im_str {
        "+" => 1.0,
        "-" => -1.0,
        s => s.parse().ok()?,
    };
    Some(Complex64::new(re, im))
}

fn label_from_name(name: &str, map: &[(String, String)]) -> Option<String> {
    map.iter().find(|(k, _)| name.contains(k.as_str())).map(|(_, l)| l.clone())
}

fn ingest_file(path: &Path, cfg: &IngestConfig) -> Result<CwRecording> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    match &cfg.format {
        IngestFormat::Native => {
            let mut rec = read_recording(path)?;
            if let Some(l) = label_from_name(&name, &cfg.label_map) {
                rec.label = l;
            }
            Ok(rec)
        }
        IngestFormat::TextIq {
            header_lines,
            sample_rate,
        } => {
            let label = label_from_name(&name, &cfg.label_map)
                .ok_or_else(|| Error::format(path, "file name matches no label mapping"))?;
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut samples = Vec::new();
            for (n, line) in text.lines().enumerate().skip(*header_lines) {
                if line.trim().is_empty() {
                    continue;
                }
                let z = parse_complex(line)
                    .ok_or_else(|| Error::format(path, format!("line {}: bad sample `{}`", n + 1, line.trim())))?;
                samples.push(z);
            }
            let rec = CwRecording {
                samples,
                sample_rate: *sample_rate,
                label,
                source_id: name,
            };
            rec.validate()?;
            Ok(rec)
        }
    }
}

/// Reads every matching file of `dir` in name order. Unreadable or malformed
/// files are skipped and listed in the report.
pub fn ingest_uog(dir: &Path, cfg: &IngestConfig) -> Result<IngestReport> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .filter(|p| match &cfg.extension {
            Some(ext) => p.extension().is_some_and(|e| e == ext.as_str()),
            None => true,
        })
        .collect();
    paths.sort();
    let mut report = IngestReport::default();
    for p in paths {
        match ingest_file(&p, cfg) {
            Ok(rec) => report.recordings.push(rec),
            Err(e) => {
                log::warn!("skipping {}: {e}", p.display());
                report.skipped.push((p, e.to_string()));
            }
        }
    }
    if cfg.expect_full_corpus && report.recordings.len() != EXPECTED_UOG_COUNT {
        log::warn!(
            "ingested {} recordings; the full corpus has {EXPECTED_UOG_COUNT}",
            report.recordings.len()
        );
    }
    Ok(report)
}
