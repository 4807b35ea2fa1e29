//! Continuous-wave radar baseband, Time-Doppler maps and model images.

mod io;
mod raster;
mod stft;
mod synth;

use std::fmt;
use std::str::FromStr;

pub use rustfft::num_complex::Complex64;

pub use io::{
    ingest_uog, read_corpus_manifest, read_recording, recording_from_bytes, recording_to_bytes, write_corpus_manifest,
    write_pgm, write_recording, IngestConfig, IngestFormat, IngestReport, ManifestEntry, EXPECTED_UOG_COUNT,
};
pub use raster::{rasterize, resize_bilinear, RasterConfig, RasterNorm};
pub use stft::{hann, stft, stft_frames, StftParams, DB_EPS, DEFAULT_DYNAMIC_RANGE_DB};
pub use synth::{synth_activity, synth_distractor, synth_recording, tracks_for, Distractor, SynthConfig, Track, MIN_DURATION_S};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The six activity classes, in class-index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Activity {
    Walking,
    Sitting,
    Standing,
    Drinking,
    PickingUp,
    Falling,
}

impl Activity {
    pub const ALL: [Activity; 6] = [
        Activity::Walking,
        Activity::Sitting,
        Activity::Standing,
        Activity::Drinking,
        Activity::PickingUp,
        Activity::Falling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Activity::Walking => "walking",
            Activity::Sitting => "sitting",
            Activity::Standing => "standing",
            Activity::Drinking => "drinking",
            Activity::PickingUp => "picking_up",
            Activity::Falling => "falling",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn names() -> Vec<String> {
        Activity::ALL.iter().map(|a| a.name().to_string()).collect()
    }
}

impl fmt::Display for Activity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Activity::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown activity label `{s}`")))
    }
}

/// Complex baseband samples of one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct CwRecording {
    pub samples: Vec<Complex64>,
    pub sample_rate: f64,
    pub label: String,
    pub source_id: String,
}

impl CwRecording {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(Error::Input(format!("sample rate {} must be positive", self.sample_rate)));
        }
        if self.samples.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Input(format!("recording `{}` has non-finite samples", self.source_id)));
        }
        Ok(())
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }

    pub fn conjugate(&self) -> CwRecording {
        CwRecording {
            samples: self.samples.iter().map(|z| z.conj()).collect(),
            ..self.clone()
        }
    }
}

/// A Time-Doppler map in dB, rows ascending in Doppler from `-fs/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramSample {
    /// `[fft_len, frames]`.
    pub td: Tensor,
    pub label: String,
    pub params: StftParams,
    pub sample_rate: f64,
    pub source_id: String,
}

impl SpectrogramSample {
    pub fn freq_bins(&self) -> usize {
        self.td.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.td.shape()[1]
    }

    /// Doppler frequency of row `i` in Hz.
    pub fn doppler_hz(&self, row: usize) -> f64 {
        let n = self.freq_bins() as f64;
        (row as f64 - (n / 2.0).floor()) * self.sample_rate / n
    }

    /// Row holding Doppler frequency `hz`, rounded to the nearest bin.
    pub fn row_of(&self, hz: f64) -> usize {
        let n = self.freq_bins() as f64;
        let r = (hz * n / self.sample_rate).round() + (n / 2.0).floor();
        r.rem_euclid(n) as usize
    }
}
