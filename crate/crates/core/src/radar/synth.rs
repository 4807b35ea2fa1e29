//! Synthetic micro-Doppler returns.
//!
//! Every recording is a sum of point scatterers `a_k(t)·exp(jφ_k(t))` whose
//! phase integrates an instantaneous Doppler track `f_k(t)`, plus complex
//! Gaussian noise at a configured SNR.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Activity, Complex64, CwRecording};
use crate::error::{Error, Result};

/// Shortest duration that fits every activity template.
pub const MIN_DURATION_S: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub duration_s: f64,
    pub sample_rate: f64,
    /// `None` generates a noiseless return.
    pub snr_db: Option<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            duration_s: 3.0,
            sample_rate: 500.0,
            snr_db: Some(10.0),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(Error::Config(format!("sample rate {} must be positive", self.sample_rate)));
        }
        if !(self.duration_s >= MIN_DURATION_S && self.duration_s.is_finite()) {
            return Err(Error::Input(format!(
                "duration {} s is shorter than the {MIN_DURATION_S} s activity template",
                self.duration_s
            )));
        }
        if let Some(snr) = self.snr_db {
            if !snr.is_finite() {
                return Err(Error::Config(format!("SNR {snr} dB is not finite")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        (self.duration_s * self.sample_rate).round() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Amplitude and instantaneous Doppler (Hz) of one scatterer, per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub amp: Vec<f64>,
    pub freq: Vec<f64>,
}

impl Track {
    fn new(n: usize) -> Self {
        Track {
            amp: vec![0.0; n],
            freq: vec![0.0; n],
        }
    }

    fn constant(n: usize, amp: f64) -> Self {
        Track {
            amp: vec![amp; n],
            freq: vec![0.0; n],
        }
    }
}

/// Tasks used to pretrain a backbone before fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Distractor {
    Tone,
    UpChirp,
    DownChirp,
    TwoTone,
}

impl Distractor {
    pub const ALL: [Distractor; 4] = [Distractor::Tone, Distractor::UpChirp, Distractor::DownChirp, Distractor::TwoTone];

    pub fn name(self) -> &'static str {
        match self {
            Distractor::Tone => "tone",
            Distractor::UpChirp => "up_chirp",
            Distractor::DownChirp => "down_chirp",
            Distractor::TwoTone => "two_tone",
        }
    }

    pub fn names() -> Vec<String> {
        Distractor::ALL.iter().map(|d| d.name().to_string()).collect()
    }
}

impl fmt::Display for Distractor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Distractor {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Distractor::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown distractor label `{s}`")))
    }
}

/// Samples of `[t0, t0 + len)` paired with the normalized position `τ ∈ [0, 1)`.
fn span(fs: f64, n: usize, t0: f64, len: f64) -> impl Iterator<Item = (usize, f64)> {
    let a = ((t0 * fs).round().max(0.0) as usize).min(n);
    let b = (((t0 + len) * fs).round().max(0.0) as usize).min(n);
    (a..b).map(move |i| (i, (i as f64 / fs - t0) / len))
}

fn centered<R: Rng>(rng: &mut R, dur: f64, len: f64, jitter: f64) -> f64 {
    let t0 = (dur - len) / 2.0 + rng.random_range(-jitter..jitter);
    t0.clamp(0.1, (dur - len - 0.1).max(0.1))
}

fn activity_tracks<R: Rng>(activity: Activity, n: usize, fs: f64, rng: &mut R) -> Vec<Track> {
    let dur = n as f64 / fs;
    let t = |i: usize| i as f64 / fs;
    match activity {
        Activity::Walking => {
            let v0 = rng.random_range(50.0..80.0);
            let gait = rng.random_range(0.8..1.3);
            let phase = rng.random_range(0.0..2.0 * PI);
            let torso_dev = rng.random_range(8.0..15.0);
            let mut out = vec![Track::constant(n, 1.0)];
            for i in 0..n {
                out[0].freq[i] = v0 + torso_dev * (2.0 * PI * gait * t(i) + phase).sin();
            }
            for j in 0..2 {
                let depth = rng.random_range(70.0..95.0);
                let amp = rng.random_range(0.45..0.65);
                let mut tr = Track::constant(n, amp);
                for i in 0..n {
                    tr.freq[i] = v0 + depth * (2.0 * PI * gait * t(i) + phase + PI * j as f64).sin();
                }
                out.push(tr);
            }
            out
        }
        Activity::Sitting | Activity::Standing => {
            let sign = if activity == Activity::Sitting { -1.0 } else { 1.0 };
            let len = rng.random_range(1.2..1.8);
            let t0 = centered(rng, dur, len, 0.3);
            let peak = rng.random_range(70.0..100.0);
            let mut torso = Track::constant(n, 0.8);
            let mut legs = Track::constant(n, 0.4);
            for (i, tau) in span(fs, n, t0, len) {
                torso.freq[i] = sign * peak * tau;
                legs.freq[i] = sign * 0.5 * peak * tau;
            }
            vec![torso, legs]
        }
        Activity::Drinking | Activity::PickingUp => {
            let (len, first, second) = if activity == Activity::Drinking {
                (
                    rng.random_range(1.0..1.6),
                    rng.random_range(25.0..45.0),
                    -rng.random_range(20.0..35.0),
                )
            } else {
                (
                    rng.random_range(1.2..1.8),
                    -rng.random_range(30.0..50.0),
                    rng.random_range(20.0..35.0),
                )
            };
            let amp = 0.45;
            let t0 = centered(rng, dur, len, 0.8);
            let body = Track::constant(n, 0.6);
            let mut limb = Track::constant(n, amp);
            // Weaker counter-moving scatterer mirrors the limb.
            let mut mirror = Track::constant(n, 0.6 * amp);
            for (i, tau) in span(fs, n, t0, len) {
                let s = (PI * (2.0 * tau % 1.0)).sin();
                limb.freq[i] = if tau < 0.5 { first * s } else { second * s };
                mirror.freq[i] = -0.8 * limb.freq[i];
            }
            vec![body, limb, mirror]
        }
        Activity::Falling => {
            let t0 = rng.random_range(0.8..1.4);
            let len = rng.random_range(0.4..0.6);
            let peak = rng.random_range(190.0..230.0);
            let mut body = Track::new(n);
            let mut limbs = Track::new(n);
            let end = ((t0 + len) * fs).round() as usize;
            for i in 0..end.min(n) {
                body.amp[i] = 1.0;
                body.freq[i] = 3.0 * (PI * t(i)).sin();
                limbs.amp[i] = 0.5;
                limbs.freq[i] = body.freq[i];
            }
            for (i, tau) in span(fs, n, t0, len) {
                body.freq[i] = -peak * tau * tau;
                limbs.freq[i] = -0.7 * peak * tau * tau;
            }
            vec![body, limbs]
        }
    }
}

fn distractor_tracks<R: Rng>(d: Distractor, n: usize, fs: f64, rng: &mut R) -> Vec<Track> {
    let dur = n as f64 / fs;
    let mut tr = Track::constant(n, 1.0);
    match d {
        Distractor::Tone => {
            let f = rng.random_range(-150.0..150.0);
            tr.freq.iter_mut().for_each(|v| *v = f);
            vec![tr]
        }
        Distractor::UpChirp | Distractor::DownChirp => {
            let sign = if d == Distractor::UpChirp { 1.0 } else { -1.0 };
            let f0 = sign * rng.random_range(-180.0..0.0);
            let spread = rng.random_range(100.0..180.0);
            for (i, v) in tr.freq.iter_mut().enumerate() {
                *v = f0 + sign * spread * (i as f64 / fs) / dur;
            }
            vec![tr]
        }
        Distractor::TwoTone => {
            let f1 = rng.random_range(-150.0..0.0);
            let f2 = f1 + rng.random_range(60.0..150.0);
            let mut second = Track::constant(n, rng.random_range(0.5..1.0));
            tr.freq.iter_mut().for_each(|v| *v = f1);
            second.freq.iter_mut().for_each(|v| *v = f2);
            vec![tr, second]
        }
    }
}

fn render<R: Rng>(tracks: &[Track], fs: f64, snr_db: Option<f64>, rng: &mut R) -> Vec<Complex64> {
    let n = tracks.first().map_or(0, |t| t.amp.len());
    let mut out = vec![Complex64::default(); n];
    for tr in tracks {
        let mut phase = 0.0f64;
        for i in 0..n {
            out[i] += Complex64::from_polar(tr.amp[i], phase);
            phase = (phase + 2.0 * PI * tr.freq[i] / fs).rem_euclid(2.0 * PI);
        }
    }
    if let Some(snr) = snr_db {
        let power = out.iter().map(|z| z.norm_sqr()).sum::<f64>() / n.max(1) as f64;
        let sigma = (power.max(1e-12) / 10f64.powf(snr / 10.0) / 2.0).sqrt();
        for z in &mut out {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *z += Complex64::new(sigma * re, sigma * im);
        }
    }
    out
}

/// Scatterer tracks of one activity draw; the oracle behind [`synth_activity`].
pub fn tracks_for(activity: Activity, cfg: &SynthConfig, seed: u64) -> Result<Vec<Track>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(activity_tracks(activity, cfg.len(), cfg.sample_rate, &mut rng))
}

/// One recording of `label`; identical `(label, cfg, seed)` give identical samples.
pub fn synth_activity(label: &str, cfg: &SynthConfig, seed: u64) -> Result<CwRecording> {
    let activity: Activity = label.parse()?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tracks = activity_tracks(activity, cfg.len(), cfg.sample_rate, &mut rng);
    Ok(CwRecording {
        samples: render(&tracks, cfg.sample_rate, cfg.snr_db, &mut rng),
        sample_rate: cfg.sample_rate,
        label: activity.name().to_string(),
        source_id: format!("synth:{}:{seed}", activity.name()),
    })
}

pub fn synth_distractor(label: &str, cfg: &SynthConfig, seed: u64) -> Result<CwRecording> {
    let d: Distractor = label.parse()?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tracks = distractor_tracks(d, cfg.len(), cfg.sample_rate, &mut rng);
    Ok(CwRecording {
        samples: render(&tracks, cfg.sample_rate, cfg.snr_db, &mut rng),
        sample_rate: cfg.sample_rate,
        label: d.name().to_string(),
        source_id: format!("synth:{}:{seed}", d.name()),
    })
}

/// Activity or distractor label, whichever matches.
pub fn synth_recording(label: &str, cfg: &SynthConfig, seed: u64) -> Result<CwRecording> {
    if label.parse::<Distractor>().is_ok() {
        synth_distractor(label, cfg, seed)
    } else {
        synth_activity(label, cfg, seed)
    }
}
