use rustfft::FftPlanner;

use super::{Complex64, CwRecording, SpectrogramSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Added to `|X|` before the logarithm.
pub const DB_EPS: f64 = 1e-12;

pub const DEFAULT_DYNAMIC_RANGE_DB: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StftParams {
    pub window_len: usize,
    pub hop: usize,
    pub fft_len: usize,
    /// Values below `peak - dynamic_range_db` are raised to that floor.
    pub dynamic_range_db: f64,
}

impl StftParams {
    /// 0.2 s Hann window, 95% overlap, FFT length the next power of two.
    pub fn for_sample_rate(fs: f64) -> Self {
        let window_len = ((0.2 * fs).round() as usize).max(1);
        let hop = ((window_len as f64 * 0.05).round() as usize).max(1);
        StftParams {
            window_len,
            hop,
            fft_len: window_len.next_power_of_two(),
            dynamic_range_db: DEFAULT_DYNAMIC_RANGE_DB,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0 < self.hop && self.hop <= self.window_len && self.window_len <= self.fft_len) {
            return Err(Error::Config(format!(
                "STFT parameters need 0 < hop ({}) <= window ({}) <= fft ({})",
                self.hop, self.window_len, self.fft_len
            )));
        }
        if !(self.dynamic_range_db > 0.0) {
            return Err(Error::Config(format!("dynamic range {} dB must be positive", self.dynamic_range_db)));
        }
        Ok(())
    }

    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.window_len {
            0
        } else {
            (len - self.window_len) / self.hop + 1
        }
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Raw windowed DFT of every frame, unshifted (bin `k` is `k·fs/N`).
pub fn stft_frames(samples: &[Complex64], p: &StftParams) -> Result<Vec<Vec<Complex64>>> {
    p.validate()?;
    let frames = p.frame_count(samples.len());
    if frames == 0 {
        return Err(Error::Input(format!(
            "recording of {} samples is shorter than one {}-sample window",
            samples.len(),
            p.window_len
        )));
    }
    let w = hann(p.window_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(p.fft_len);
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        let start = f * p.hop;
        let mut buf = vec![Complex64::default(); p.fft_len];
        for (i, (b, s)) in buf.iter_mut().zip(&samples[start..start + p.window_len]).enumerate() {
            *b = s * w[i];
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        out.push(buf);
    }
    Ok(out)
}

/// dB Time-Doppler map with zero Doppler centered.
pub fn stft(rec: &CwRecording, p: &StftParams) -> Result<SpectrogramSample> {
    rec.validate()?;
    let frames = stft_frames(&rec.samples, p)?;
    let n = p.fft_len;
    let t = frames.len();
    let half = n / 2;
    let mut td = vec![0.0; n * t];
    for (c, spec) in frames.iter().enumerate() {
        for (k, z) in spec.iter().enumerate() {
            let row = (k + half) % n;
            td[row * t + c] = 20.0 * (z.norm() + DB_EPS).log10();
        }
    }
    let peak = td.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let floor = peak - p.dynamic_range_db;
    td.iter_mut().for_each(|v| *v = v.max(floor));
    Ok(SpectrogramSample {
        td: Tensor::new(&[n, t], td)?,
        label: rec.label.clone(),
        params: *p,
        sample_rate: rec.sample_rate,
        source_id: rec.source_id.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(hz: f64, fs: f64, len: usize) -> CwRecording {
        let samples = (0..len)
            .map(|i| Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * hz * i as f64 / fs))
            .collect();
        CwRecording {
            samples,
            sample_rate: fs,
            label: "walking".into(),
            source_id: "tone".into(),
        }
    }

    #[test]
    fn defaults_at_500_hz() {
        let p = StftParams::for_sample_rate(500.0);
        assert_eq!((p.window_len, p.hop, p.fft_len), (100, 5, 128));
        assert_eq!(p.frame_count(1500), 281);
    }

    #[test]
    fn too_short_is_input_error() {
        let p = StftParams::for_sample_rate(500.0);
        assert!(matches!(stft(&tone(10.0, 500.0, 99), &p), Err(Error::Input(_))));
    }

    #[test]
    fn zero_signal_is_flat_floor() {
        let mut rec = tone(0.0, 500.0, 300);
        rec.samples.iter_mut().for_each(|z| *z = Complex64::default());
        let sp = stft(&rec, &StftParams::for_sample_rate(500.0)).unwrap();
        let floor = 20.0 * DB_EPS.log10();
        assert!(sp.td.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn row_mapping_is_centered() {
        let sp = stft(&tone(0.0, 500.0, 200), &StftParams::for_sample_rate(500.0)).unwrap();
        assert_eq!(sp.doppler_hz(64), 0.0);
        assert_eq!(sp.doppler_hz(0), -250.0);
        assert_eq!(sp.row_of(-250.0 * 3.0 / 64.0), 61);
    }
}
