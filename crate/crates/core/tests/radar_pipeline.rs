use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selafd::dataset::{corpus_entries, nearest_centroid, split, Task};
use selafd::radar::{
    hann, ingest_uog, rasterize, stft, stft_frames, synth_recording, write_recording, Activity, Complex64, CwRecording,
    IngestConfig, RasterConfig, RasterNorm, StftParams, SynthConfig,
};

const FS: f64 = 500.0;

fn recording(samples: Vec<Complex64>) -> CwRecording {
    CwRecording {
        samples,
        sample_rate: FS,
        label: "walking".into(),
        source_id: "test".into(),
    }
}

fn tone(hz: f64, seconds: f64) -> CwRecording {
    let n = (FS * seconds) as usize;
    recording(
        (0..n)
            .map(|i| Complex64::from_polar(1.0, 2.0 * PI * hz * i as f64 / FS))
            .collect(),
    )
}

fn column(td: &selafd::Tensor, t: usize) -> Vec<f64> {
    let (rows, cols) = td.dims2().unwrap();
    (0..rows).map(|r| td.data()[r * cols + t]).collect()
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > xs[best] { i } else { best })
}

#[test]
fn three_second_recording_gives_expected_grid() {
    let p = StftParams::for_sample_rate(FS);
    let sp = stft(&tone(50.0, 3.0), &p).unwrap();
    assert_eq!(sp.td.shape(), &[128, 281]);
    assert_eq!(p.frame_count(1500), 281);
}

#[test]
fn parseval_holds_per_frame() {
    let p = StftParams::for_sample_rate(FS);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<Complex64> = (0..700)
        .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    let w = hann(p.window_len);
    let frames = stft_frames(&x, &p).unwrap();
    assert_eq!(frames.len(), p.frame_count(x.len()));
    for (f, spec) in frames.iter().enumerate() {
        let start = f * p.hop;
        let time: f64 = (0..p.window_len).map(|n| (x[start + n] * w[n]).norm_sqr()).sum();
        let freq: f64 = spec.iter().map(|z| z.norm_sqr()).sum::<f64>() / p.fft_len as f64;
        assert!((time - freq).abs() / time < 1e-9, "frame {f}: {time} vs {freq}");
    }
}

#[test]
fn bin_centered_tones_peak_at_their_doppler_row() {
    let p = StftParams::for_sample_rate(FS);
    for k in [-40i64, -7, 0, 13, 50] {
        let hz = k as f64 * FS / p.fft_len as f64;
        let sp = stft(&tone(hz, 3.0), &p).unwrap();
        let row = (k + p.fft_len as i64 / 2) as usize;
        assert_eq!(sp.row_of(hz), row);
        assert!((sp.doppler_hz(row) - hz).abs() < 1e-12);
        for t in 0..sp.frames() {
            assert_eq!(argmax(&column(&sp.td, t)), row, "k={k} frame {t}");
        }
    }
}

#[test]
fn hann_sidelobes_stay_below_31_db() {
    let p = StftParams::for_sample_rate(FS);
    let sp = stft(&tone(20.0 * FS / 128.0, 1.0), &p).unwrap();
    let col = column(&sp.td, 0);
    let peak_row = argmax(&col);
    let peak = col[peak_row];
    // Main lobe of a 100-point Hann spans ±2 bins of 100, i.e. ±2.56 of 128.
    for (r, &v) in col.iter().enumerate() {
        if (r as i64 - peak_row as i64).abs() > 3 {
            assert!(v < peak - 31.0, "row {r}: {v} vs peak {peak}");
        }
    }
}

#[test]
fn conjugation_mirrors_the_doppler_axis() {
    let p = StftParams::for_sample_rate(FS);
    let rec = synth_recording("walking", &SynthConfig::default(), 4).unwrap();
    let a = stft(&rec, &p).unwrap();
    let b = stft(&rec.conjugate(), &p).unwrap();
    let (n, cols) = a.td.dims2().unwrap();
    for i in 1..n {
        for t in 0..cols {
            let lhs = a.td.data()[i * cols + t];
            let rhs = b.td.data()[(n - i) * cols + t];
            assert!((lhs - rhs).abs() < 1e-9, "row {i} frame {t}");
        }
    }
}

#[test]
fn chirp_peak_tracks_instantaneous_frequency() {
    let p = StftParams::for_sample_rate(FS);
    let (f0, f1, secs) = (-150.0, 150.0, 3.0);
    let n = (FS * secs) as usize;
    let rate = (f1 - f0) / secs;
    let rec = recording(
        (0..n)
            .map(|i| {
                let t = i as f64 / FS;
                Complex64::from_polar(1.0, 2.0 * PI * (f0 * t + 0.5 * rate * t * t))
            })
            .collect(),
    );
    let sp = stft(&rec, &p).unwrap();
    let bin = FS / p.fft_len as f64;
    for t in 0..sp.frames() {
        let centre = (t * p.hop) as f64 / FS + (p.window_len as f64 - 1.0) / (2.0 * FS);
        let expected = f0 + rate * centre;
        let got = sp.doppler_hz(argmax(&column(&sp.td, t)));
        assert!((got - expected).abs() <= 1.5 * bin, "frame {t}: {got} vs {expected}");
    }
}

#[test]
fn falling_template_dominates_the_negative_band() {
    let p = StftParams::for_sample_rate(FS);
    let cfg = SynthConfig {
        snr_db: None,
        ..SynthConfig::default()
    };
    let rec = synth_recording("falling", &cfg, 9).unwrap();
    let sp = stft(&rec, &p).unwrap();
    let lowest = (0..sp.frames())
        .map(|t| sp.doppler_hz(argmax(&column(&sp.td, t))))
        .fold(f64::INFINITY, f64::min);
    assert!(lowest < -120.0, "fall never reaches a strong negative Doppler: {lowest}");
}

#[test]
fn zero_signal_is_a_uniform_floor() {
    let p = StftParams::for_sample_rate(FS);
    let sp = stft(&recording(vec![Complex64::new(0.0, 0.0); 1500]), &p).unwrap();
    let first = sp.td.data()[0];
    assert!(first.is_finite());
    assert!(sp.td.data().iter().all(|&v| v == first));
}

#[test]
fn native_rasterize_is_identity_on_clipped_map() {
    let p = StftParams::for_sample_rate(FS);
    let sp = stft(&synth_recording("sitting", &SynthConfig::default(), 2).unwrap(), &p).unwrap();
    let (rows, cols) = sp.td.dims2().unwrap();
    assert_eq!(rows, 128);
    // Crop to a square so the native size is well defined.
    let sq = selafd::Tensor::new(
        &[rows, rows],
        (0..rows).flat_map(|r| sp.td.data()[r * cols..r * cols + rows].to_vec()).collect(),
    )
    .unwrap();
    let square = selafd::radar::SpectrogramSample { td: sq.clone(), ..sp };
    let cfg = RasterConfig {
        out_size: rows,
        channels: 1,
        norm: RasterNorm::Identity,
    };
    let img = rasterize(&square, &cfg).unwrap();
    assert!(img.reshape(&[rows, rows]).unwrap().max_abs_diff(&sq) < 1e-12);
}

/// Confusion counts of nearest-centroid classification on raw maps.
fn centroid_confusion() -> Vec<Vec<usize>> {
    let cfg = SynthConfig::default();
    let p = StftParams::for_sample_rate(FS);
    let entries = corpus_entries(Task::Activity, 100, 0).unwrap();
    let mut maps = Vec::new();
    let mut labels = Vec::new();
    for e in &entries {
        let rec = synth_recording(&e.label, &cfg, e.seed).unwrap();
        maps.push(stft(&rec, &p).unwrap().td);
        labels.push(e.label.parse::<Activity>().unwrap().index());
    }
    let s = split(&labels, 0.8, 0).unwrap();
    nearest_centroid(&maps, &labels, 6, &s.train, &s.test)
}

#[test]
fn synthetic_classes_are_separable_with_realistic_confusions() {
    let conf = centroid_confusion();
    let total: usize = conf.iter().flatten().sum();
    let diag: usize = (0..6).map(|i| conf[i][i]).sum();
    assert_eq!(total, 120);
    assert!(diag as f64 / total as f64 >= 0.7, "{conf:?}");

    let (drink, pick) = (Activity::Drinking.index(), Activity::PickingUp.index());
    let worst = (0..6)
        .flat_map(|i| (i + 1..6).map(move |j| (i, j)))
        .max_by_key(|&(i, j)| (conf[i][j] + conf[j][i], usize::from((i, j) == (drink, pick))))
        .unwrap();
    assert_eq!(worst, (drink, pick), "{conf:?}");
}

#[test]
fn native_files_ingest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig::default();
    let recs: Vec<CwRecording> = ["falling", "walking"]
        .iter()
        .enumerate()
        .map(|(i, l)| synth_recording(l, &cfg, i as u64).unwrap())
        .collect();
    for (i, r) in recs.iter().enumerate() {
        write_recording(&dir.path().join(format!("r{i}.rec")), r).unwrap();
    }
    std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
    std::fs::write(dir.path().join("r9.rec"), "garbage").unwrap();
    let report = ingest_uog(dir.path(), &IngestConfig::default()).unwrap();
    assert_eq!(report.recordings, recs);
    assert_eq!(report.skipped.len(), 1);
    assert!(report.skip_manifest().contains("r9.rec"));
}

#[test]
fn empty_directory_ingests_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let report = ingest_uog(dir.path(), &IngestConfig::uog_text(FS)).unwrap();
    assert!(report.recordings.is_empty() && report.skipped.is_empty());
    assert!(ingest_uog(&dir.path().join("missing"), &IngestConfig::default()).is_err());
}

#[test]
fn stratified_split_is_exact_for_many_seeds() {
    let labels: Vec<usize> = (0..600).map(|i| i / 100).collect();
    for seed in 0..100 {
        let s = split(&labels, 0.8, seed).unwrap();
        assert_eq!(s.train.len(), 480);
        assert_eq!(s.test.len(), 120);
        for c in 0..6 {
            assert_eq!(s.test.iter().filter(|&&i| labels[i] == c).count(), 20);
        }
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..600).collect::<Vec<_>>());
    }
    assert_eq!(split(&labels, 0.8, 5).unwrap().hash(), split(&labels, 0.8, 5).unwrap().hash());
    assert_ne!(split(&labels, 0.8, 5).unwrap().hash(), split(&labels, 0.8, 6).unwrap().hash());
}
