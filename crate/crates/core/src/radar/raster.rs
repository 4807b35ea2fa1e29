use super::SpectrogramSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RasterNorm {
    /// Min-max to `[0, 1]`, then `(x - mean) / std`.
    Standardize { mean: f64, std: f64 },
    /// Resized dB values, untouched.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterConfig {
    pub out_size: usize,
    pub channels: usize,
    pub norm: RasterNorm,
}

impl RasterConfig {
    pub fn new(out_size: usize, channels: usize) -> Self {
        RasterConfig {
            out_size,
            channels,
            norm: RasterNorm::Standardize { mean: 0.5, std: 0.5 },
        }
    }
}

/// Triangle-filter weights mapping `n_in` samples onto `n_out`.
///
/// Pixel centers sit at half-integers. When shrinking, the filter support
/// widens by the scale factor so every input sample contributes.
fn axis_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    let support = scale.max(1.0);
    (0..n_out)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale;
            let lo = (center - support).floor().max(0.0) as usize;
            let hi = ((center + support).ceil() as usize).min(n_in);
            let mut taps: Vec<(usize, f64)> = (lo..hi)
                .map(|i| (i, 1.0 - ((i as f64 + 0.5 - center) / support).abs()))
                .filter(|&(_, w)| w > 0.0)
                .collect();
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Separable bilinear resize of a `[rows, cols]` map.
pub fn resize_bilinear(map: &Tensor, out_rows: usize, out_cols: usize) -> Result<Tensor> {
    let (rows, cols) = map.dims2()?;
    if out_rows == 0 || out_cols == 0 {
        return Err(Error::Config("resize target must be non-empty".into()));
    }
    let wc = axis_weights(cols, out_cols);
    let wr = axis_weights(rows, out_rows);
    let src = map.data();
    let mut tmp = vec![0.0; rows * out_cols];
    for r in 0..rows {
        for (c, taps) in wc.iter().enumerate() {
            tmp[r * out_cols + c] = taps.iter().map(|&(i, w)| w * src[r * cols + i]).sum();
        }
    }
    let mut out = vec![0.0; out_rows * out_cols];
    for (r, taps) in wr.iter().enumerate() {
        for c in 0..out_cols {
            out[r * out_cols + c] = taps.iter().map(|&(i, w)| w * tmp[i * out_cols + c]).sum();
        }
    }
    Tensor::new(&[out_rows, out_cols], out)
}

/// Model image `[channels, out, out]` from a Time-Doppler map.
///
/// Rows keep the map's ascending Doppler order. A constant map normalizes
/// to zeros.
pub fn rasterize(sp: &SpectrogramSample, cfg: &RasterConfig) -> Result<Tensor> {
    if cfg.out_size == 0 || cfg.channels == 0 {
        return Err(Error::Config("raster size and channel count must be positive".into()));
    }
    if !sp.td.all_finite() {
        return Err(Error::Input(format!("spectrogram `{}` has non-finite values", sp.source_id)));
    }
    let resized = resize_bilinear(&sp.td, cfg.out_size, cfg.out_size)?;
    let n = cfg.out_size;
    let mut plane = resized.into_data();
    if let RasterNorm::Standardize { mean, std } = cfg.norm {
        if !(std > 0.0) {
            return Err(Error::Config(format!("standardization std {std} must be positive")));
        }
        let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let src = sp.td.data();
        let constant = src.iter().all(|&v| v == src[0]);
        let range = if constant { 0.0 } else { hi - lo };
        for v in &mut plane {
            let unit = if range > 0.0 { (*v - lo) / range } else { 0.0 };
            *v = if range > 0.0 { (unit - mean) / std } else { 0.0 };
        }
    }
    let mut data = Vec::with_capacity(cfg.channels * n * n);
    for _ in 0..cfg.channels {
        data.extend_from_slice(&plane);
    }
    Tensor::new(&[cfg.channels, n, n], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radar::StftParams;

    fn sample(td: Tensor) -> SpectrogramSample {
        SpectrogramSample {
            td,
            label: "walking".into(),
            params: StftParams::for_sample_rate(500.0),
            sample_rate: 500.0,
            source_id: "t".into(),
        }
    }

    #[test]
    fn upsample_keeps_corners_and_interpolates() {
        let m = Tensor::from_rows(&[&[0.0, 4.0], &[8.0, 12.0]]);
        let up = resize_bilinear(&m, 4, 4).unwrap();
        let d = up.data();
        assert_eq!((d[0], d[3], d[12], d[15]), (0.0, 4.0, 8.0, 12.0));
        // Interior samples sit a quarter pixel from the nearest source center.
        assert!((d[5] - (0.75 * 0.75 * 0.0 + 0.75 * 0.25 * 4.0 + 0.25 * 0.75 * 8.0 + 0.25 * 0.25 * 12.0)).abs() < 1e-12);
        assert!((d[5] + d[6] + d[9] + d[10] - 24.0).abs() < 1e-12);
    }

    #[test]
    fn native_size_identity_round_trip() {
        let m = Tensor::new(&[3, 3], (0..9).map(|v| v as f64 * -1.5).collect()).unwrap();
        let cfg = RasterConfig {
            out_size: 3,
            channels: 1,
            norm: RasterNorm::Identity,
        };
        let img = rasterize(&sample(m.clone()), &cfg).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert!((img.data()[r * 3 + c] - m.get2(r, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_map_is_zero_image() {
        let img = rasterize(&sample(Tensor::full(&[8, 10], -42.0)), &RasterConfig::new(4, 3)).unwrap();
        assert_eq!(img.shape(), &[3, 4, 4]);
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn downsample_averages() {
        let m = Tensor::new(&[1, 4], vec![1.0, 1.0, 3.0, 3.0]).unwrap();
        let d = resize_bilinear(&m, 1, 2).unwrap();
        assert!(d.data()[0] < d.data()[1]);
        let total = resize_bilinear(&Tensor::full(&[6, 6], 2.0), 3, 3).unwrap();
        assert!(total.data().iter().all(|v| (v - 2.0).abs() < 1e-15));
    }
}
