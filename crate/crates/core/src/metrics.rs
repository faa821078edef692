//! Restoration quality metrics on `[0,1]`-scaled cubes. The restored cube is
//! clipped to `[0,1]` before every metric; the reference is used as is.

use serde::{Deserialize, Serialize};

use crate::cube::SpectralCube;
use crate::Result;

/// Reported PSNR when the two cubes are identical.
pub const PSNR_SENTINEL: f64 = 999.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
/// Floor on a band mean in the ERGAS denominator.
const ERGAS_MEAN_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Root-mean-square error on the 0–255 scale.
    pub rmse: f64,
    /// dB, peak 1.
    pub psnr: f64,
    /// Band-averaged SSIM.
    pub ssim: f64,
    pub ergas: f64,
}

pub fn evaluate(x_hat: &SpectralCube, x: &SpectralCube) -> Result<MetricReport> {
    x.ensure_same_shape(x_hat, "restored cube")?;
    let x_hat = x_hat.clipped(0.0, 1.0);
    let mse = mse(x_hat.as_slice(), x.as_slice());
    Ok(MetricReport {
        rmse: 255.0 * mse.sqrt(),
        psnr: psnr_from_mse(mse),
        ssim: ssim_clipped(&x_hat, x),
        ergas: ergas_clipped(&x_hat, x),
    })
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        PSNR_SENTINEL
    } else {
        -10.0 * mse.log10()
    }
}

pub fn psnr(x_hat: &SpectralCube, x: &SpectralCube) -> Result<f64> {
    x.ensure_same_shape(x_hat, "restored cube")?;
    Ok(psnr_from_mse(mse(x_hat.clipped(0.0, 1.0).as_slice(), x.as_slice())))
}

pub fn ssim(x_hat: &SpectralCube, x: &SpectralCube) -> Result<f64> {
    x.ensure_same_shape(x_hat, "restored cube")?;
    Ok(ssim_clipped(&x_hat.clipped(0.0, 1.0), x))
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
/// Grids smaller than the window use the largest odd size that fits.
pub fn ssim_window(height: usize, width: usize) -> Vec<f64> {
    let fit = height.min(width);
    let size = SSIM_WINDOW.min(if fit % 2 == 1 { fit } else { fit - 1 });
    let half = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

fn ssim_clipped(a: &SpectralCube, b: &SpectralCube) -> f64 {
    let (h, w) = (a.height(), a.width());
    let g = ssim_window(h, w);
    let k = g.len();
    let mut total = 0.0;
    for band in 0..a.bands() {
        let (pa, pb) = (a.band(band), b.band(band));
        let mut acc = 0.0;
        let mut count = 0usize;
        for r0 in 0..=h - k {
            for c0 in 0..=w - k {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wt = g[i] * g[j];
                        let va = pa[(r0 + i) * w + c0 + j];
                        let vb = pb[(r0 + i) * w + c0 + j];
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - ma * mb;
                acc += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    total / a.bands() as f64
}

fn ergas_clipped(x_hat: &SpectralCube, x: &SpectralCube) -> f64 {
    let d = x.bands();
    let sum: f64 = (0..d)
        .map(|band| {
            let rmse = mse(x_hat.band(band), x.band(band)).sqrt();
            let mean = x.band_mean(band).abs().max(ERGAS_MEAN_FLOOR);
            (rmse / mean).powi(2)
        })
        .sum();
    100.0 * (sum / d as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_cube(h: usize, w: usize, d: usize, seed: u64) -> SpectralCube {
        let mut rng = rng::stream(seed, &[]);
        SpectralCube::from_fn(h, w, d, |_, _, _| rng.random::<f64>())
    }

    #[test]
    fn identical_cubes() {
        let x = random_cube(16, 16, 4, 1);
        let m = evaluate(&x, &x).unwrap();
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.psnr, PSNR_SENTINEL);
        assert!((m.ssim - 1.0).abs() < 1e-12);
        assert_eq!(m.ergas, 0.0);
    }

    #[test]
    fn constant_offset() {
        let x = SpectralCube::from_fn(8, 8, 2, |_, _, _| 0.5);
        let x_hat = SpectralCube::from_fn(8, 8, 2, |_, _, _| 0.6);
        let m = evaluate(&x_hat, &x).unwrap();
        assert!((m.psnr - 20.0).abs() < 1e-10);
        assert!((m.rmse - 25.5).abs() < 1e-10);
        assert!((m.ergas - 20.0).abs() < 1e-10);
    }

    #[test]
    fn window_shrinks_on_small_grids() {
        assert_eq!(ssim_window(64, 64).len(), 11);
        assert_eq!(ssim_window(8, 10).len(), 7);
        assert_eq!(ssim_window(1, 1), vec![1.0]);
        assert!((ssim_window(6, 6).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn restored_values_are_clipped() {
        let x = SpectralCube::from_fn(4, 4, 1, |_, _, _| 1.0);
        let x_hat = SpectralCube::from_fn(4, 4, 1, |_, _, _| 1.7);
        assert_eq!(evaluate(&x_hat, &x).unwrap().rmse, 0.0);
    }

    #[test]
    fn shape_mismatch() {
        assert!(evaluate(&random_cube(4, 4, 2, 1), &random_cube(4, 4, 1, 1)).is_err());
    }
}
