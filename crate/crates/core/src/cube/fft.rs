//! Per-band 2-D DFTs. The forward transform is unnormalized; the inverse
//! carries the `1 / (height * width)` factor.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{SpectralCube, SpectrumCube};
use crate::{Error, Result};

/// Imaginary residue (relative to the largest output magnitude) above which an
/// inverse transform is rejected as non-real.
pub(crate) const NON_REAL_TOL: f64 = 1e-8;

/// Planned row and column transforms for one `height x width` grid.
pub struct Fft2d {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2d {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2d")
            .field("height", &self.height)
            .field("width", &self.width)
            .finish()
    }
}

impl Fft2d {
    /// Shared plan for the grid, cached process-wide.
    pub fn plan(height: usize, width: usize) -> Arc<Fft2d> {
        static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<Fft2d>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(Default::default);
        let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
        guard
            .entry((height, width))
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                Arc::new(Fft2d {
                    height,
                    width,
                    row_fwd: planner.plan_fft_forward(width),
                    row_inv: planner.plan_fft_inverse(width),
                    col_fwd: planner.plan_fft_forward(height),
                    col_inv: planner.plan_fft_inverse(height),
                })
            })
            .clone()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn transform(&self, plane: &mut [Complex64], rows: &dyn Fft<f64>, cols: &dyn Fft<f64>) {
        let (h, w) = (self.height, self.width);
        debug_assert_eq!(plane.len(), h * w);
        rows.process(plane);
        let mut t = vec![Complex64::new(0.0, 0.0); h * w];
        for r in 0..h {
            for c in 0..w {
                t[c * h + r] = plane[r * w + c];
            }
        }
        cols.process(&mut t);
        for c in 0..w {
            for r in 0..h {
                plane[r * w + c] = t[c * h + r];
            }
        }
    }

    /// In-place unnormalized forward DFT of one plane.
    pub fn forward(&self, plane: &mut [Complex64]) {
        self.transform(plane, self.row_fwd.as_ref(), self.col_fwd.as_ref());
    }

    /// In-place inverse DFT of one plane, including the `1/(MN)` factor.
    pub fn inverse(&self, plane: &mut [Complex64]) {
        self.transform(plane, self.row_inv.as_ref(), self.col_inv.as_ref());
        let scale = 1.0 / self.len() as f64;
        plane.iter_mut().for_each(|z| *z *= scale);
    }

    pub fn forward_real(&self, src: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = src.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward(&mut buf);
        buf
    }

    /// Inverse transform of `spec` into `dst`, returning the largest imaginary
    /// magnitude and the largest overall magnitude seen.
    pub fn inverse_real(&self, spec: &mut [Complex64], dst: &mut [f64]) -> (f64, f64) {
        self.inverse(spec);
        let mut im_max = 0.0f64;
        let mut abs_max = 0.0f64;
        for (d, z) in dst.iter_mut().zip(spec.iter()) {
            *d = z.re;
            im_max = im_max.max(z.im.abs());
            abs_max = abs_max.max(z.re.abs()).max(z.im.abs());
        }
        (im_max, abs_max)
    }
}

pub(crate) fn check_real(im_max: f64, abs_max: f64) -> Result<()> {
    check_real_scaled(im_max, abs_max, 0.0)
}

/// Like [`check_real`], but outputs far smaller than `reference` (the input
/// magnitude) are judged against `1e-6 · reference`, so cancellation noise in a
/// nearly-zero result is not mistaken for a non-Hermitian spectrum.
pub(crate) fn check_real_scaled(im_max: f64, abs_max: f64, reference: f64) -> Result<()> {
    let scale = abs_max.max(1e-6 * reference);
    if im_max > NON_REAL_TOL * scale {
        return Err(Error::NonRealResult {
            residue: im_max / scale,
        });
    }
    Ok(())
}

/// Unnormalized forward 2-D DFT applied independently to every band.
pub fn fft_cube(x: &SpectralCube) -> SpectrumCube {
    let plan = Fft2d::plan(x.height(), x.width());
    let mut data = Vec::with_capacity(x.len());
    for b in 0..x.bands() {
        data.extend(plan.forward_real(x.band(b)));
    }
    SpectrumCube::new(x.height(), x.width(), x.bands(), data).expect("shape preserved")
}

/// Per-band inverse 2-D DFT. Fails with [`Error::NonRealResult`] when the
/// spectrum was not conjugate-symmetric enough to yield a real cube.
pub fn ifft_cube(s: &SpectrumCube) -> Result<SpectralCube> {
    let plan = Fft2d::plan(s.height(), s.width());
    let n = plan.len();
    let mut out = vec![0.0; s.as_slice().len()];
    let (mut im_max, mut abs_max) = (0.0f64, 0.0f64);
    for b in 0..s.bands() {
        let mut buf = s.band(b).to_vec();
        let (im, abs) = plan.inverse_real(&mut buf, &mut out[b * n..(b + 1) * n]);
        im_max = im_max.max(im);
        abs_max = abs_max.max(abs);
    }
    check_real(im_max, abs_max)?;
    SpectralCube::new(s.height(), s.width(), s.bands(), out)
}
