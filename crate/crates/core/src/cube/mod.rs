//! Spectral cubes, their per-band 2-D spectra and the on-disk cube format.
//!
//! Cubes are stored band-major: band `i` is the contiguous `height * width`
//! plane starting at `i * height * width`, itself row-major.

pub(crate) mod fft;
mod io;

use num_complex::Complex64;

use crate::{Error, Result};

pub use fft::{fft_cube, ifft_cube, Fft2d};
pub use io::{read_cube, write_cube, write_cube_sidecar, CubeHeader, Dtype};

/// Real-valued `height x width x bands` hyperspectral image.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCube {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f64>,
}

impl SpectralCube {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, bands)?;
        if data.len() != height * width * bands {
            return Err(Error::DimensionMismatch(format!(
                "{height}x{width}x{bands} cube needs {} values, got {}",
                height * width * bands,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteData("cube data"));
        }
        Ok(Self {
            height,
            width,
            bands,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, bands: usize) -> Self {
        check_dims(height, width, bands).expect("cube dimensions must be positive");
        Self {
            height,
            width,
            bands,
            data: vec![0.0; height * width * bands],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        bands: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut cube = Self::zeros(height, width, bands);
        for b in 0..bands {
            for r in 0..height {
                for c in 0..width {
                    cube.data[(b * height + r) * width + c] = f(b, r, c);
                }
            }
        }
        cube
    }

    /// A cube with the same shape as `self` holding `data`.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.height, self.width, self.bands, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.bands)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw voxels. Callers are responsible for keeping
    /// values finite.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn band(&self, band: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[band * n..(band + 1) * n]
    }

    pub fn band_mut(&mut self, band: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[band * n..(band + 1) * n]
    }

    pub fn get(&self, band: usize, row: usize, col: usize) -> f64 {
        self.data[(band * self.height + row) * self.width + col]
    }

    pub fn set(&mut self, band: usize, row: usize, col: usize, value: f64) {
        self.data[(band * self.height + row) * self.width + col] = value;
    }

    pub fn same_shape(&self, other: &SpectralCube) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn ensure_same_shape(&self, other: &SpectralCube, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &SpectralCube) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn band_mean(&self, band: usize) -> f64 {
        self.band(band).iter().sum::<f64>() / self.plane_len() as f64
    }

    /// Circular shift of every band by `(dr, dc)` pixels.
    pub fn roll(&self, dr: usize, dc: usize) -> SpectralCube {
        let (h, w) = (self.height, self.width);
        let mut out = self.clone();
        for b in 0..self.bands {
            let src = self.band(b);
            let dst = out.band_mut(b);
            for r in 0..h {
                for c in 0..w {
                    dst[((r + dr) % h) * w + (c + dc) % w] = src[r * w + c];
                }
            }
        }
        out
    }

    pub fn clipped(&self, lo: f64, hi: f64) -> SpectralCube {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        out
    }
}

/// Complex per-band 2-D DFT of a [`SpectralCube`], same band-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumCube {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<Complex64>,
}

impl SpectrumCube {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<Complex64>) -> Result<Self> {
        check_dims(height, width, bands)?;
        if data.len() != height * width * bands {
            return Err(Error::DimensionMismatch(format!(
                "{height}x{width}x{bands} spectrum needs {} values, got {}",
                height * width * bands,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bands,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, bands: usize) -> Self {
        Self {
            height,
            width,
            bands,
            data: vec![Complex64::new(0.0, 0.0); height * width * bands],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.bands)
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn band(&self, band: usize) -> &[Complex64] {
        let n = self.height * self.width;
        &self.data[band * n..(band + 1) * n]
    }

    pub fn get(&self, band: usize, row: usize, col: usize) -> Complex64 {
        self.data[(band * self.height + row) * self.width + col]
    }
}

fn check_dims(height: usize, width: usize, bands: usize) -> Result<()> {
    if height == 0 || width == 0 || bands == 0 {
        return Err(Error::MalformedHeader(format!(
            "dimensions must be positive, got {height}x{width}x{bands}"
        )));
    }
    Ok(())
}
