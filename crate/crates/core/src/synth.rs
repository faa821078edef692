//! Deterministic synthetic hyperspectral cubes.
//!
//! Each cube is a linear mixture of a few endmember spectra. Spectra are smooth
//! in wavelength, which couples neighbouring bands. Abundance maps are a
//! softmax over per-endmember score fields built from low-frequency sinusoids
//! and piecewise-constant shapes, so every pixel is a convex combination and
//! values stay inside `[0, 1]`.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cube::{read_cube, write_cube, Dtype, SpectralCube};
use crate::{rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    /// Sinusoidal score fields only.
    Smooth,
    /// Rectangles and discs only.
    Blocky,
    /// Both.
    #[default]
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub texture: Texture,
    pub endmembers: usize,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            count: 30,
            height: 16,
            width: 16,
            bands: 4,
            texture: Texture::Mixed,
            endmembers: 4,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.bands == 0 || self.endmembers == 0 {
            return Err(Error::InvalidConfig(
                "synthetic cube dimensions and endmember count must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Sharpness of the abundance softmax.
const TEMPERATURE: f64 = 6.0;

fn spectrum(rng: &mut rng::StreamRng, bands: usize) -> Vec<f64> {
    let base = rng.random_range(0.25..0.75);
    let a1 = rng.random_range(-0.2..0.2);
    let f1 = rng.random_range(0.2..0.8);
    let p1 = rng.random_range(0.0..TAU);
    let slope = rng.random_range(-0.15..0.15);
    (0..bands)
        .map(|b| {
            let t = if bands > 1 { b as f64 / (bands - 1) as f64 } else { 0.5 };
            (base + slope * (t - 0.5) + a1 * (TAU * f1 * t + p1).sin()).clamp(0.02, 0.98)
        })
        .collect()
}

fn score_field(rng: &mut rng::StreamRng, h: usize, w: usize, texture: Texture) -> Vec<f64> {
    let mut field = vec![0.0; h * w];
    if texture != Texture::Blocky {
        for _ in 0..3 {
            let amp = rng.random_range(0.2..0.6);
            let fy = rng.random_range(0.0..2.5) / h as f64;
            let fx = rng.random_range(0.0..2.5) / w as f64;
            let phase = rng.random_range(0.0..TAU);
            for r in 0..h {
                for c in 0..w {
                    field[r * w + c] += amp * (TAU * (fy * r as f64 + fx * c as f64) + phase).sin();
                }
            }
        }
    }
    if texture != Texture::Smooth {
        for _ in 0..2 {
            let amp = rng.random_range(0.5..1.2);
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let ry = rng.random_range(0.15..0.4) * h as f64;
            let rx = rng.random_range(0.15..0.4) * w as f64;
            let disc = rng.random_bool(0.5);
            for r in 0..h {
                for c in 0..w {
                    let dy = (r as f64 - cy) / ry;
                    let dx = (c as f64 - cx) / rx;
                    let inside = if disc {
                        dy * dy + dx * dx <= 1.0
                    } else {
                        dy.abs() <= 1.0 && dx.abs() <= 1.0
                    };
                    if inside {
                        field[r * w + c] += amp;
                    }
                }
            }
        }
    }
    field
}

/// Cube `index` of the family described by `params`.
pub fn generate_cube(params: &SynthParams, index: usize) -> Result<SpectralCube> {
    params.validate()?;
    let (h, w, d, e) = (params.height, params.width, params.bands, params.endmembers);
    let mut rng = rng::stream(params.seed, &[0x5717, index as u64]);
    let spectra: Vec<Vec<f64>> = (0..e).map(|_| spectrum(&mut rng, d)).collect();
    let scores: Vec<Vec<f64>> = (0..e)
        .map(|_| score_field(&mut rng, h, w, params.texture))
        .collect();
    let mut data = vec![0.0; h * w * d];
    for p in 0..h * w {
        let top = scores.iter().map(|s| s[p]).fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scores
            .iter()
            .map(|s| (TEMPERATURE * (s[p] - top)).exp())
            .collect();
        let total: f64 = weights.iter().sum();
        for band in 0..d {
            let v: f64 = weights.iter().zip(&spectra).map(|(a, s)| a * s[band]).sum();
            data[band * h * w + p] = (v / total).clamp(0.0, 1.0);
        }
    }
    SpectralCube::new(h, w, d, data)
}

pub fn generate(params: &SynthParams) -> Result<Vec<SpectralCube>> {
    (0..params.count).map(|i| generate_cube(params, i)).collect()
}

pub fn cube_file_name(index: usize) -> String {
    format!("cube_{index:04}.cube")
}

/// Writes `params.count` cubes into `dir` (created if missing).
pub fn write_dataset(params: &SynthParams, dir: impl AsRef<Path>, dtype: Dtype) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..params.count)
        .map(|i| {
            let path = dir.join(cube_file_name(i));
            write_cube(&generate_cube(params, i)?, &path, dtype)?;
            Ok(path)
        })
        .collect()
}

/// Reads every `*.cube` file in `dir`, sorted by name.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<SpectralCube>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "cube"))
        .collect();
    paths.sort();
    paths.iter().map(read_cube).collect()
}

/// Pearson correlation over pixels between bands `a` and `b`.
pub fn band_correlation(x: &SpectralCube, a: usize, b: usize) -> f64 {
    let (pa, pb) = (x.band(a), x.band(b));
    let (ma, mb) = (x.band_mean(a), x.band_mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (u, v) in pa.iter().zip(pb) {
        sab += (u - ma) * (v - mb);
        saa += (u - ma) * (u - ma);
        sbb += (v - mb) * (v - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_in_unit_range_and_deterministic() {
        let p = SynthParams { count: 5, seed: 7, ..Default::default() };
        let a = generate(&p).unwrap();
        let b = generate(&p).unwrap();
        assert_eq!(a, b);
        for x in &a {
            assert!(x.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn adjacent_bands_are_correlated() {
        let p = SynthParams { count: 10, seed: 7, ..Default::default() };
        let mut total = 0.0;
        let mut n = 0;
        for x in generate(&p).unwrap() {
            for b in 0..x.bands() - 1 {
                total += band_correlation(&x, b, b + 1);
                n += 1;
            }
        }
        assert!(total / n as f64 > 0.5, "{}", total / n as f64);
    }

    #[test]
    fn different_indices_differ() {
        let p = SynthParams::default();
        assert_ne!(generate_cube(&p, 0).unwrap(), generate_cube(&p, 1).unwrap());
    }

    #[test]
    fn dataset_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = SynthParams { count: 3, ..Default::default() };
        let paths = write_dataset(&p, dir.path(), Dtype::F64).unwrap();
        assert_eq!(paths.len(), 3);
        assert_eq!(read_dataset(dir.path()).unwrap(), generate(&p).unwrap());
    }
}
