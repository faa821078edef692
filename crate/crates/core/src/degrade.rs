//! Blur kernels and the separable degradation model `Y_i = H ⋆ X_i + W_i`.
//!
//! Convolution is circular everywhere so that the blur operator is exactly
//! block-circulant with circulant blocks and is diagonalized by the 2-D DFT.

use num_complex::Complex64;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cube::{Fft2d, SpectralCube, SpectrumCube};
use crate::{rng, Error, Result};

/// Kernel family and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelKind {
    /// `size x size` samples of an isotropic Gaussian with bandwidth `sigma`.
    Gaussian { size: usize, sigma: f64 },
    /// Uniform disk; a pixel belongs to it iff its center lies within
    /// `diameter / 2` of the kernel center.
    Circle { diameter: f64 },
    /// Uniform `side x side` box. Even sides sit in a `side + 1` array with
    /// the extra row and column (bottom, right) left empty.
    Square { side: usize },
    /// Explicit odd-sized weights, renormalized to sum to one.
    Custom { size: usize, weights: Vec<f64> },
}

/// Normalized `size x size` convolution kernel (row-major weights).
#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel {
    size: usize,
    weights: Vec<f64>,
    kind: KernelKind,
}

impl BlurKernel {
    pub fn identity() -> Self {
        Self {
            size: 1,
            weights: vec![1.0],
            kind: KernelKind::Square { side: 1 },
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn kind(&self) -> &KernelKind {
        &self.kind
    }

    /// Weight at `(row, col)` of the `size x size` array.
    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.size + col]
    }

    pub fn center(&self) -> usize {
        self.size / 2
    }

    /// Zero-padded, center-shifted 2-D DFT on an `height x width` grid.
    pub fn spectrum(&self, height: usize, width: usize) -> Result<SpectrumCube> {
        pad_and_shift_kernel(self, height, width)
    }
}

fn normalized(size: usize, mut weights: Vec<f64>, kind: KernelKind) -> Result<BlurKernel> {
    let sum: f64 = weights.iter().sum();
    if !(sum > 0.0 && sum.is_finite()) {
        return Err(Error::BadKernelParams(format!("weights sum to {sum}")));
    }
    weights.iter_mut().for_each(|w| *w /= sum);
    Ok(BlurKernel {
        size,
        weights,
        kind,
    })
}

/// Builds the kernel described by `kind`.
pub fn make_kernel(kind: KernelKind) -> Result<BlurKernel> {
    match &kind {
        &KernelKind::Gaussian { size, sigma } => {
            if size % 2 == 0 {
                return Err(Error::BadKernelParams(format!(
                    "gaussian size must be odd, got {size}"
                )));
            }
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::BadKernelParams(format!(
                    "gaussian bandwidth must be positive, got {sigma}"
                )));
            }
            let c = (size / 2) as f64;
            let weights = (0..size * size)
                .map(|i| {
                    let r = (i / size) as f64 - c;
                    let col = (i % size) as f64 - c;
                    (-(r * r + col * col) / (2.0 * sigma * sigma)).exp()
                })
                .collect();
            normalized(size, weights, kind)
        }
        &KernelKind::Circle { diameter } => {
            if !(diameter >= 1.0 && diameter.is_finite()) {
                return Err(Error::BadKernelParams(format!(
                    "circle diameter must be >= 1, got {diameter}"
                )));
            }
            let radius = diameter / 2.0;
            let half = radius.floor() as usize;
            let size = 2 * half + 1;
            let weights = (0..size * size)
                .map(|i| {
                    let r = (i / size) as f64 - half as f64;
                    let c = (i % size) as f64 - half as f64;
                    if (r * r + c * c).sqrt() <= radius {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            normalized(size, weights, kind)
        }
        &KernelKind::Square { side } => {
            if side == 0 {
                return Err(Error::BadKernelParams("square side must be >= 1".into()));
            }
            let size = side | 1;
            let weights = (0..size * size)
                .map(|i| f64::from(u8::from(i / size < side && i % size < side)))
                .collect();
            normalized(size, weights, kind)
        }
        KernelKind::Custom { size, weights } => {
            let size = *size;
            if size % 2 == 0 || weights.len() != size * size {
                return Err(Error::BadKernelParams(format!(
                    "custom kernel needs an odd size and size^2 weights, got size {size} with {} weights",
                    weights.len()
                )));
            }
            if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
                return Err(Error::BadKernelParams(
                    "custom weights must be finite and nonnegative".into(),
                ));
            }
            let w = weights.clone();
            normalized(size, w, kind)
        }
    }
}

/// Embeds the kernel in an `height x width` zero array, rolls its center to
/// `(0, 0)` and returns the 2-D DFT as a one-band spectrum. Multiplying a band
/// spectrum by it is centered circular convolution in space.
pub fn pad_and_shift_kernel(kernel: &BlurKernel, height: usize, width: usize) -> Result<SpectrumCube> {
    let k = kernel.size();
    if k > height.min(width) {
        return Err(Error::KernelTooLarge {
            size: k,
            height,
            width,
        });
    }
    let c = kernel.center();
    let mut plane = vec![Complex64::new(0.0, 0.0); height * width];
    for r in 0..k {
        for col in 0..k {
            let rr = (r + height - c) % height;
            let cc = (col + width - c) % width;
            plane[rr * width + cc].re += kernel.weight(r, col);
        }
    }
    Fft2d::plan(height, width).forward(&mut plane);
    SpectrumCube::new(height, width, 1, plane)
}

/// Noise-free circular blur of every band with the same kernel.
pub fn blur(x: &SpectralCube, kernel: &BlurKernel) -> Result<SpectralCube> {
    let h = pad_and_shift_kernel(kernel, x.height(), x.width())?;
    blur_with_spectrum(x, h.band(0))
}

pub(crate) fn blur_with_spectrum(x: &SpectralCube, h: &[Complex64]) -> Result<SpectralCube> {
    let plan = Fft2d::plan(x.height(), x.width());
    let n = plan.len();
    let mut out = vec![0.0; x.len()];
    let (mut im_max, mut abs_max) = (0.0f64, 0.0f64);
    for b in 0..x.bands() {
        let mut spec = plan.forward_real(x.band(b));
        spec.iter_mut().zip(h).for_each(|(s, k)| *s *= k);
        let (im, abs) = plan.inverse_real(&mut spec, &mut out[b * n..(b + 1) * n]);
        im_max = im_max.max(im);
        abs_max = abs_max.max(abs);
    }
    crate::cube::fft::check_real(im_max, abs_max)?;
    x.with_data(out)
}

/// A blur kernel plus additive white Gaussian noise with a fixed seed.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationScenario {
    pub kernel: BlurKernel,
    noise_sigma: f64,
    pub seed: u64,
}

impl DegradationScenario {
    pub fn new(kernel: BlurKernel, noise_sigma: f64, seed: u64) -> Result<Self> {
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(Error::BadKernelParams(format!(
                "noise sigma must be finite and >= 0, got {noise_sigma}"
            )));
        }
        Ok(Self {
            kernel,
            noise_sigma,
            seed,
        })
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_noise(self, noise_sigma: f64) -> Result<Self> {
        Self::new(self.kernel, noise_sigma, self.seed)
    }
}

/// Serializable form of a scenario for configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub kernel: KernelKind,
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn build(&self) -> Result<DegradationScenario> {
        DegradationScenario::new(make_kernel(self.kernel.clone())?, self.noise_sigma, self.seed)
    }
}

/// Blurs `x` and adds iid `N(0, noise_sigma^2)` noise drawn from a generator
/// seeded with `scenario.seed` (bands in order, pixels row-major).
pub fn apply_degradation(x: &SpectralCube, scenario: &DegradationScenario) -> Result<SpectralCube> {
    let mut y = blur(x, &scenario.kernel)?;
    if scenario.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, scenario.noise_sigma)
            .map_err(|e| Error::BadKernelParams(e.to_string()))?;
        let mut rng = rng::stream(scenario.seed, &[]);
        y.as_mut_slice()
            .iter_mut()
            .for_each(|v| *v += normal.sample(&mut rng));
    }
    Ok(y)
}

/// The five standard blur scenarios, tagged `a` to `e`, with seed 0.
pub fn scenario_preset(tag: &str) -> Result<DegradationScenario> {
    let (kind, sigma) = match tag {
        "a" => (KernelKind::Gaussian { size: 9, sigma: 2.0 }, 0.01),
        "b" => (KernelKind::Gaussian { size: 13, sigma: 3.0 }, 0.01),
        "c" => (KernelKind::Gaussian { size: 9, sigma: 2.0 }, 0.03),
        "d" => (KernelKind::Circle { diameter: 7.0 }, 0.01),
        "e" => (KernelKind::Square { side: 5 }, 0.01),
        other => return Err(Error::UnknownScenario(other.to_string())),
    };
    DegradationScenario::new(make_kernel(kind)?, sigma, 0)
}

pub const SCENARIO_TAGS: [&str; 5] = ["a", "b", "c", "d", "e"];

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_cube(h: usize, w: usize, d: usize, seed: u64) -> SpectralCube {
        let mut rng = rng::stream(seed, &[]);
        SpectralCube::from_fn(h, w, d, |_, _, _| rng.random::<f64>())
    }

    #[test]
    fn square_five_is_uniform() {
        let k = make_kernel(KernelKind::Square { side: 5 }).unwrap();
        assert_eq!(k.size(), 5);
        assert!(k.weights().iter().all(|&w| (w - 1.0 / 25.0).abs() < 1e-15));
    }

    #[test]
    fn gaussian_nine_is_centered_and_rotation_symmetric() {
        let k = make_kernel(KernelKind::Gaussian { size: 9, sigma: 2.0 }).unwrap();
        let max = k.weights().iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(k.weight(4, 4), max);
        assert!((k.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for r in 0..9 {
            for c in 0..9 {
                assert!((k.weight(r, c) - k.weight(c, 8 - r)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn circle_kernels() {
        let unit = make_kernel(KernelKind::Circle { diameter: 1.0 }).unwrap();
        assert_eq!((unit.size(), unit.weights()), (1, &[1.0][..]));

        let seven = make_kernel(KernelKind::Circle { diameter: 7.0 }).unwrap();
        assert_eq!(seven.size(), 7);
        // (3,1) offset lies at distance sqrt(10) < 3.5, (3,2) at sqrt(13) > 3.5.
        assert!(seven.weight(0, 2) > 0.0);
        assert_eq!(seven.weight(0, 1), 0.0);
        assert!((seven.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bad_kernel_params() {
        for kind in [
            KernelKind::Gaussian { size: 4, sigma: 1.0 },
            KernelKind::Gaussian { size: 5, sigma: 0.0 },
            KernelKind::Circle { diameter: 0.5 },
            KernelKind::Square { side: 0 },
            KernelKind::Custom { size: 3, weights: vec![1.0; 4] },
            KernelKind::Custom { size: 1, weights: vec![0.0] },
        ] {
            assert!(
                matches!(make_kernel(kind.clone()), Err(Error::BadKernelParams(_))),
                "{kind:?}"
            );
        }
    }

    #[test]
    fn identity_kernel_has_unit_spectrum() {
        let h = pad_and_shift_kernel(&BlurKernel::identity(), 5, 7).unwrap();
        assert!(h
            .as_slice()
            .iter()
            .all(|z| (z - Complex64::new(1.0, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn kernel_spectrum_has_unit_dc_and_conjugate_symmetry() {
        let k = make_kernel(KernelKind::Custom {
            size: 3,
            weights: vec![0.1, 0.5, 0.0, 0.2, 1.0, 0.3, 0.0, 0.0, 0.4],
        })
        .unwrap();
        let (m, n) = (8, 6);
        let h = pad_and_shift_kernel(&k, m, n).unwrap();
        assert!((h.get(0, 0, 0) - Complex64::new(1.0, 0.0)).norm() < 1e-14);
        for r in 0..m {
            for c in 0..n {
                let z = h.get(0, r, c);
                let mirror = h.get(0, (m - r) % m, (n - c) % n);
                assert!((z - mirror.conj()).norm() < 1e-14);
            }
        }
        let sq = make_kernel(KernelKind::Square { side: 3 }).unwrap();
        let hs = pad_and_shift_kernel(&sq, 8, 8).unwrap();
        assert!((hs.get(0, 0, 0).re - 1.0).abs() < 1e-15);
    }

    #[test]
    fn kernel_too_large() {
        let k = make_kernel(KernelKind::Gaussian { size: 9, sigma: 2.0 }).unwrap();
        assert!(matches!(
            pad_and_shift_kernel(&k, 8, 16),
            Err(Error::KernelTooLarge { size: 9, .. })
        ));
        let x = SpectralCube::zeros(8, 8, 1);
        let s = DegradationScenario::new(k, 0.0, 0).unwrap();
        assert!(apply_degradation(&x, &s).is_err());
    }

    #[test]
    fn identity_noiseless_degradation_is_identity() {
        let x = random_cube(6, 9, 3, 1);
        let s = DegradationScenario::new(BlurKernel::identity(), 0.0, 3).unwrap();
        let y = apply_degradation(&x, &s).unwrap();
        for (a, b) in x.as_slice().iter().zip(y.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn constants_are_preserved() {
        let x = SpectralCube::from_fn(8, 8, 2, |_, _, _| 0.42);
        let k = make_kernel(KernelKind::Square { side: 3 }).unwrap();
        let y = apply_degradation(&x, &DegradationScenario::new(k, 0.0, 0).unwrap()).unwrap();
        assert!(y.as_slice().iter().all(|v| (v - 0.42).abs() < 1e-12));
    }

    #[test]
    fn seeded_noise_is_bitwise_reproducible() {
        let x = random_cube(16, 16, 4, 2);
        let s = scenario_preset("a").unwrap().with_seed(99);
        let y1 = apply_degradation(&x, &s).unwrap();
        let y2 = apply_degradation(&x, &s).unwrap();
        assert!(y1
            .as_slice()
            .iter()
            .zip(y2.as_slice())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        let y3 = apply_degradation(&x, &s.clone().with_seed(100)).unwrap();
        assert_ne!(y1, y3);
    }

    #[test]
    fn presets() {
        let c = scenario_preset("c").unwrap();
        assert_eq!(c.kernel.kind(), &KernelKind::Gaussian { size: 9, sigma: 2.0 });
        assert_eq!(c.noise_sigma(), 0.03);
        let e = scenario_preset("e").unwrap();
        assert_eq!(e.kernel.kind(), &KernelKind::Square { side: 5 });
        assert_eq!(e.noise_sigma(), 0.01);
        let b = scenario_preset("b").unwrap();
        assert_eq!(b.kernel.size(), 13);
        let d = scenario_preset("d").unwrap();
        assert_eq!(d.kernel.kind(), &KernelKind::Circle { diameter: 7.0 });
        assert!(matches!(scenario_preset("z"), Err(Error::UnknownScenario(_))));
    }

    #[test]
    fn scenario_spec_round_trips_through_json() {
        let spec: ScenarioSpec = serde_json::from_str(
            r#"{"kernel":{"kind":"gaussian","size":9,"sigma":2.0},"noise_sigma":0.01,"seed":4}"#,
        )
        .unwrap();
        let s = spec.build().unwrap();
        assert_eq!(s, scenario_preset("a").unwrap().with_seed(4));
    }
}
