//! The HQS iteration map `g(x) = DC(f_θ(x))`, where the data-consistency step
//! `DC` solves `min_x ½‖y − H x‖² + (b/2)‖x − z‖²` in closed form per frequency:
//! `X̃ = (conj(H̃)·Ỹ + b·Z̃) / (|H̃|² + b)`.

use num_complex::Complex64;

use crate::cube::fft::{check_real_scaled, Fft2d};
use crate::cube::{SpectralCube, SpectrumCube};
use crate::degrade::{blur_with_spectrum, pad_and_shift_kernel, BlurKernel};
use crate::denoiser::DenoiserModel;
use crate::{Error, Result};

/// Frequency-domain operators cached for one `(kernel, y)` pair.
#[derive(Debug, Clone)]
pub struct HqsContext {
    y: SpectralCube,
    h: Vec<Complex64>,
    h2: Vec<f64>,
    /// `conj(H̃)·Ỹ`, band-major.
    hty: SpectrumCube,
    b: f64,
    lambda_reg: f64,
}

impl HqsContext {
    pub fn new(y: &SpectralCube, kernel: &BlurKernel, b: f64) -> Result<Self> {
        let h = pad_and_shift_kernel(kernel, y.height(), y.width())?
            .band(0)
            .to_vec();
        Self::from_spectrum(y, h, b)
    }

    /// Builds the context from an explicit kernel spectrum (length `M·N`).
    pub fn from_spectrum(y: &SpectralCube, h: Vec<Complex64>, b: f64) -> Result<Self> {
        check_b(b)?;
        let plan = Fft2d::plan(y.height(), y.width());
        if h.len() != plan.len() {
            return Err(Error::ShapeMismatch(format!(
                "kernel spectrum has {} entries for a {}x{} grid",
                h.len(),
                y.height(),
                y.width()
            )));
        }
        let h2 = h.iter().map(|z| z.norm_sqr()).collect();
        let mut hty = Vec::with_capacity(y.len());
        for band in 0..y.bands() {
            let spec = plan.forward_real(y.band(band));
            hty.extend(spec.iter().zip(&h).map(|(s, k)| k.conj() * s));
        }
        let hty = SpectrumCube::new(y.height(), y.width(), y.bands(), hty)?;
        Ok(Self {
            y: y.clone(),
            h,
            h2,
            hty,
            b,
            lambda_reg: 0.0,
        })
    }

    /// Records the regularization weight. It has no effect on the iteration:
    /// the prior's weight is absorbed into the learned denoiser.
    pub fn with_lambda(mut self, lambda_reg: f64) -> Self {
        self.lambda_reg = lambda_reg;
        self
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn set_b(&mut self, b: f64) -> Result<()> {
        check_b(b)?;
        self.b = b;
        Ok(())
    }

    pub fn lambda_reg(&self) -> f64 {
        self.lambda_reg
    }

    pub fn y(&self) -> &SpectralCube {
        &self.y
    }

    pub fn kernel_spectrum(&self) -> &[Complex64] {
        &self.h
    }

    /// `|H̃|²`, the eigenvalues of `HᵀH`.
    pub fn kernel_power(&self) -> &[f64] {
        &self.h2
    }

    fn check(&self, z: &SpectralCube, what: &str) -> Result<()> {
        self.y.ensure_same_shape(z, what)
    }

    /// Applies `spec ↦ F⁻¹(op(F(band)))` to every band of `x`.
    fn per_frequency<F>(&self, x: &SpectralCube, mut op: F) -> Result<SpectralCube>
    where
        F: FnMut(usize, usize, Complex64) -> Complex64,
    {
        let plan = Fft2d::plan(x.height(), x.width());
        let n = plan.len();
        let mut out = vec![0.0; x.len()];
        let (mut im_max, mut abs_max) = (0.0f64, 0.0f64);
        for band in 0..x.bands() {
            let mut spec = plan.forward_real(x.band(band));
            spec.iter_mut()
                .enumerate()
                .for_each(|(k, s)| *s = op(band, k, *s));
            let (im, abs) = plan.inverse_real(&mut spec, &mut out[band * n..(band + 1) * n]);
            im_max = im_max.max(im);
            abs_max = abs_max.max(abs);
        }
        let reference = max_abs(x.as_slice()).max(max_abs(self.y.as_slice()));
        check_real_scaled(im_max, abs_max, reference)?;
        x.with_data(out)
    }

    /// Exact minimizer of `½‖y − Hx‖² + (b/2)‖x − z‖²` under circular boundaries.
    pub fn data_consistency(&self, z: &SpectralCube) -> Result<SpectralCube> {
        self.check(z, "data-consistency input")?;
        let n = self.h2.len();
        let b = self.b;
        self.per_frequency(z, |band, k, zs| {
            (self.hty.as_slice()[band * n + k] + zs * b) / (self.h2[k] + b)
        })
    }

    /// One application of the iteration map: `DC(f_θ(x))`.
    pub fn iterate(&self, x: &SpectralCube, model: &DenoiserModel) -> Result<SpectralCube> {
        self.check(x, "iterate input")?;
        self.data_consistency(&model.forward(x)?)
    }

    /// `½‖y − Hx‖² + (b/2)‖z − x‖²`. The prior term is implicit in the
    /// denoiser and is not included.
    pub fn objective(&self, x: &SpectralCube, z: &SpectralCube) -> Result<f64> {
        self.check(x, "objective x")?;
        self.check(z, "objective z")?;
        let hx = blur_with_spectrum(x, &self.h)?;
        let data: f64 = self
            .y
            .as_slice()
            .iter()
            .zip(hx.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let coupling: f64 = z
            .as_slice()
            .iter()
            .zip(x.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(0.5 * data + 0.5 * self.b * coupling)
    }

    /// Transpose Jacobian of the data-consistency step with respect to `z`.
    /// The step is affine in `z` with a real symmetric multiplier
    /// `b / (|H̃|² + b)`, so this also equals the forward Jacobian.
    pub fn consistency_adjoint(&self, cotangent: &SpectralCube) -> Result<SpectralCube> {
        self.check(cotangent, "consistency cotangent")?;
        let b = self.b;
        self.per_frequency(cotangent, |_, k, s| s * (b / (self.h2[k] + b)))
    }

    /// `∂ DC(z) / ∂b` at `z`.
    pub fn penalty_derivative(&self, z: &SpectralCube) -> Result<SpectralCube> {
        self.check(z, "penalty derivative input")?;
        let n = self.h2.len();
        let b = self.b;
        self.per_frequency(z, |band, k, zs| {
            let den = self.h2[k] + b;
            (zs * den - (self.hty.as_slice()[band * n + k] + zs * b)) / (den * den)
        })
    }

    /// `(∂g/∂x)ᵀ w` at `x`: the consistency adjoint followed by the denoiser VJP.
    pub fn iterate_vjp(&self, x: &SpectralCube, w: &SpectralCube, model: &DenoiserModel) -> Result<SpectralCube> {
        model.vjp_input(x, &self.consistency_adjoint(w)?)
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn check_b(b: f64) -> Result<()> {
    if !(b > 0.0 && b.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "penalty b must be positive and finite, got {b}"
        )));
    }
    Ok(())
}

/// `softplus(ρ) = ln(1 + eᵖ)`, the positive reparameterization of `b`.
pub fn softplus(rho: f64) -> f64 {
    if rho > 30.0 {
        rho + (-rho).exp().ln_1p()
    } else {
        rho.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `b > 0`.
pub fn softplus_inv(b: f64) -> f64 {
    if b > 30.0 {
        b + (-(-b).exp_m1()).ln()
    } else {
        b.exp_m1().ln()
    }
}

/// Derivative of [`softplus`], the logistic function.
pub fn softplus_grad(rho: f64) -> f64 {
    1.0 / (1.0 + (-rho).exp())
}
