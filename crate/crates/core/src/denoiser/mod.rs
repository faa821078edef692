//! The learnable prior `f_θ`: a plain stack of 3x3 circular convolutions with
//! ReLU between layers and per-layer spectral normalization.
//!
//! Spectral normalization is a reparameterization. Each layer keeps raw
//! weights `W` and power-iteration vectors `(u, v)` measured on the
//! convolution operator over a fixed grid. The weights used in the forward
//! pass are `s · W` with `s = min(1, cap / σ̂)` and `σ̂ = ⟨u, W ⋆ v⟩`.
//! Gradients flow through `σ̂` with `(u, v)` held constant.
//! [`DenoiserModel::spectral_normalize`] refreshes `(u, v)` and projects the raw
//! weights onto the cap in place.

mod conv;
mod persist;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cube::SpectralCube;
use crate::{rng, Error, Result};

use conv::{Geometry, TAPS};

/// Power iterations per normalization pass at initialization.
pub const DEFAULT_POWER_ITERS: usize = 30;

#[derive(Debug, Clone, PartialEq)]
struct PowerState {
    height: usize,
    width: usize,
    u: Vec<f64>,
    v: Vec<f64>,
    /// `⟨u, W ⋆ v⟩` for the current raw kernel.
    sigma: f64,
}

/// One 3x3 convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    in_channels: usize,
    out_channels: usize,
    kernel: Vec<f64>,
    bias: Vec<f64>,
    sn_cap: f64,
    sn: Option<PowerState>,
}

impl ConvLayer {
    pub fn new(in_channels: usize, out_channels: usize, kernel: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::InvalidConfig("layer channels must be positive".into()));
        }
        if kernel.len() != in_channels * out_channels * TAPS || bias.len() != out_channels {
            return Err(Error::ShapeMismatch(format!(
                "{in_channels}->{out_channels} layer needs {} kernel and {out_channels} bias values, got {} and {}",
                in_channels * out_channels * TAPS,
                kernel.len(),
                bias.len()
            )));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            bias,
            sn_cap: 1.0,
            sn: None,
        })
    }

    /// Center-tap identity (`channels -> channels`), zero bias.
    pub fn identity(channels: usize) -> Self {
        let mut kernel = vec![0.0; channels * channels * TAPS];
        for c in 0..channels {
            kernel[(c * channels + c) * TAPS + 4] = 1.0;
        }
        Self::new(channels, channels, kernel, vec![0.0; channels]).expect("consistent shapes")
    }

    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self::new(
            in_channels,
            out_channels,
            vec![0.0; in_channels * out_channels * TAPS],
            vec![0.0; out_channels],
        )
        .expect("consistent shapes")
    }

    pub fn with_cap(mut self, cap: f64) -> Self {
        self.sn_cap = cap;
        self
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Raw (pre-normalization) kernel, `[out][in][3][3]`.
    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn cap(&self) -> f64 {
        self.sn_cap
    }

    pub fn set_cap(&mut self, cap: f64) {
        self.sn_cap = cap;
    }

    pub fn set_kernel(&mut self, kernel: &[f64]) {
        assert_eq!(kernel.len(), self.kernel.len());
        self.kernel.copy_from_slice(kernel);
        self.refresh_sigma();
    }

    pub fn set_bias(&mut self, bias: &[f64]) {
        assert_eq!(bias.len(), self.bias.len());
        self.bias.copy_from_slice(bias);
    }

    /// Current spectral-norm estimate `σ̂` of the raw operator, if measured.
    pub fn sigma(&self) -> Option<f64> {
        self.sn.as_ref().map(|s| s.sigma)
    }

    /// The normalization factor applied to the raw kernel in the forward pass.
    pub fn scale(&self) -> f64 {
        match &self.sn {
            Some(s) if s.sigma > self.sn_cap => self.sn_cap / s.sigma,
            _ => 1.0,
        }
    }

    pub fn effective_kernel(&self) -> Vec<f64> {
        let s = self.scale();
        self.kernel.iter().map(|k| k * s).collect()
    }

    fn geometry(&self, h: usize, w: usize) -> Geometry {
        Geometry {
            cin: self.in_channels,
            cout: self.out_channels,
            h,
            w,
        }
    }

    fn refresh_sigma(&mut self) {
        if let Some(state) = self.sn.take() {
            let g = self.geometry(state.height, state.width);
            let av = conv::forward(g, &self.kernel, 1.0, None, &state.v);
            let sigma = dot(&state.u, &av);
            self.sn = Some(PowerState { sigma, ..state });
        }
    }

    /// Runs power iteration on the raw operator over an `h x w` grid. The
    /// vectors are warm-started when the grid matches; otherwise they start
    /// from the exact top singular direction found in the Fourier domain.
    /// Returns `σ̂`.
    pub fn power_iteration(&mut self, iters: usize, h: usize, w: usize) -> f64 {
        let g = self.geometry(h, w);
        let mut v = match self.sn.take() {
            Some(s) if s.height == h && s.width == w => s.v,
            _ => conv::spectral_norm(g, &self.kernel).1,
        };
        normalize(&mut v);
        for _ in 0..iters {
            let mut u = conv::forward(g, &self.kernel, 1.0, None, &v);
            if normalize(&mut u) == 0.0 {
                break;
            }
            v = conv::adjoint(g, &self.kernel, 1.0, &u);
            if normalize(&mut v) == 0.0 {
                break;
            }
        }
        let mut u = conv::forward(g, &self.kernel, 1.0, None, &v);
        let sigma = normalize(&mut u);
        self.sn = Some(PowerState {
            height: h,
            width: w,
            u,
            v,
            sigma,
        });
        sigma
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Starting weights of [`DenoiserModel::init`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    /// Fan-in scaled uniform weights.
    Uniform,
    /// Center-tap identity on the first `min(bands, width)` channels of every
    /// layer plus uniform weights shrunk by `jitter`. On nonnegative inputs the
    /// ReLUs pass the identity path unchanged, so the network starts near
    /// `f(x) = x`.
    #[default]
    Identity,
}

/// Architecture and initialization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Spectral bands (input and output channels).
    pub bands: usize,
    /// Interior channel width.
    pub width: usize,
    /// Number of convolution layers.
    pub depth: usize,
    /// Per-layer Lipschitz cap used by spectral normalization.
    pub layer_cap: f64,
    /// Intended end-to-end Lipschitz bound.
    pub mu_target: f64,
    /// Grid on which layer spectral norms are measured.
    pub sn_grid: (usize, usize),
    pub power_iters: usize,
    pub init: InitScheme,
    /// Scale of the random part under [`InitScheme::Identity`].
    pub jitter: f64,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            bands: 4,
            width: 8,
            depth: 6,
            layer_cap: 1.0,
            mu_target: 1.0,
            sn_grid: (16, 16),
            power_iters: DEFAULT_POWER_ITERS,
            init: InitScheme::Identity,
            jitter: 0.1,
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    /// Full-size architecture: six layers with 154 interior filters.
    pub fn full_scale(bands: usize) -> Self {
        Self {
            bands,
            width: 154,
            ..Self::default()
        }
    }
}

/// Gradients of a scalar with respect to every layer's raw kernel and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrads>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ParamGrads {
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.kernel.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.flatten().iter().all(|&g| g == 0.0)
    }
}

/// Activations recorded by a forward pass for reverse-mode use.
struct Tape {
    /// Input of every layer; entry 0 is the network input.
    inputs: Vec<Vec<f64>>,
    output: Vec<f64>,
}

/// The convolutional denoiser `f_θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    layers: Vec<ConvLayer>,
    relu: bool,
    mu_target: f64,
    sn_grid: (usize, usize),
}

impl DenoiserModel {
    /// Assembles a model from explicit layers. `relu` enables the activation
    /// between layers (never after the last one).
    pub fn new(layers: Vec<ConvLayer>, relu: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("model needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(Error::ShapeMismatch(format!(
                    "layer emits {} channels but the next expects {}",
                    pair[0].out_channels, pair[1].in_channels
                )));
            }
        }
        if layers[0].in_channels != layers[layers.len() - 1].out_channels {
            return Err(Error::ShapeMismatch(
                "model input and output channel counts differ".into(),
            ));
        }
        Ok(Self {
            layers,
            relu,
            mu_target: 1.0,
            sn_grid: (16, 16),
        })
    }

    /// Weights from `cfg.init` followed by one spectral normalization pass.
    pub fn init(cfg: &DenoiserConfig) -> Result<Self> {
        if cfg.bands == 0 || cfg.width == 0 || cfg.depth == 0 {
            return Err(Error::InvalidConfig(
                "bands, width and depth must be positive".into(),
            ));
        }
        if !(cfg.jitter >= 0.0 && cfg.jitter.is_finite()) {
            return Err(Error::InvalidConfig("init jitter must be finite and nonnegative".into()));
        }
        if !(cfg.layer_cap > 0.0) || cfg.sn_grid.0 == 0 || cfg.sn_grid.1 == 0 {
            return Err(Error::InvalidConfig(
                "layer cap and spectral-norm grid must be positive".into(),
            ));
        }
        let mut rng = rng::stream(cfg.seed, &[0x1417]);
        let layers = (0..cfg.depth)
            .map(|l| {
                let cin = if l == 0 { cfg.bands } else { cfg.width };
                let cout = if l + 1 == cfg.depth { cfg.bands } else { cfg.width };
                let mut bound = 1.0 / ((cin * TAPS) as f64).sqrt();
                if cfg.init == InitScheme::Identity {
                    bound *= cfg.jitter;
                }
                let mut kernel: Vec<f64> = (0..cin * cout * TAPS)
                    .map(|_| if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 })
                    .collect();
                if cfg.init == InitScheme::Identity {
                    for c in 0..cin.min(cout).min(cfg.bands) {
                        kernel[(c * cin + c) * TAPS + TAPS / 2] += 1.0;
                    }
                }
                ConvLayer::new(cin, cout, kernel, vec![0.0; cout]).map(|l| l.with_cap(cfg.layer_cap))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut model = Self::new(layers, true)?
            .with_sn_grid(cfg.sn_grid.0, cfg.sn_grid.1);
        model.mu_target = cfg.mu_target;
        model.spectral_normalize(cfg.power_iters);
        Ok(model)
    }

    /// Single center-tap identity layer (`f(x) = x`).
    pub fn identity(bands: usize) -> Self {
        Self::new(vec![ConvLayer::identity(bands)], false).expect("valid")
    }

    /// Single all-zero layer (`f(x) = 0`).
    pub fn zero(bands: usize) -> Self {
        Self::new(vec![ConvLayer::zeros(bands, bands)], false).expect("valid")
    }

    pub fn with_sn_grid(mut self, height: usize, width: usize) -> Self {
        self.sn_grid = (height, width);
        self
    }

    pub fn with_mu_target(mut self, mu: f64) -> Self {
        self.mu_target = mu;
        self
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvLayer] {
        &mut self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn bands(&self) -> usize {
        self.layers[0].in_channels
    }

    pub fn relu(&self) -> bool {
        self.relu
    }

    pub fn mu_target(&self) -> f64 {
        self.mu_target
    }

    pub fn sn_grid(&self) -> (usize, usize) {
        self.sn_grid
    }

    /// Sets every layer's cap to `cap` (the end-to-end bound becomes `cap^depth`).
    pub fn set_layer_caps(&mut self, cap: f64) {
        self.layers.iter_mut().for_each(|l| l.set_cap(cap));
    }

    /// Multiplies the last layer's kernel and bias by `factor`.
    pub fn scale_output(&mut self, factor: f64) {
        let last = self.layers.last_mut().expect("non-empty");
        let k: Vec<f64> = last.kernel.iter().map(|v| v * factor).collect();
        let b: Vec<f64> = last.bias.iter().map(|v| v * factor).collect();
        last.set_kernel(&k);
        last.set_bias(&b);
    }

    fn check_input(&self, x: &SpectralCube) -> Result<()> {
        if x.bands() != self.bands() {
            return Err(Error::ShapeMismatch(format!(
                "denoiser expects {} bands, got {}",
                self.bands(),
                x.bands()
            )));
        }
        Ok(())
    }

    fn is_hidden(&self, layer: usize) -> bool {
        self.relu && layer + 1 < self.layers.len()
    }

    fn run(&self, x: &SpectralCube, keep: bool) -> Tape {
        let (h, w) = (x.height(), x.width());
        let mut inputs = Vec::with_capacity(if keep { self.layers.len() } else { 0 });
        let mut act = x.as_slice().to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = conv::forward(
                layer.geometry(h, w),
                &layer.kernel,
                layer.scale(),
                Some(&layer.bias),
                &act,
            );
            if self.is_hidden(l) {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            if keep {
                inputs.push(std::mem::replace(&mut act, out));
            } else {
                act = out;
            }
        }
        Tape { inputs, output: act }
    }

    /// `f_θ(x)`.
    pub fn forward(&self, x: &SpectralCube) -> Result<SpectralCube> {
        self.check_input(x)?;
        x.with_data(self.run(x, false).output)
    }

    /// Reverse pass shared by both VJPs. Returns the input cotangent and, when
    /// requested, the parameter gradients.
    fn backward(&self, x: &SpectralCube, cotangent: &SpectralCube, want_params: bool) -> Result<(SpectralCube, Option<ParamGrads>)> {
        self.check_input(x)?;
        x.ensure_same_shape(cotangent, "denoiser cotangent")?;
        let (h, w) = (x.height(), x.width());
        let tape = self.run(x, true);
        let mut grad = cotangent.as_slice().to_vec();
        let mut layer_grads = Vec::new();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let g = layer.geometry(h, w);
            if self.is_hidden(l) {
                // Output of a hidden layer is the next layer's input.
                let post = &tape.inputs[l + 1];
                grad.iter_mut()
                    .zip(post)
                    .for_each(|(gv, &p)| if p <= 0.0 { *gv = 0.0 });
            }
            if want_params {
                let mut gk = conv::kernel_grad(g, &grad, &tape.inputs[l]);
                let gb = conv::bias_grad(layer.out_channels, g.plane(), &grad);
                self.through_normalization(layer, &mut gk);
                layer_grads.push(LayerGrads { kernel: gk, bias: gb });
            }
            grad = conv::adjoint(g, &layer.kernel, layer.scale(), &grad);
        }
        layer_grads.reverse();
        let input_grad = x.with_data(grad)?;
        Ok((input_grad, want_params.then_some(ParamGrads { layers: layer_grads })))
    }

    /// Maps a gradient with respect to the effective kernel `s·W` onto the raw
    /// kernel `W`, with the power-iteration vectors held constant.
    fn through_normalization(&self, layer: &ConvLayer, gk: &mut [f64]) {
        let s = layer.scale();
        if s >= 1.0 {
            return;
        }
        let state = layer.sn.as_ref().expect("scale < 1 implies a power state");
        let sg = layer.geometry(state.height, state.width);
        let dsigma = conv::kernel_grad(sg, &state.u, &state.v);
        let inner = dot(gk, &layer.kernel);
        let coef = s * inner / state.sigma;
        gk.iter_mut()
            .zip(&dsigma)
            .for_each(|(g, d)| *g = s * *g - coef * d);
    }

    /// `(∂f/∂x)ᵀ · cotangent` at `x` (ReLU subgradient 0 at 0).
    pub fn vjp_input(&self, x: &SpectralCube, cotangent: &SpectralCube) -> Result<SpectralCube> {
        Ok(self.backward(x, cotangent, false)?.0)
    }

    /// `(∂f/∂θ)ᵀ · cotangent` at `x`, with respect to the raw parameters.
    pub fn vjp_params(&self, x: &SpectralCube, cotangent: &SpectralCube) -> Result<ParamGrads> {
        Ok(self.backward(x, cotangent, true)?.1.expect("requested"))
    }

    /// Both VJPs from a single forward recording.
    pub fn vjp(&self, x: &SpectralCube, cotangent: &SpectralCube) -> Result<(SpectralCube, ParamGrads)> {
        let (gx, gp) = self.backward(x, cotangent, true)?;
        Ok((gx, gp.expect("requested")))
    }

    /// Measures every layer's spectral norm with `power_iters` warm-started
    /// power iterations and rescales raw weights by `min(1, cap / σ̂)`.
    /// Returns the per-layer factors.
    pub fn spectral_normalize(&mut self, power_iters: usize) -> Vec<f64> {
        let (h, w) = self.sn_grid;
        self.layers
            .iter_mut()
            .map(|layer| {
                let sigma = layer.power_iteration(power_iters, h, w);
                let factor = if sigma > layer.sn_cap {
                    layer.sn_cap / sigma
                } else {
                    1.0
                };
                if factor != 1.0 {
                    layer.kernel.iter_mut().for_each(|k| *k *= factor);
                    if let Some(state) = layer.sn.as_mut() {
                        state.sigma *= factor;
                    }
                }
                factor
            })
            .collect()
    }

    /// Empirical lower bound on the Lipschitz constant of `f_θ` over
    /// `[0,1]`-valued inputs on the spectral-norm grid: the largest ratio
    /// `‖f(x₁) − f(x₂)‖ / ‖x₁ − x₂‖` over `trials` random pairs, refined by
    /// `trials` small-perturbation pairs steered by power iteration on the
    /// local Jacobian.
    pub fn estimate_lipschitz(&self, trials: usize, seed: u64) -> Result<f64> {
        let (h, w) = self.sn_grid;
        let d = self.bands();
        let mut rng = rng::stream(seed, &[0x11b]);
        let uniform = |rng: &mut rng::StreamRng| {
            SpectralCube::from_fn(h, w, d, |_, _, _| rng.random::<f64>())
        };
        let ratio = |a: &SpectralCube, fa: &SpectralCube, b: &SpectralCube, fb: &SpectralCube| {
            let num: f64 = fa.as_slice().iter().zip(fb.as_slice()).map(|(p, q)| (p - q) * (p - q)).sum();
            let den: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(p, q)| (p - q) * (p - q)).sum();
            if den > 0.0 {
                (num / den).sqrt()
            } else {
                0.0
            }
        };
        let mut best = 0.0f64;
        for _ in 0..trials {
            let x1 = uniform(&mut rng);
            let x2 = uniform(&mut rng);
            best = best.max(ratio(&x1, &self.forward(&x1)?, &x2, &self.forward(&x2)?));
        }

        const CHAIN: usize = 10;
        const STEP: f64 = 1e-4;
        let mut evaluations = 0;
        while evaluations < trials {
            let x = uniform(&mut rng);
            let fx = self.forward(&x)?;
            let mut dir: Vec<f64> = (0..x.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            normalize(&mut dir);
            for _ in 0..CHAIN.min(trials - evaluations) {
                evaluations += 1;
                let xp = x.with_data(x.as_slice().iter().zip(&dir).map(|(a, b)| a + STEP * b).collect())?;
                let fxp = self.forward(&xp)?;
                best = best.max(ratio(&xp, &fxp, &x, &fx));
                let jd = x.with_data(
                    fxp.as_slice().iter().zip(fx.as_slice()).map(|(p, q)| (p - q) / STEP).collect(),
                )?;
                dir = self.vjp_input(&x, &jd)?.into_vec();
                if normalize(&mut dir) == 0.0 {
                    break;
                }
            }
        }
        Ok(best)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.kernel.len() + l.bias.len()).sum()
    }

    /// Raw parameters, layer by layer (kernel then bias).
    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.kernel.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "model has {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let nk = layer.kernel.len();
            let nb = layer.bias.len();
            layer.set_kernel(&params[offset..offset + nk]);
            layer.set_bias(&params[offset + nk..offset + nk + nb]);
            offset += nk + nb;
        }
        Ok(())
    }
}

pub use persist::{load_model, save_model};
