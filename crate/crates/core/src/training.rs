//! Training regimes for the prior inside the HQS map.
//!
//! * Pre-training: the denoiser alone on clean cubes plus Gaussian noise.
//! * DEQ: the loss is taken at the fixed point `x⋆ = g(x⋆)`. Its gradient is
//!   `(∂g/∂θ)ᵀ δ⋆` where `δ⋆ = (∂g/∂x)ᵀ δ⋆ + (x⋆ − x)` is found with the same
//!   fixed-point engine as the forward pass.
//! * DU: `K` explicit iterations from `x₀ = y`, differentiated exactly in
//!   reverse order.
//! * PnP: the pre-trained prior run inside the HQS map without end-to-end
//!   tuning.
//!
//! `b` is trained through `b = softplus(ρ)`. The per-sample loss is
//! `½‖x̂ − x‖²`, averaged over a batch.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cube::SpectralCube;
use crate::degrade::{apply_degradation, BlurKernel, DegradationScenario};
use crate::denoiser::{save_model, DenoiserModel};
use crate::fixedpoint::{solve, solve_hqs, FixedPointConfig, FixedPointTrace};
use crate::hqs::{softplus, softplus_grad, softplus_inv, HqsContext};
use crate::{metrics, rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    /// One bias-corrected update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grads[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grads[i] * grads[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Pretrain,
    #[default]
    Deq,
    Du,
    Pnp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    /// `(epochs, rate)` segments applied in order; the last rate persists.
    pub lr_schedule: Vec<(usize, f64)>,
    /// Unroll depth for DU.
    pub unroll_k: usize,
    pub fixed_point: FixedPointConfig,
    /// Iteration budget of the backward solve; `None` reuses the forward one.
    pub backward_max_iters: Option<usize>,
    pub optimizer: AdamConfig,
    /// Pre-training noise standard deviation range on the `[0,1]` scale.
    pub noise_range: (f64, f64),
    /// Initial penalty; `None` means `1.5 · mu_target` of the model.
    pub b_init: Option<f64>,
    pub learn_b: bool,
    /// Power iterations per spectral-normalization pass after each step.
    pub power_iters: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Deq,
            epochs: 30,
            batch_size: 4,
            lr_schedule: vec![(20, 1e-3), (10, 1e-4)],
            unroll_k: 10,
            fixed_point: FixedPointConfig::default(),
            backward_max_iters: None,
            optimizer: AdamConfig::default(),
            noise_range: (0.2 / 255.0, 10.0 / 255.0),
            b_init: None,
            learn_b: true,
            power_iters: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The full schedule: 40 epochs at 1e-3 then 150 at 1e-4, batch 6, K = 10.
    pub fn full_scale(mode: TrainMode) -> Self {
        Self {
            mode,
            epochs: 190,
            batch_size: 6,
            lr_schedule: vec![(40, 1e-3), (150, 1e-4)],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.mode == TrainMode::Du && self.unroll_k == 0 {
            return Err(Error::InvalidConfig("unroll_k must be at least 1".into()));
        }
        if self.lr_schedule.is_empty() || self.lr_schedule.iter().any(|&(_, r)| !(r > 0.0)) {
            return Err(Error::InvalidConfig("lr_schedule needs positive rates".into()));
        }
        let (lo, hi) = self.noise_range;
        if !(lo >= 0.0 && hi >= lo) {
            return Err(Error::InvalidConfig("noise_range must satisfy 0 <= lo <= hi".into()));
        }
        if let Some(b) = self.b_init {
            if !(b > 0.0) {
                return Err(Error::InvalidConfig("b_init must be positive".into()));
            }
        }
        self.fixed_point.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut start = 0;
        for &(len, rate) in &self.lr_schedule {
            if epoch < start + len {
                return rate;
            }
            start += len;
        }
        self.lr_schedule.last().map(|s| s.1).unwrap_or(1e-3)
    }

    fn backward_cfg(&self) -> FixedPointConfig {
        let mut cfg = self.fixed_point.clone();
        if let Some(n) = self.backward_max_iters {
            cfg.max_iters = n;
        }
        cfg.keep_iterates = false;
        cfg
    }

    pub fn initial_b(&self, model: &DenoiserModel) -> f64 {
        self.b_init.unwrap_or(1.5 * model.mu_target())
    }
}

/// Clean cubes with their degraded observations under one blur kernel.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    pub kernel: BlurKernel,
    pub clean: Vec<SpectralCube>,
    pub degraded: Vec<SpectralCube>,
}

impl PairedDataset {
    /// Degrades cube `i` with noise seed `derive_seed(scenario.seed, [i])`.
    pub fn degrade(clean: Vec<SpectralCube>, scenario: &DegradationScenario) -> Result<Self> {
        let degraded = clean
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let s = scenario.clone().with_seed(rng::derive_seed(scenario.seed, &[i as u64]));
                apply_degradation(x, &s)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kernel: scenario.kernel.clone(),
            clean,
            degraded,
        })
    }

    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            kernel: self.kernel.clone(),
            clean: self.clean[range.clone()].to_vec(),
            degraded: self.degraded[range].to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub loss_history: Vec<f64>,
    pub val_psnr: Vec<f64>,
    pub model: DenoiserModel,
    pub b: f64,
    pub checkpoints: Vec<PathBuf>,
    /// Backward solves that stopped above tolerance.
    pub backward_warnings: usize,
}

fn residual(a: &SpectralCube, b: &SpectralCube) -> Vec<f64> {
    a.as_slice().iter().zip(b.as_slice()).map(|(p, q)| p - q).collect()
}

fn half_sq(v: &[f64]) -> f64 {
    0.5 * v.iter().map(|x| x * x).sum::<f64>()
}

/// Loss and gradient of `½‖f(x + σw) − x‖²` with respect to the raw parameters.
pub fn pretrain_loss_grad(model: &DenoiserModel, clean: &SpectralCube, noisy: &SpectralCube) -> Result<(f64, Vec<f64>)> {
    let out = model.forward(noisy)?;
    let r = clean.with_data(residual(&out, clean))?;
    let loss = half_sq(r.as_slice());
    Ok((loss, model.vjp_params(noisy, &r)?.flatten()))
}

/// DEQ loss at the fixed point and its implicit gradient.
#[derive(Debug, Clone)]
pub struct DeqGrad {
    pub loss: f64,
    pub params: Vec<f64>,
    /// `∂loss/∂b`.
    pub b: f64,
    pub x_star: SpectralCube,
    pub forward: FixedPointTrace,
    pub backward: FixedPointTrace,
    /// False when the backward solve stopped above tolerance; the gradient is
    /// still returned.
    pub backward_converged: bool,
}

pub fn deq_loss_grad(
    model: &DenoiserModel,
    b: f64,
    kernel: &BlurKernel,
    clean: &SpectralCube,
    degraded: &SpectralCube,
    forward_cfg: &FixedPointConfig,
    backward_cfg: &FixedPointConfig,
) -> Result<DeqGrad> {
    let ctx = HqsContext::new(degraded, kernel, b)?;
    let (x_star, forward) = solve_hqs(&ctx, model, degraded, forward_cfg)?;
    let r = residual(&x_star, clean);
    let loss = half_sq(&r);

    let delta_map = |d: &[f64]| -> Result<Vec<f64>> {
        let jt = ctx.iterate_vjp(&x_star, &x_star.with_data(d.to_vec())?, model)?;
        Ok(jt.as_slice().iter().zip(&r).map(|(a, b)| a + b).collect())
    };
    let (delta, backward) = if r.iter().all(|&v| v == 0.0) {
        (r.clone(), FixedPointTrace { converged: true, ..Default::default() })
    } else {
        solve(delta_map, &r, backward_cfg)?
    };
    let delta = x_star.with_data(delta)?;
    let z = model.forward(&x_star)?;
    let params = model
        .vjp_params(&x_star, &ctx.consistency_adjoint(&delta)?)?
        .flatten();
    let grad_b = ctx.penalty_derivative(&z)?.dot(&delta);
    let backward_converged = backward.converged;
    Ok(DeqGrad {
        loss,
        params,
        b: grad_b,
        x_star,
        forward,
        backward,
        backward_converged,
    })
}

/// `K` explicit HQS iterations from `x₀ = y`, keeping every iterate.
pub fn unroll(ctx: &HqsContext, model: &DenoiserModel, k: usize) -> Result<Vec<SpectralCube>> {
    let mut xs = Vec::with_capacity(k + 1);
    xs.push(ctx.y().clone());
    for i in 0..k {
        let next = ctx.iterate(&xs[i], model)?;
        xs.push(next);
    }
    Ok(xs)
}

/// Loss after `k` unrolled iterations with exact reverse-mode gradients
/// `(loss, ∂/∂θ, ∂/∂b)`.
pub fn du_loss_grad(
    model: &DenoiserModel,
    b: f64,
    kernel: &BlurKernel,
    clean: &SpectralCube,
    degraded: &SpectralCube,
    k: usize,
) -> Result<(f64, Vec<f64>, f64)> {
    let ctx = HqsContext::new(degraded, kernel, b)?;
    let xs = unroll(&ctx, model, k)?;
    let mut bar = clean.with_data(residual(&xs[k], clean))?;
    let loss = half_sq(bar.as_slice());
    let mut params = vec![0.0; model.num_params()];
    let mut grad_b = 0.0;
    for x in xs[..k].iter().rev() {
        let z = model.forward(x)?;
        grad_b += ctx.penalty_derivative(&z)?.dot(&bar);
        let (gx, gp) = model.vjp(x, &ctx.consistency_adjoint(&bar)?)?;
        params.iter_mut().zip(gp.flatten()).for_each(|(p, g)| *p += g);
        bar = gx;
    }
    Ok((loss, params, grad_b))
}

/// Plug-and-play restoration: the HQS map with a fixed prior and penalty.
/// Zero iterations return `y`.
pub fn infer_pnp(
    y: &SpectralCube,
    kernel: &BlurKernel,
    model: &DenoiserModel,
    b: f64,
    iters: usize,
) -> Result<(SpectralCube, FixedPointTrace)> {
    let ctx = HqsContext::new(y, kernel, b)?;
    if iters == 0 {
        return Ok((y.clone(), FixedPointTrace::default()));
    }
    let cfg = FixedPointConfig::default().with_max_iters(iters);
    solve_hqs(&ctx, model, y, &cfg)
}

/// Mean PSNR of restorations produced by `restore` over a paired dataset.
pub fn mean_psnr<F>(data: &PairedDataset, restore: F) -> Result<f64>
where
    F: Fn(&SpectralCube) -> Result<SpectralCube> + Sync,
{
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let scores = (0..data.len())
        .into_par_iter()
        .map(|i| metrics::psnr(&restore(&data.degraded[i])?, &data.clean[i]))
        .collect::<Result<Vec<_>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

pub fn eval_deq(data: &PairedDataset, model: &DenoiserModel, b: f64, cfg: &FixedPointConfig) -> Result<f64> {
    mean_psnr(data, |y| Ok(crate::fixedpoint::infer(y, &data.kernel, model, b, cfg)?.0))
}

pub fn eval_du(data: &PairedDataset, model: &DenoiserModel, b: f64, k: usize) -> Result<f64> {
    mean_psnr(data, |y| {
        let ctx = HqsContext::new(y, &data.kernel, b)?;
        Ok(unroll(&ctx, model, k)?.pop().expect("k + 1 iterates"))
    })
}

pub fn eval_degraded(data: &PairedDataset) -> Result<f64> {
    mean_psnr(data, |y| Ok(y.clone()))
}

/// Training-state record written next to each checkpoint's weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointState {
    pub epoch: usize,
    pub b: f64,
    pub rho: f64,
    pub loss: f64,
    pub optimizer_steps: u64,
    /// Little-endian f64 file holding Adam's first then second moments.
    pub optimizer_moments: String,
}

fn write_checkpoint(dir: &Path, epoch: usize, model: &DenoiserModel, adam: &Adam, b: f64, rho: f64, loss: f64) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = dir.join(format!("epoch_{epoch:04}"));
    save_model(model, &stem)?;
    let moments_path = stem.with_extension("adam.bin");
    let (m, v) = adam.moments();
    let bytes: Vec<u8> = m.iter().chain(v).flat_map(|x| x.to_le_bytes()).collect();
    std::fs::write(&moments_path, bytes).map_err(|e| Error::io(&moments_path, e))?;
    let state = CheckpointState {
        epoch,
        b,
        rho,
        loss,
        optimizer_steps: adam.steps(),
        optimizer_moments: moments_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    let state_path = stem.with_extension("state.json");
    std::fs::write(&state_path, serde_json::to_vec_pretty(&state)?).map_err(|e| Error::io(&state_path, e))?;
    Ok(stem)
}

/// Options shared by the training loops that are not part of the optimization itself.
#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    pub validation: Option<&'a PairedDataset>,
    pub checkpoint_dir: Option<&'a Path>,
}

/// Per-sample gradient: `(loss, flattened θ gradient, ∂/∂b, backward converged)`.
type SampleGrad = (f64, Vec<f64>, f64, bool);

/// Shared mini-batch loop. `sample` evaluates one item for the current
/// parameters; `validate` scores the model after each epoch.
fn run_loop<S, V>(
    count: usize,
    mut model: DenoiserModel,
    cfg: &TrainConfig,
    learn_b: bool,
    opts: &RunOptions<'_>,
    sample: S,
    validate: V,
) -> Result<TrainingRun>
where
    S: Fn(&DenoiserModel, f64, usize, usize) -> Result<SampleGrad> + Sync,
    V: Fn(&DenoiserModel, f64) -> Result<f64>,
{
    cfg.validate()?;
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rho = softplus_inv(cfg.initial_b(&model));
    let n_theta = model.num_params();
    let mut adam = Adam::new(n_theta + usize::from(learn_b), cfg.optimizer);
    let mut run = TrainingRun {
        loss_history: Vec::with_capacity(cfg.epochs),
        val_psnr: Vec::new(),
        model: model.clone(),
        b: softplus(rho),
        checkpoints: Vec::new(),
        backward_warnings: 0,
    };
    let mut order: Vec<usize> = (0..count).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, &[0x5f1e, epoch as u64]));
        let lr = cfg.lr_at(epoch);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let b = softplus(rho);
            let results = batch
                .par_iter()
                .map(|&i| sample(&model, b, epoch, i))
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut grad = vec![0.0; adam.m.len()];
            let mut batch_loss = 0.0;
            for (loss, gp, gb, ok) in results {
                batch_loss += loss;
                grad[..n_theta].iter_mut().zip(&gp).for_each(|(g, v)| *g += scale * v);
                if learn_b {
                    grad[n_theta] += scale * gb * softplus_grad(rho);
                }
                if !ok {
                    run.backward_warnings += 1;
                }
            }
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch });
            }
            epoch_loss += batch_loss;
            let mut params = model.params();
            if learn_b {
                params.push(rho);
            }
            adam.step(&mut params, &grad, lr);
            if learn_b {
                rho = params.pop().expect("rho appended");
            }
            model.set_params(&params)?;
            model.spectral_normalize(cfg.power_iters);
        }
        let mean_loss = epoch_loss / count as f64;
        if !mean_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        run.loss_history.push(mean_loss);
        if let Some(v) = opts.validation.map(|_| validate(&model, softplus(rho))) {
            run.val_psnr.push(v?);
        }
        if let Some(dir) = opts.checkpoint_dir {
            run.checkpoints
                .push(write_checkpoint(dir, epoch, &model, &adam, softplus(rho), rho, mean_loss)?);
        }
    }
    run.b = softplus(rho);
    run.model = model;
    Ok(run)
}

/// Noisy copy of `x` with standard deviation drawn uniformly from
/// `cfg.noise_range`, from the stream `(seed, epoch, index)`.
pub fn pretrain_noisy(x: &SpectralCube, cfg: &TrainConfig, epoch: usize, index: usize) -> SpectralCube {
    let mut rng = rng::stream(cfg.seed, &[epoch as u64, index as u64]);
    let (lo, hi) = cfg.noise_range;
    let sigma = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let mut out = x.clone();
    if sigma > 0.0 {
        out.as_mut_slice().iter_mut().for_each(|v| {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v += sigma * n;
        });
    }
    out
}

pub fn pretrain_denoiser(dataset: &[SpectralCube], model: DenoiserModel, cfg: &TrainConfig, opts: &RunOptions<'_>) -> Result<TrainingRun> {
    let sample = |m: &DenoiserModel, _b: f64, epoch: usize, i: usize| -> Result<SampleGrad> {
        let noisy = pretrain_noisy(&dataset[i], cfg, epoch, i);
        let (loss, g) = pretrain_loss_grad(m, &dataset[i], &noisy)?;
        Ok((loss, g, 0.0, true))
    };
    let validate = |m: &DenoiserModel, b: f64| -> Result<f64> {
        let val = opts.validation.expect("validation requested");
        eval_pnp(val, m, b, cfg.fixed_point.max_iters)
    };
    run_loop(dataset.len(), model, cfg, false, opts, sample, validate)
}

pub fn eval_pnp(data: &PairedDataset, model: &DenoiserModel, b: f64, iters: usize) -> Result<f64> {
    mean_psnr(data, |y| Ok(infer_pnp(y, &data.kernel, model, b, iters)?.0))
}

pub fn train_deq(data: &PairedDataset, model: DenoiserModel, cfg: &TrainConfig, opts: &RunOptions<'_>) -> Result<TrainingRun> {
    let backward = cfg.backward_cfg();
    let sample = |m: &DenoiserModel, b: f64, _epoch: usize, i: usize| -> Result<SampleGrad> {
        let g = deq_loss_grad(m, b, &data.kernel, &data.clean[i], &data.degraded[i], &cfg.fixed_point, &backward)?;
        Ok((g.loss, g.params, g.b, g.backward_converged))
    };
    let validate = |m: &DenoiserModel, b: f64| -> Result<f64> {
        eval_deq(opts.validation.expect("validation requested"), m, b, &cfg.fixed_point)
    };
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    run_loop(data.len(), model, cfg, cfg.learn_b, opts, sample, validate)
}

pub fn train_du(data: &PairedDataset, model: DenoiserModel, cfg: &TrainConfig, opts: &RunOptions<'_>) -> Result<TrainingRun> {
    let k = cfg.unroll_k;
    let sample = |m: &DenoiserModel, b: f64, _epoch: usize, i: usize| -> Result<SampleGrad> {
        let (loss, gp, gb) = du_loss_grad(m, b, &data.kernel, &data.clean[i], &data.degraded[i], k)?;
        Ok((loss, gp, gb, true))
    };
    let validate = |m: &DenoiserModel, b: f64| -> Result<f64> {
        eval_du(opts.validation.expect("validation requested"), m, b, k)
    };
    if k == 0 {
        return Err(Error::InvalidConfig("unroll_k must be at least 1".into()));
    }
    run_loop(data.len(), model, cfg, cfg.learn_b, opts, sample, validate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{ConvLayer, DenoiserConfig};
    use crate::synth::{generate, SynthParams};

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(2, AdamConfig::default());
        let mut p = vec![1.0, -1.0];
        adam.step(&mut p, &[0.5, -2.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn lr_schedule_segments() {
        let cfg = TrainConfig {
            lr_schedule: vec![(2, 1e-3), (3, 1e-4)],
            ..Default::default()
        };
        let rates: Vec<f64> = (0..7).map(|e| cfg.lr_at(e)).collect();
        assert_eq!(rates, vec![1e-3, 1e-3, 1e-4, 1e-4, 1e-4, 1e-4, 1e-4]);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let model = DenoiserModel::identity(2);
        let cfg = TrainConfig::default();
        assert!(matches!(
            pretrain_denoiser(&[], model, &cfg, &RunOptions::default()),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn exact_fixed_point_has_zero_gradient() {
        let x = generate(&SynthParams { count: 1, height: 8, width: 8, bands: 2, ..Default::default() })
            .unwrap()
            .remove(0);
        let model = DenoiserModel::identity(2);
        let g = deq_loss_grad(
            &model,
            0.5,
            &BlurKernel::identity(),
            &x,
            &x,
            &FixedPointConfig::default(),
            &FixedPointConfig::default(),
        )
        .unwrap();
        // x⋆ equals x up to FFT rounding.
        assert!(g.loss < 1e-28);
        assert!(g.params.iter().all(|v| v.abs() < 1e-12));
        assert!(g.b.abs() < 1e-12);
    }

    #[test]
    fn noiseless_identity_pretraining_drives_loss_to_zero() {
        let data = generate(&SynthParams { count: 4, height: 8, width: 8, bands: 2, ..Default::default() }).unwrap();
        let layer = ConvLayer::new(2, 2, vec![0.05; 2 * 2 * 9], vec![0.0; 2]).unwrap().with_cap(10.0);
        let model = DenoiserModel::new(vec![layer], false).unwrap().with_sn_grid(8, 8);
        let cfg = TrainConfig {
            mode: TrainMode::Pretrain,
            epochs: 300,
            batch_size: 1,
            lr_schedule: vec![(200, 1e-2), (100, 1e-3)],
            noise_range: (0.0, 0.0),
            ..Default::default()
        };
        let run = pretrain_denoiser(&data, model, &cfg, &RunOptions::default()).unwrap();
        let first = run.loss_history[0];
        let last = *run.loss_history.last().unwrap();
        assert!(last < 1e-3 * first, "{first} -> {last}");
    }

    #[test]
    fn pnp_with_zero_iterations_returns_y() {
        let y = generate(&SynthParams { count: 1, ..Default::default() }).unwrap().remove(0);
        let model = DenoiserModel::init(&DenoiserConfig::default()).unwrap();
        let (out, trace) = infer_pnp(&y, &BlurKernel::identity(), &model, 1.5, 0).unwrap();
        assert_eq!(out, y);
        assert_eq!(trace.iters_used, 0);
    }
}
