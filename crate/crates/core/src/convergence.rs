//! Executable form of the contraction analysis for the HQS map.
//!
//! Per band, the blur operator `H` is circulant-block-circulant and therefore
//! diagonalized by the 2-D DFT: the eigenvalues of `HᵀH` are exactly `|H̃(ω)|²`.
//! With `L` their minimum and `μ` the denoiser's Lipschitz constant, the map
//! `x ↦ DC(f(x))` is Lipschitz with constant at most `bμ / (b + L)`.
//! The squared-denominator variant `bμ / (b + L)²` is reported alongside.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cube::SpectralCube;
use crate::degrade::{apply_degradation, pad_and_shift_kernel, BlurKernel, DegradationScenario};
use crate::denoiser::DenoiserModel;
use crate::fixedpoint::{solve_plain, FixedPointConfig, FixedPointTrace};
use crate::hqs::HqsContext;
use crate::{rng, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorSpectrum {
    /// Smallest eigenvalue of `HᵀH`.
    pub l: f64,
    pub lambda_max: f64,
    /// `|H̃|²` on the grid, row-major.
    pub eigenvalues: Vec<f64>,
}

pub fn operator_spectrum(kernel: &BlurKernel, height: usize, width: usize) -> Result<OperatorSpectrum> {
    let h = pad_and_shift_kernel(kernel, height, width)?;
    let eigenvalues: Vec<f64> = h.band(0).iter().map(|z| z.norm_sqr()).collect();
    let l = eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let lambda_max = eigenvalues.iter().copied().fold(0.0, f64::max);
    Ok(OperatorSpectrum {
        l,
        lambda_max,
        eigenvalues,
    })
}

pub fn epsilon_paper(b: f64, mu: f64, l: f64) -> f64 {
    b * mu / ((b + l) * (b + l))
}

pub fn epsilon_corrected(b: f64, mu: f64, l: f64) -> f64 {
    b * mu / (b + l)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    #[serde(rename = "L")]
    pub l: f64,
    pub lambda_max: f64,
    pub b: f64,
    /// Empirical lower bound on the denoiser's Lipschitz constant.
    pub mu_estimate: f64,
    pub epsilon_paper: f64,
    pub epsilon_corrected: f64,
    /// Empirical lower bound on the Lipschitz constant of the iteration map.
    pub empirical_map_lipschitz: f64,
    pub contractive_paper: bool,
    pub contractive_corrected: bool,
}

impl ConvergenceReport {
    /// Assembles the report from its measured ingredients.
    pub fn assemble(l: f64, lambda_max: f64, b: f64, mu_estimate: f64, empirical_map_lipschitz: f64) -> Self {
        let epsilon_paper = epsilon_paper(b, mu_estimate, l);
        let epsilon_corrected = epsilon_corrected(b, mu_estimate, l);
        Self {
            l,
            lambda_max,
            b,
            mu_estimate,
            epsilon_paper,
            epsilon_corrected,
            empirical_map_lipschitz,
            contractive_paper: epsilon_paper < 1.0,
            contractive_corrected: epsilon_corrected < 1.0,
        }
    }
}

/// Largest `‖g(x₁) − g(x₂)‖ / ‖x₁ − x₂‖` over `trials` pairs of uniform
/// `[0,1]` cubes, for the HQS map with a fixed observation.
pub fn map_lipschitz(ctx: &HqsContext, model: &DenoiserModel, trials: usize, seed: u64) -> Result<f64> {
    let (h, w, d) = ctx.y().shape();
    let mut rng = rng::stream(seed, &[0x3a9]);
    let mut best = 0.0f64;
    for _ in 0..trials {
        let x1 = SpectralCube::from_fn(h, w, d, |_, _, _| rand::Rng::random::<f64>(&mut rng));
        let x2 = SpectralCube::from_fn(h, w, d, |_, _, _| rand::Rng::random::<f64>(&mut rng));
        let g1 = ctx.iterate(&x1, model)?;
        let g2 = ctx.iterate(&x2, model)?;
        let num: f64 = g1.as_slice().iter().zip(g2.as_slice()).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = x1.as_slice().iter().zip(x2.as_slice()).map(|(a, b)| (a - b).powi(2)).sum();
        if den > 0.0 {
            best = best.max((num / den).sqrt());
        }
    }
    Ok(best)
}

/// Builds a [`ConvergenceReport`] on an `height x width` grid. The
/// observation is a uniform random cube; the map's Lipschitz constant does not
/// depend on it.
#[allow(clippy::too_many_arguments)]
pub fn contraction_report(
    kernel: &BlurKernel,
    height: usize,
    width: usize,
    model: &DenoiserModel,
    b: f64,
    trials: usize,
    seed: u64,
) -> Result<ConvergenceReport> {
    let spec = operator_spectrum(kernel, height, width)?;
    let mu = model
        .clone()
        .with_sn_grid(height, width)
        .estimate_lipschitz(trials, seed)?;
    let mut rng = rng::stream(seed, &[0x0b5]);
    let y = SpectralCube::from_fn(height, width, model.bands(), |_, _, _| {
        rand::Rng::random::<f64>(&mut rng)
    });
    let ctx = HqsContext::new(&y, kernel, b)?;
    let empirical = map_lipschitz(&ctx, model, trials, seed)?;
    Ok(ConvergenceReport::assemble(spec.l, spec.lambda_max, b, mu, empirical))
}

/// Per-layer cap giving an end-to-end bound `mu` for a `depth`-layer network.
pub fn layer_cap_for(mu: f64, depth: usize) -> f64 {
    mu.powf(1.0 / depth as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig4Config {
    pub mu_values: Vec<f64>,
    /// Penalty values as multiples of `μ`.
    pub b_factors: Vec<f64>,
    pub iters: usize,
}

impl Default for Fig4Config {
    fn default() -> Self {
        Self {
            mu_values: vec![1.0, 0.075],
            b_factors: vec![0.01, 0.5, 1.5],
            iters: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fig4Cell {
    pub mu: f64,
    pub b: f64,
    pub trace: FixedPointTrace,
    /// Iteration at which the solve produced a non-finite value.
    pub diverged_at: Option<usize>,
}

impl Fig4Cell {
    pub fn file_name(&self) -> String {
        format!("trace_mu{}_b{}.csv", self.mu, self.b)
    }
}

/// Plain-iteration residual traces over the `(μ, b)` grid. For each `μ` the
/// model's layer caps are set to `μ^(1/depth)` and spectral normalization is
/// re-applied. The observation is `x` degraded by `scenario`; iteration
/// starts from it.
pub fn run_fig4_experiment(
    x: &SpectralCube,
    scenario: &DegradationScenario,
    model: &DenoiserModel,
    cfg: &Fig4Config,
) -> Result<Vec<Fig4Cell>> {
    if cfg.iters == 0 {
        return Err(Error::InvalidConfig("fig4 iters must be positive".into()));
    }
    let y = apply_degradation(x, scenario)?;
    let solver = FixedPointConfig::plain(cfg.iters, 0.0);
    let mut cells = Vec::new();
    for &mu in &cfg.mu_values {
        let mut capped = model.clone().with_sn_grid(x.height(), x.width()).with_mu_target(mu);
        capped.set_layer_caps(layer_cap_for(mu, capped.depth()));
        capped.spectral_normalize(100);
        for &factor in &cfg.b_factors {
            let b = factor * mu;
            let ctx = HqsContext::new(&y, &scenario.kernel, b)?;
            let map = |v: &[f64]| -> Result<Vec<f64>> {
                Ok(ctx.iterate(&y.with_data(v.to_vec())?, &capped)?.into_vec())
            };
            let (trace, diverged_at) = match solve_plain(map, y.as_slice(), &solver) {
                Ok((_, trace)) => (trace, None),
                Err(Error::NonFiniteIterate { iteration, trace }) => (*trace, Some(iteration)),
                Err(e) => return Err(e),
            };
            cells.push(Fig4Cell {
                mu,
                b,
                trace,
                diverged_at,
            });
        }
    }
    Ok(cells)
}

/// Writes one `iter,residual` CSV per cell plus `summary.csv`.
pub fn write_fig4(cells: &[Fig4Cell], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut summary = String::from("mu,b,iters,first_residual,final_residual,diverged_at\n");
    for cell in cells {
        cell.trace.write_csv(dir.join(cell.file_name()))?;
        summary.push_str(&format!(
            "{},{},{},{:e},{:e},{}\n",
            cell.mu,
            cell.b,
            cell.trace.iters_used,
            cell.trace.residuals.first().copied().unwrap_or(f64::NAN),
            cell.trace.final_residual().unwrap_or(f64::NAN),
            cell.diverged_at.map(|k| k.to_string()).unwrap_or_default()
        ));
    }
    let path = dir.join("summary.csv");
    std::fs::write(&path, summary).map_err(|e| Error::io(&path, e))
}
