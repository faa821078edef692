//! Fixed-point solvers: plain (Picard) iteration and Anderson acceleration.
//!
//! Both engines work on flat `f64` vectors and accept fallible maps so the same
//! code serves the forward solve `x = g(x)` and the backward solve for the
//! implicit-gradient cotangent. Residuals are `‖x_{k+1} − x_k‖₂`; a solve stops
//! once `residual ≤ tol · ‖x_{k+1}‖₂` or after `max_iters` map evaluations.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cube::SpectralCube;
use crate::degrade::BlurKernel;
use crate::denoiser::DenoiserModel;
use crate::hqs::HqsContext;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedPointConfig {
    pub max_iters: usize,
    /// Relative residual stopping threshold.
    pub tol: f64,
    /// Anderson history depth; 0 selects plain iteration.
    pub anderson_m: usize,
    /// Anderson mixing weight in `(0, 1]`.
    pub anderson_gamma: f64,
    /// Ridge on the β normal equations, relative to their largest diagonal entry.
    pub anderson_ridge: f64,
    /// Store every iterate in the trace.
    pub keep_iterates: bool,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            max_iters: 15,
            tol: 1e-6,
            anderson_m: 5,
            anderson_gamma: 1.0,
            anderson_ridge: 1e-10,
            keep_iterates: false,
        }
    }
}

impl FixedPointConfig {
    pub fn plain(max_iters: usize, tol: f64) -> Self {
        Self {
            max_iters,
            tol,
            anderson_m: 0,
            ..Self::default()
        }
    }

    pub fn anderson(m: usize, max_iters: usize, tol: f64) -> Self {
        Self {
            max_iters,
            tol,
            anderson_m: m,
            ..Self::default()
        }
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::InvalidConfig("tol must be nonnegative".into()));
        }
        if !(self.anderson_gamma > 0.0 && self.anderson_gamma <= 1.0) {
            return Err(Error::InvalidConfig("anderson_gamma must lie in (0, 1]".into()));
        }
        if !(self.anderson_ridge >= 0.0) {
            return Err(Error::InvalidConfig("anderson_ridge must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Record of one solve. `residuals.len() == iters_used`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FixedPointTrace {
    pub iterates: Option<Vec<Vec<f64>>>,
    pub residuals: Vec<f64>,
    pub converged: bool,
    pub iters_used: usize,
    /// Anderson steps that fell back to a plain step (singular β system).
    pub fallback_steps: usize,
}

impl FixedPointTrace {
    fn new(keep: bool) -> Self {
        Self {
            iterates: keep.then(Vec::new),
            ..Self::default()
        }
    }

    fn record(&mut self, residual: f64, x: &[f64]) {
        self.residuals.push(residual);
        self.iters_used = self.residuals.len();
        if let Some(it) = self.iterates.as_mut() {
            it.push(x.to_vec());
        }
    }

    pub fn final_residual(&self) -> Option<f64> {
        self.residuals.last().copied()
    }

    /// `iter,residual` rows, one per iteration, iterations counted from 1.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,residual\n");
        for (k, r) in self.residuals.iter().enumerate() {
            writeln!(s, "{},{:e}", k + 1, r).expect("string write");
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Applies `map`, aborting with the trace so far on a non-finite result.
fn step<F>(map: &mut F, x: &[f64], trace: &FixedPointTrace) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let gx = map(x)?;
    if gx.len() != x.len() {
        return Err(Error::ShapeMismatch(format!(
            "fixed-point map changed length {} -> {}",
            x.len(),
            gx.len()
        )));
    }
    if gx.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteIterate {
            iteration: trace.iters_used + 1,
            trace: Box::new(trace.clone()),
        });
    }
    Ok(gx)
}

/// Picard iteration `x_{k+1} = g(x_k)`.
pub fn solve_plain<F>(mut map: F, x0: &[f64], cfg: &FixedPointConfig) -> Result<(Vec<f64>, FixedPointTrace)>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let mut trace = FixedPointTrace::new(cfg.keep_iterates);
    let mut x = x0.to_vec();
    for _ in 0..cfg.max_iters {
        let gx = step(&mut map, &x, &trace)?;
        let r = distance(&gx, &x);
        x = gx;
        trace.record(r, &x);
        if r <= cfg.tol * norm(&x) {
            trace.converged = true;
            break;
        }
    }
    Ok((x, trace))
}

/// Weights `β` minimizing `‖Uβ‖²` subject to `1ᵀβ = 1`, where `columns` are
/// the columns of `U`. The normal matrix `UᵀU` gets `ridge · max diag` added
/// to its diagonal. Returns `None` when the system is singular.
pub fn anderson_weights(columns: &[&[f64]], ridge: f64) -> Option<Vec<f64>> {
    let n = columns.len();
    if n == 0 {
        return None;
    }
    if n == 1 {
        return Some(vec![1.0]);
    }
    let mut g = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v: f64 = columns[i].iter().zip(columns[j]).map(|(a, b)| a * b).sum();
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    let scale = (0..n).map(|i| g[(i, i)]).fold(0.0, f64::max);
    if !(scale > 0.0 && scale.is_finite()) {
        return None;
    }
    for i in 0..n {
        g[(i, i)] += ridge * scale;
    }
    let z = g.lu().solve(&DVector::from_element(n, 1.0))?;
    let total = z.sum();
    if !(total.is_finite() && total.abs() > f64::EPSILON * z.amax()) {
        return None;
    }
    let beta: Vec<f64> = z.iter().map(|v| v / total).collect();
    beta.iter().all(|v| v.is_finite()).then_some(beta)
}

/// Anderson-accelerated iteration over the last `anderson_m` pairs
/// `(x_i, g(x_i))`, newest first, using whatever history exists during warm-up:
/// `x_{k+1} = (1 − γ) Σ βᵢ xᵢ + γ Σ βᵢ g(xᵢ)`.
pub fn solve_anderson<F>(mut map: F, x0: &[f64], cfg: &FixedPointConfig) -> Result<(Vec<f64>, FixedPointTrace)>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    if cfg.anderson_m == 0 {
        return Err(Error::InvalidConfig("Anderson requires anderson_m >= 1".into()));
    }
    let gamma = cfg.anderson_gamma;
    let mut trace = FixedPointTrace::new(cfg.keep_iterates);
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, Vec<f64>)> = VecDeque::with_capacity(cfg.anderson_m);
    let mut x = x0.to_vec();
    for _ in 0..cfg.max_iters {
        let gx = step(&mut map, &x, &trace)?;
        let f: Vec<f64> = gx.iter().zip(&x).map(|(g, v)| g - v).collect();
        if history.len() == cfg.anderson_m {
            history.pop_back();
        }
        history.push_front((x.clone(), gx, f));

        let columns: Vec<&[f64]> = history.iter().map(|(_, _, f)| f.as_slice()).collect();
        let next = match anderson_weights(&columns, cfg.anderson_ridge) {
            Some(beta) => mix(&history, &beta, gamma),
            None => {
                trace.fallback_steps += 1;
                history[0].1.clone()
            }
        };
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteIterate {
                iteration: trace.iters_used + 1,
                trace: Box::new(trace),
            });
        }
        let r = distance(&next, &x);
        x = next;
        trace.record(r, &x);
        if r <= cfg.tol * norm(&x) {
            trace.converged = true;
            break;
        }
    }
    Ok((x, trace))
}

fn mix(history: &VecDeque<(Vec<f64>, Vec<f64>, Vec<f64>)>, beta: &[f64], gamma: f64) -> Vec<f64> {
    // Accumulation starts from the first term so a single unit weight copies g exactly.
    let mut out: Vec<f64> = history[0].1.iter().map(|g| beta[0] * g).collect();
    for (bi, (_, g, _)) in beta.iter().zip(history.iter()).skip(1) {
        out.iter_mut().zip(g).for_each(|(o, v)| *o += bi * v);
    }
    if gamma < 1.0 {
        out.iter_mut().for_each(|o| *o *= gamma);
        for (bi, (xi, _, _)) in beta.iter().zip(history.iter()) {
            let w = (1.0 - gamma) * bi;
            out.iter_mut().zip(xi).for_each(|(o, v)| *o += w * v);
        }
    }
    out
}

/// Dispatches on `anderson_m`: 0 is plain iteration, anything else Anderson.
pub fn solve<F>(map: F, x0: &[f64], cfg: &FixedPointConfig) -> Result<(Vec<f64>, FixedPointTrace)>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if cfg.anderson_m == 0 {
        solve_plain(map, x0, cfg)
    } else {
        solve_anderson(map, x0, cfg)
    }
}

/// Runs the configured solver on the HQS map of `ctx` starting from `x0`.
pub fn solve_hqs(
    ctx: &HqsContext,
    model: &DenoiserModel,
    x0: &SpectralCube,
    cfg: &FixedPointConfig,
) -> Result<(SpectralCube, FixedPointTrace)> {
    let map = |v: &[f64]| -> Result<Vec<f64>> {
        let x = x0.with_data(v.to_vec())?;
        Ok(ctx.iterate(&x, model)?.into_vec())
    };
    let (x, trace) = solve(map, x0.as_slice(), cfg)?;
    Ok((x0.with_data(x)?, trace))
}

/// Restores `y` by solving `x = g(x)` from `x₀ = y`.
pub fn infer(
    y: &SpectralCube,
    kernel: &BlurKernel,
    model: &DenoiserModel,
    b: f64,
    cfg: &FixedPointConfig,
) -> Result<(SpectralCube, FixedPointTrace)> {
    let ctx = HqsContext::new(y, kernel, b)?;
    solve_hqs(&ctx, model, y, cfg)
}
