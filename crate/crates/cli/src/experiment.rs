//! Degrade, train, restore and score, for every test cell of a config.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! manifest.json      config, seeds, versions, stage status, produced files
//! metrics.csv/json   one row per (cell, method, cube)
//! summary.csv/json   means per (cell, method)
//! psnr_table.csv     cells as rows, methods as columns
//! timing.json        wall time per stage and mean inference time per cube
//! models/            weights and run records of every trained model
//! traces/            DEQ residual traces, one CSV per (cell, cube)
//! restored/          restored cubes, only with `save_restorations`
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hsdeq::cube::Dtype;
use hsdeq::denoiser::{load_model, save_model};
use hsdeq::fixedpoint::infer;
use hsdeq::hqs::HqsContext;
use hsdeq::metrics::evaluate;
use hsdeq::synth::{generate, read_dataset};
use hsdeq::training::{
    eval_pnp, infer_pnp, pretrain_denoiser, train_deq, train_du, unroll, PairedDataset, RunOptions,
    TrainConfig, TrainMode, TrainingRun,
};
use hsdeq::{rng, DegradationScenario, DenoiserModel, Error, MetricReport, Result, SpectralCube};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetSpec, ExperimentConfig, Method};
use crate::{create_dir, read_run_record, run_record_path, write_json, write_text, RunRecord};

const DEGRADED: &str = "degraded";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub cell: String,
    pub method: String,
    pub cube: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
    pub ergas: f64,
    /// Solver iterations (DEQ, PnP) or unroll depth (DU); 0 for the degraded input.
    pub iters: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub cell: String,
    pub method: String,
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
    pub ergas: f64,
    pub mean_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSeed {
    pub cell: String,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// `running`, `complete` or `failed`.
    pub status: String,
    pub error: Option<String>,
    pub cli_version: String,
    pub core_version: String,
    pub config: ExperimentConfig,
    pub cells: Vec<CellSeed>,
    pub pnp_b: Option<f64>,
    pub deq_b: Option<f64>,
    pub du_b: Option<f64>,
    pub stages: Vec<StageTiming>,
    /// Paths relative to the output directory.
    pub files: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub dir: PathBuf,
    pub rows: Vec<MetricRow>,
    pub summary: Vec<SummaryRow>,
    pub manifest: Manifest,
}

impl ExperimentReport {
    pub fn mean_psnr(&self, cell: &str, method: &str) -> Option<f64> {
        self.summary
            .iter()
            .find(|r| r.cell == cell && r.method == method)
            .map(|r| r.psnr)
    }
}

struct Models {
    pretrained: Option<DenoiserModel>,
    pnp_b: Option<f64>,
    deq: Option<(DenoiserModel, f64)>,
    du: Option<(DenoiserModel, f64, usize)>,
}

struct Cell {
    label: String,
    scenario: DegradationScenario,
}

/// Runs the whole protocol. On failure the manifest is still written, with
/// `status: failed`, the error text and every stage that finished.
/// `cfg.seed` replaces the per-stage seeds before anything is drawn.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut cfg = cfg.clone();
    cfg.apply_seed();
    let cfg = &cfg;
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    create_dir(&dir)?;
    let mut manifest = Manifest {
        status: "running".into(),
        error: None,
        cli_version: env!("CARGO_PKG_VERSION").into(),
        core_version: hsdeq::VERSION.into(),
        config: cfg.clone(),
        cells: Vec::new(),
        pnp_b: None,
        deq_b: None,
        du_b: None,
        stages: Vec::new(),
        files: Vec::new(),
    };
    let outcome = run_stages(cfg, &dir, &mut manifest);
    match &outcome {
        Ok(_) => manifest.status = "complete".into(),
        Err(e) => {
            manifest.status = "failed".into();
            manifest.error = Some(e.to_string());
        }
    }
    manifest.files.sort();
    write_json(&manifest, dir.join("manifest.json"))?;
    let (rows, summary) = outcome?;
    Ok(ExperimentReport {
        dir,
        rows,
        summary,
        manifest,
    })
}

fn stage<T>(manifest: &mut Manifest, name: &str, f: impl FnOnce(&mut Manifest) -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f(manifest)?;
    manifest.stages.push(StageTiming {
        stage: name.into(),
        seconds: start.elapsed().as_secs_f64(),
    });
    Ok(out)
}

fn run_stages(cfg: &ExperimentConfig, dir: &Path, manifest: &mut Manifest) -> Result<(Vec<MetricRow>, Vec<SummaryRow>)> {
    let clean = stage(manifest, "load", |_| load_clean(cfg))?;
    if clean.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.train_count >= clean.len() {
        return Err(Error::InvalidConfig(format!(
            "train_count {} leaves no held-out cubes out of {}",
            cfg.train_count,
            clean.len()
        )));
    }
    let models = train_models(cfg, dir, &clean, manifest)?;
    let cells = test_cells(cfg)?;
    manifest.cells = cells
        .iter()
        .map(|c| CellSeed {
            cell: c.label.clone(),
            noise_seed: c.scenario.seed,
        })
        .collect();
    let test_range = cfg.train_count..clean.len();
    if cfg.methods.contains(&Method::Deq) {
        create_dir(dir.join("traces"))?;
    }
    let per_cell = stage(manifest, "evaluate", |_| {
        cells
            .par_iter()
            .map(|cell| evaluate_cell(cfg, dir, cell, &clean, test_range.clone(), &models))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut rows = Vec::new();
    for (cell_rows, files) in per_cell {
        rows.extend(cell_rows);
        manifest.files.extend(files);
    }
    let summary = summarize(&rows);
    write_reports(dir, &rows, &summary, manifest)?;
    Ok((rows, summary))
}

fn load_clean(cfg: &ExperimentConfig) -> Result<Vec<SpectralCube>> {
    match &cfg.dataset {
        DatasetSpec::Synthetic(params) => generate(params),
        DatasetSpec::Directory(dir) => read_dataset(dir),
    }
}

fn record(run: &TrainingRun, mode: TrainMode, b: Option<f64>, unroll_k: Option<usize>) -> RunRecord {
    RunRecord {
        mode,
        b,
        unroll_k,
        loss_history: run.loss_history.clone(),
        backward_warnings: run.backward_warnings,
    }
}

fn save_trained(dir: &Path, name: &str, model: &DenoiserModel, rec: &RunRecord, manifest: &mut Manifest) -> Result<()> {
    let stem = dir.join("models").join(name);
    save_model(model, &stem)?;
    write_json(rec, run_record_path(&stem))?;
    for ext in ["json", "bin", "run.json"] {
        manifest.files.push(format!("models/{name}.{ext}"));
    }
    Ok(())
}

fn train_models(cfg: &ExperimentConfig, dir: &Path, clean: &[SpectralCube], manifest: &mut Manifest) -> Result<Models> {
    let uses = |m| cfg.methods.contains(&m);
    let need_pre = uses(Method::Pnp)
        || (uses(Method::Deq) && cfg.models.deq.is_none())
        || (uses(Method::Du) && cfg.models.du.is_none());
    let train_set = stage(manifest, "degrade-train", |_| {
        let scenario = cfg.train_scenario.resolve(cfg.seed)?;
        PairedDataset::degrade(clean[..cfg.train_count].to_vec(), &scenario)
    })?;
    create_dir(dir.join("models"))?;

    let pretrained = if !need_pre {
        None
    } else if let Some(stem) = &cfg.models.pretrained {
        Some(load_model(stem)?)
    } else {
        Some(stage(manifest, "pretrain", |m| {
            let init = DenoiserModel::init(&cfg.denoiser)?;
            let pre_cfg = TrainConfig {
                mode: TrainMode::Pretrain,
                ..cfg.pretrain.clone()
            };
            let run = pretrain_denoiser(&train_set.clean, init, &pre_cfg, &RunOptions::default())?;
            let rec = record(&run, TrainMode::Pretrain, None, None);
            save_trained(dir, "pretrained", &run.model, &rec, m)?;
            Ok(run.model)
        })?)
    };

    let pnp_b = match &pretrained {
        Some(pre) => Some(stage(manifest, "select-pnp-b", |_| {
            select_pnp_b(&train_set, pre, &cfg.pnp_b_grid, cfg.fixed_point.max_iters)
        })?),
        None => None,
    };
    manifest.pnp_b = pnp_b;

    let end_to_end = |mode| TrainConfig {
        mode,
        b_init: cfg.train.b_init.or(pnp_b),
        ..cfg.train.clone()
    };
    let deq = if !uses(Method::Deq) {
        None
    } else if let Some(stem) = &cfg.models.deq {
        Some((load_model(stem)?, loaded_b(stem)?))
    } else {
        let pre = pretrained.clone().expect("pretrained model for DEQ");
        Some(stage(manifest, "train-deq", |m| {
            let run = train_deq(&train_set, pre, &end_to_end(TrainMode::Deq), &RunOptions::default())?;
            let rec = record(&run, TrainMode::Deq, Some(run.b), None);
            save_trained(dir, "deq", &run.model, &rec, m)?;
            Ok((run.model, run.b))
        })?)
    };
    manifest.deq_b = deq.as_ref().map(|d| d.1);

    let du = if !uses(Method::Du) {
        None
    } else if let Some(stem) = &cfg.models.du {
        let rec = read_run_record(stem)?;
        let k = rec.unroll_k.unwrap_or(cfg.train.unroll_k);
        Some((load_model(stem)?, loaded_b(stem)?, k))
    } else {
        let pre = pretrained.clone().expect("pretrained model for DU");
        Some(stage(manifest, "train-du", |m| {
            let du_cfg = end_to_end(TrainMode::Du);
            let run = train_du(&train_set, pre, &du_cfg, &RunOptions::default())?;
            let rec = record(&run, TrainMode::Du, Some(run.b), Some(du_cfg.unroll_k));
            save_trained(dir, "du", &run.model, &rec, m)?;
            Ok((run.model, run.b, du_cfg.unroll_k))
        })?)
    };
    manifest.du_b = du.as_ref().map(|d| d.1);

    Ok(Models {
        pretrained,
        pnp_b,
        deq,
        du,
    })
}

fn loaded_b(stem: &Path) -> Result<f64> {
    read_run_record(stem)?.b.ok_or_else(|| {
        Error::InvalidConfig(format!("{} has no b value", run_record_path(stem).display()))
    })
}

/// The grid value with the best mean training PSNR; ties keep the first.
pub fn select_pnp_b(train: &PairedDataset, model: &DenoiserModel, grid: &[f64], iters: usize) -> Result<f64> {
    let mut best = (f64::NEG_INFINITY, grid[0]);
    for &b in grid {
        let score = eval_pnp(train, model, b, iters)?;
        if score > best.0 {
            best = (score, b);
        }
    }
    Ok(best.1)
}

fn test_cells(cfg: &ExperimentConfig) -> Result<Vec<Cell>> {
    let mut cells = Vec::new();
    for s in &cfg.test_scenarios {
        cells.push(Cell {
            label: s.label(),
            scenario: s.resolve(cfg.seed)?,
        });
    }
    let base = cfg.train_scenario.resolve(cfg.seed)?;
    for (i, &sigma) in cfg.noise_sweep.iter().enumerate() {
        cells.push(Cell {
            label: format!("{}-noise{sigma}", cfg.train_scenario.label()),
            scenario: base
                .clone()
                .with_noise(sigma)?
                .with_seed(rng::derive_seed(cfg.seed, &[0x5eed, i as u64])),
        });
    }
    let mut seen = std::collections::HashSet::new();
    for cell in &mut cells {
        let mut label = cell.label.clone();
        let mut n = 1;
        while !seen.insert(label.clone()) {
            n += 1;
            label = format!("{}#{n}", cell.label);
        }
        cell.label = label;
    }
    Ok(cells)
}

fn file_safe(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

type CellOutput = (Vec<MetricRow>, Vec<String>);

/// Degrades the whole dataset (so noise seeds follow the global cube index)
/// and scores every method on the held-out range.
fn evaluate_cell(
    cfg: &ExperimentConfig,
    dir: &Path,
    cell: &Cell,
    clean: &[SpectralCube],
    test: std::ops::Range<usize>,
    models: &Models,
) -> Result<CellOutput> {
    let data = PairedDataset::degrade(clean.to_vec(), &cell.scenario)?.subset(test.clone());
    let kernel = &data.kernel;
    let tag = file_safe(&cell.label);
    let mut rows = Vec::new();
    let mut files = Vec::new();
    let mut traces = Vec::new();
    let restored_dir = dir.join("restored").join(&tag);
    if cfg.save_restorations {
        create_dir(&restored_dir)?;
    }
    for (i, (x, y)) in data.clean.iter().zip(&data.degraded).enumerate() {
        let cube = test.start + i;
        let mut push = |method: &str, x_hat: &SpectralCube, iters: usize, seconds: f64| -> Result<()> {
            let m: MetricReport = evaluate(x_hat, x)?;
            rows.push(MetricRow {
                cell: cell.label.clone(),
                method: method.into(),
                cube,
                psnr: m.psnr,
                ssim: m.ssim,
                rmse: m.rmse,
                ergas: m.ergas,
                iters,
                seconds,
            });
            if cfg.save_restorations {
                let name = format!("{method}_{cube:04}.cube");
                hsdeq::cube::write_cube(x_hat, restored_dir.join(&name), Dtype::F64)?;
                files.push(format!("restored/{tag}/{name}"));
            }
            Ok(())
        };
        push(DEGRADED, y, 0, 0.0)?;
        for &method in &cfg.methods {
            let start = Instant::now();
            let (x_hat, iters) = match method {
                Method::Pnp => {
                    let model = models.pretrained.as_ref().expect("pretrained model");
                    let b = models.pnp_b.expect("pnp b");
                    let (x_hat, trace) = infer_pnp(y, kernel, model, b, cfg.fixed_point.max_iters)?;
                    (x_hat, trace.iters_used)
                }
                Method::Deq => {
                    let (model, b) = models.deq.as_ref().expect("deq model");
                    let (x_hat, trace) = infer(y, kernel, model, *b, &cfg.fixed_point)?;
                    let name = format!("traces/{tag}_cube{cube:04}.csv");
                    trace.write_csv(dir.join(&name))?;
                    traces.push(name);
                    (x_hat, trace.iters_used)
                }
                Method::Du => {
                    let (model, b, k) = models.du.as_ref().expect("du model");
                    let ctx = HqsContext::new(y, kernel, *b)?;
                    (unroll(&ctx, model, *k)?.pop().expect("k + 1 iterates"), *k)
                }
            };
            push(method.name(), &x_hat, iters, start.elapsed().as_secs_f64())?;
        }
    }
    files.extend(traces);
    Ok((rows, files))
}

/// Means per `(cell, method)` in first-appearance order.
pub fn summarize(rows: &[MetricRow]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<&MetricRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.cell.clone(), r.method.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let mean = |f: fn(&MetricRow) -> f64| g.iter().map(|r| f(r)).sum::<f64>() / g.len() as f64;
            SummaryRow {
                cell: key.0.clone(),
                method: key.1.clone(),
                psnr: mean(|r| r.psnr),
                ssim: mean(|r| r.ssim),
                rmse: mean(|r| r.rmse),
                ergas: mean(|r| r.ergas),
                mean_seconds: mean(|r| r.seconds),
            }
        })
        .collect()
}

fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("cell,method,cube,psnr,ssim,rmse,ergas,iters,seconds\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.cell, r.method, r.cube, r.psnr, r.ssim, r.rmse, r.ergas, r.iters, r.seconds
        )
        .expect("string write");
    }
    s
}

fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("cell,method,psnr,ssim,rmse,ergas,mean_seconds\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.cell, r.method, r.psnr, r.ssim, r.rmse, r.ergas, r.mean_seconds
        )
        .expect("string write");
    }
    s
}

/// PSNR grid: one row per cell, one column per method.
fn psnr_table(rows: &[SummaryRow]) -> String {
    let mut methods: Vec<&str> = Vec::new();
    let mut cells: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
        if !cells.contains(&r.cell.as_str()) {
            cells.push(&r.cell);
        }
    }
    let mut s = format!("cell,{}\n", methods.join(","));
    for cell in cells {
        let values: Vec<String> = methods
            .iter()
            .map(|m| {
                rows.iter()
                    .find(|r| r.cell == cell && r.method == *m)
                    .map(|r| format!("{:.4}", r.psnr))
                    .unwrap_or_default()
            })
            .collect();
        writeln!(s, "{cell},{}", values.join(",")).expect("string write");
    }
    s
}

#[derive(Serialize)]
struct Timing<'a> {
    stages: &'a [StageTiming],
    /// Mean wall time per restored cube, by method.
    inference_seconds_per_cube: BTreeMap<String, f64>,
}

fn write_reports(dir: &Path, rows: &[MetricRow], summary: &[SummaryRow], manifest: &mut Manifest) -> Result<()> {
    write_text(&metrics_csv(rows), dir.join("metrics.csv"))?;
    write_json(rows, dir.join("metrics.json"))?;
    write_text(&summary_csv(summary), dir.join("summary.csv"))?;
    write_json(summary, dir.join("summary.json"))?;
    write_text(&psnr_table(summary), dir.join("psnr_table.csv"))?;
    let mut per_method: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.method != DEGRADED) {
        let e = per_method.entry(r.method.clone()).or_default();
        e.0 += r.seconds;
        e.1 += 1;
    }
    let timing = Timing {
        stages: &manifest.stages,
        inference_seconds_per_cube: per_method.into_iter().map(|(k, (t, n))| (k, t / n as f64)).collect(),
    };
    write_json(&timing, dir.join("timing.json"))?;
    manifest.files.extend(
        ["metrics.csv", "metrics.json", "summary.csv", "summary.json", "psnr_table.csv", "timing.json"]
            .map(String::from),
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(cell: &str, method: &str, psnr: f64) -> MetricRow {
        MetricRow {
            cell: cell.into(),
            method: method.into(),
            cube: 0,
            psnr,
            ssim: 1.0,
            rmse: 0.0,
            ergas: 0.0,
            iters: 0,
            seconds: 1.0,
        }
    }

    #[test]
    fn summary_averages_per_cell_and_method() {
        let rows = [row("a", "deq", 30.0), row("a", "deq", 32.0), row("b", "deq", 20.0), row("a", "du", 1.0)];
        let s = summarize(&rows);
        assert_eq!(s.len(), 3);
        assert_eq!((s[0].cell.as_str(), s[0].method.as_str(), s[0].psnr), ("a", "deq", 31.0));
        assert_eq!((s[1].cell.as_str(), s[1].psnr), ("b", 20.0));
        assert_eq!(s[2].method, "du");
    }

    #[test]
    fn psnr_table_pivots_methods_into_columns() {
        let s = summarize(&[row("a", "degraded", 20.0), row("a", "deq", 25.0), row("b", "degraded", 19.0)]);
        assert_eq!(psnr_table(&s), "cell,degraded,deq\na,20.0000,25.0000\nb,19.0000,\n");
    }

    #[test]
    fn file_safe_replaces_separators() {
        assert_eq!(file_safe("a-noise0.01#2"), "a-noise0.01_2");
    }
}
