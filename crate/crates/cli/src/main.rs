use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use hsdeq::convergence::{contraction_report, run_fig4_experiment, write_fig4, Fig4Config};
use hsdeq::cube::{read_cube, write_cube, Dtype};
use hsdeq::denoiser::{load_model, save_model, DenoiserConfig};
use hsdeq::fixedpoint::infer;
use hsdeq::metrics::evaluate;
use hsdeq::synth::{cube_file_name, read_dataset, write_dataset, SynthParams, Texture};
use hsdeq::training::{
    infer_pnp, pretrain_denoiser, train_deq, train_du, PairedDataset, RunOptions, TrainConfig, TrainMode,
};
use hsdeq::{DenoiserModel, Error, FixedPointConfig, MetricReport, Result};
use hsdeq_cli::{
    cube_paths, exit_code, read_json, read_run_record, run_experiment, run_record_path, write_json,
    ExperimentConfig, RunRecord, ScenarioRef,
};
use serde::Serialize;

/// Hyperspectral deconvolution with a deep-equilibrium HQS solver.
#[derive(Debug, Parser)]
#[command(name = "hsdeq", version)]
struct Cli {
    /// Overrides the seed of the command's configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Write cubes as f64 instead of f32.
    #[arg(long = "f64", global = true)]
    f64_output: bool,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Blur and add noise to a cube or a directory of cubes.
    Degrade(DegradeArgs),
    /// Pre-train the denoiser on clean cubes with synthetic noise.
    Pretrain(PretrainArgs),
    /// Train end-to-end through the fixed point with implicit gradients.
    TrainDeq(TrainArgs),
    /// Train a K-step unrolled network.
    TrainDu(TrainArgs),
    /// Restore with a trained DEQ model.
    Infer(InferArgs),
    /// Restore with a fixed denoiser and penalty.
    InferPnp(InferPnpArgs),
    /// Score restored cubes against references.
    Eval(EvalArgs),
    /// Contraction analysis of the HQS map.
    Analyze(AnalyzeArgs),
    /// Residual traces over a grid of Lipschitz caps and penalties.
    Fig4(Fig4Args),
    /// Full degrade, train, infer and evaluate protocol from one config.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON generator parameters; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    bands: Option<usize>,
    /// smooth, blocky or mixed.
    #[arg(long)]
    texture: Option<String>,
    #[arg(long)]
    endmembers: Option<usize>,
}

#[derive(Debug, Args)]
struct DegradeArgs {
    /// A cube file or a directory of them.
    #[arg(long)]
    input: PathBuf,
    /// Output file, or directory when the input is one.
    #[arg(long)]
    out: PathBuf,
    /// Preset tag a-e or a JSON scenario file.
    #[arg(long, default_value = "a")]
    scenario: String,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    /// Directory of clean cubes.
    #[arg(long)]
    data: PathBuf,
    /// Output weight stem.
    #[arg(long)]
    out: PathBuf,
    /// JSON training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON architecture for a fresh model.
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Start from these weights instead of a fresh model.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    checkpoints: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Directory of clean cubes; observations are made with `--scenario`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "a")]
    scenario: String,
    /// Output weight stem.
    #[arg(long)]
    out: PathBuf,
    /// JSON training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pre-trained weights to start from.
    #[arg(long)]
    init: Option<PathBuf>,
    /// JSON architecture used when `--init` is absent.
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    checkpoints: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InferArgs {
    /// Weight stem.
    #[arg(long)]
    model: PathBuf,
    /// Degraded cube.
    #[arg(long)]
    input: PathBuf,
    /// Scenario that produced the input (its kernel is used).
    #[arg(long, default_value = "a")]
    scenario: String,
    /// Penalty; defaults to the value in the model's run record.
    #[arg(long)]
    b: Option<f64>,
    /// JSON solver configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Residual trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InferPnpArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "a")]
    scenario: String,
    #[arg(long)]
    b: f64,
    #[arg(long, default_value_t = 15)]
    iters: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Restored cube or directory.
    #[arg(long)]
    restored: PathBuf,
    /// Ground-truth cube or directory, matched by sorted order.
    #[arg(long)]
    reference: PathBuf,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// Weight stem; the identity denoiser when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value = "a")]
    scenario: String,
    #[arg(long)]
    b: f64,
    #[arg(long, default_value_t = 16)]
    height: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
    /// Bands of the identity denoiser.
    #[arg(long, default_value_t = 4)]
    bands: usize,
    /// Random pairs, and local perturbations, for the Lipschitz estimates.
    #[arg(long, default_value_t = 200)]
    trials: usize,
}

#[derive(Debug, Args)]
struct Fig4Args {
    /// Clean cube to degrade and restore.
    #[arg(long)]
    input: PathBuf,
    /// Weight stem; a fresh default model when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value = "b")]
    scenario: String,
    /// JSON grid configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    /// JSON experiment configuration; defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Prints `value` and reports whether the command should stop there.
fn printed<T: Serialize>(cli: &Cli, value: &T) -> Result<bool> {
    if cli.print_config {
        println!("{}", serde_json::to_string_pretty(value)?);
    }
    Ok(cli.print_config)
}

fn load_or_default<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map(read_json).transpose().map(Option::unwrap_or_default)
}

fn dtype(cli: &Cli) -> Dtype {
    if cli.f64_output {
        Dtype::F64
    } else {
        Dtype::F32
    }
}

fn scenario(cli: &Cli, arg: &str) -> Result<hsdeq::DegradationScenario> {
    let r = ScenarioRef::parse_arg(arg)?;
    r.resolve(cli.seed.unwrap_or(0))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::Degrade(a) => degrade(cli, a),
        Command::Pretrain(a) => pretrain(cli, a),
        Command::TrainDeq(a) => train(cli, a, TrainMode::Deq),
        Command::TrainDu(a) => train(cli, a, TrainMode::Du),
        Command::Infer(a) => infer_cmd(cli, a),
        Command::InferPnp(a) => infer_pnp_cmd(cli, a),
        Command::Eval(a) => eval(a),
        Command::Analyze(a) => analyze(cli, a),
        Command::Fig4(a) => fig4(cli, a),
        Command::Experiment(a) => experiment(cli, a),
    }
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let mut p: SynthParams = load_or_default(a.config.as_deref())?;
    p.count = a.count.unwrap_or(p.count);
    p.height = a.height.unwrap_or(p.height);
    p.width = a.width.unwrap_or(p.width);
    p.bands = a.bands.unwrap_or(p.bands);
    p.endmembers = a.endmembers.unwrap_or(p.endmembers);
    p.seed = cli.seed.unwrap_or(p.seed);
    if let Some(t) = &a.texture {
        p.texture = serde_json::from_value::<Texture>(serde_json::Value::String(t.clone()))
            .map_err(|_| Error::InvalidConfig(format!("unknown texture {t:?}")))?;
    }
    if printed(cli, &p)? {
        return Ok(());
    }
    p.validate()?;
    let paths = write_dataset(&p, &a.out, dtype(cli))?;
    write_json(&p, a.out.join("synth.json"))?;
    println!("wrote {} cubes to {}", paths.len(), a.out.display());
    Ok(())
}

fn degrade(cli: &Cli, a: &DegradeArgs) -> Result<()> {
    let s = scenario(cli, &a.scenario)?;
    if printed(cli, &ScenarioRef::parse_arg(&a.scenario)?)? {
        return Ok(());
    }
    if a.input.is_dir() {
        let paths = cube_paths(&a.input)?;
        let clean = paths.iter().map(read_cube).collect::<Result<Vec<_>>>()?;
        let data = PairedDataset::degrade(clean, &s)?;
        hsdeq_cli::create_dir(&a.out)?;
        for (path, y) in paths.iter().zip(&data.degraded) {
            let name = path.file_name().map(PathBuf::from).unwrap_or_else(|| cube_file_name(0).into());
            write_cube(y, a.out.join(name), dtype(cli))?;
        }
        println!("degraded {} cubes into {}", paths.len(), a.out.display());
    } else {
        let y = hsdeq::degrade::apply_degradation(&read_cube(&a.input)?, &s)?;
        write_cube(&y, &a.out, dtype(cli))?;
    }
    Ok(())
}

fn fresh_model(path: Option<&Path>, seed: Option<u64>) -> Result<DenoiserModel> {
    let mut cfg: DenoiserConfig = load_or_default(path)?;
    cfg.seed = seed.unwrap_or(cfg.seed);
    DenoiserModel::init(&cfg)
}

fn train_config(cli: &Cli, path: Option<&Path>, mode: TrainMode) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = load_or_default(path)?;
    cfg.mode = mode;
    cfg.seed = cli.seed.unwrap_or(cfg.seed);
    Ok(cfg)
}

fn finish_training(out: &Path, model: &DenoiserModel, rec: &RunRecord, seconds: f64) -> Result<()> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        hsdeq_cli::create_dir(parent)?;
    }
    save_model(model, out)?;
    write_json(rec, run_record_path(out))?;
    println!(
        "saved {} after {seconds:.1}s (final loss {:.6e}{})",
        out.with_extension("json").display(),
        rec.loss_history.last().copied().unwrap_or(f64::NAN),
        rec.b.map(|b| format!(", b = {b:.6}")).unwrap_or_default()
    );
    Ok(())
}

fn nonempty(dir: &Path) -> Result<Vec<hsdeq::SpectralCube>> {
    let cubes = read_dataset(dir)?;
    if cubes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(cubes)
}

fn pretrain(cli: &Cli, a: &PretrainArgs) -> Result<()> {
    let cfg = train_config(cli, a.config.as_deref(), TrainMode::Pretrain)?;
    if printed(cli, &cfg)? {
        return Ok(());
    }
    cfg.validate()?;
    let cubes = nonempty(&a.data)?;
    let model = match &a.init {
        Some(stem) => load_model(stem)?,
        None => fresh_model(a.model_config.as_deref(), cli.seed)?,
    };
    let start = Instant::now();
    let opts = RunOptions {
        validation: None,
        checkpoint_dir: a.checkpoints.as_deref(),
    };
    let run = pretrain_denoiser(&cubes, model, &cfg, &opts)?;
    let rec = RunRecord {
        mode: TrainMode::Pretrain,
        b: None,
        unroll_k: None,
        loss_history: run.loss_history,
        backward_warnings: 0,
    };
    finish_training(&a.out, &run.model, &rec, start.elapsed().as_secs_f64())
}

fn train(cli: &Cli, a: &TrainArgs, mode: TrainMode) -> Result<()> {
    let cfg = train_config(cli, a.config.as_deref(), mode)?;
    if printed(cli, &cfg)? {
        return Ok(());
    }
    cfg.validate()?;
    let s = scenario(cli, &a.scenario)?;
    let data = PairedDataset::degrade(nonempty(&a.data)?, &s)?;
    let model = match &a.init {
        Some(stem) => load_model(stem)?,
        None => fresh_model(a.model_config.as_deref(), cli.seed)?,
    };
    let opts = RunOptions {
        validation: None,
        checkpoint_dir: a.checkpoints.as_deref(),
    };
    let start = Instant::now();
    let run = match mode {
        TrainMode::Du => train_du(&data, model, &cfg, &opts)?,
        _ => train_deq(&data, model, &cfg, &opts)?,
    };
    if run.backward_warnings > 0 {
        eprintln!("warning: {} backward solves stopped above tolerance", run.backward_warnings);
    }
    let rec = RunRecord {
        mode,
        b: Some(run.b),
        unroll_k: (mode == TrainMode::Du).then_some(cfg.unroll_k),
        loss_history: run.loss_history,
        backward_warnings: run.backward_warnings,
    };
    finish_training(&a.out, &run.model, &rec, start.elapsed().as_secs_f64())
}

fn penalty(explicit: Option<f64>, stem: &Path) -> Result<f64> {
    match explicit {
        Some(b) => Ok(b),
        None => read_run_record(stem)?.b.ok_or_else(|| {
            Error::InvalidConfig(format!("no --b given and {} has no b", run_record_path(stem).display()))
        }),
    }
}

fn infer_cmd(cli: &Cli, a: &InferArgs) -> Result<()> {
    let mut cfg: FixedPointConfig = load_or_default(a.config.as_deref())?;
    cfg.max_iters = a.max_iters.unwrap_or(cfg.max_iters);
    if printed(cli, &cfg)? {
        return Ok(());
    }
    cfg.validate()?;
    let model = load_model(&a.model)?;
    let b = penalty(a.b, &a.model)?;
    let y = read_cube(&a.input)?;
    let s = scenario(cli, &a.scenario)?;
    let (x, trace) = infer(&y, &s.kernel, &model, b, &cfg)?;
    write_cube(&x, &a.out, dtype(cli))?;
    if let Some(path) = &a.trace {
        trace.write_csv(path)?;
    }
    println!(
        "{} iterations, converged: {}, final residual {:.3e}",
        trace.iters_used,
        trace.converged,
        trace.final_residual().unwrap_or(0.0)
    );
    Ok(())
}

fn infer_pnp_cmd(cli: &Cli, a: &InferPnpArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let y = read_cube(&a.input)?;
    let s = scenario(cli, &a.scenario)?;
    let (x, trace) = infer_pnp(&y, &s.kernel, &model, a.b, a.iters)?;
    write_cube(&x, &a.out, dtype(cli))?;
    if let Some(path) = &a.trace {
        trace.write_csv(path)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalEntry {
    restored: PathBuf,
    reference: PathBuf,
    #[serde(flatten)]
    report: MetricReport,
}

#[derive(Serialize)]
struct EvalReport {
    cubes: Vec<EvalEntry>,
    mean: MetricReport,
}

fn eval(a: &EvalArgs) -> Result<()> {
    let restored = cube_paths(&a.restored)?;
    let reference = cube_paths(&a.reference)?;
    if restored.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if restored.len() != reference.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} restored cubes vs {} references",
            restored.len(),
            reference.len()
        )));
    }
    let cubes = restored
        .into_iter()
        .zip(reference)
        .map(|(r, g)| {
            let report = evaluate(&read_cube(&r)?, &read_cube(&g)?)?;
            Ok(EvalEntry {
                restored: r,
                reference: g,
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = cubes.len() as f64;
    let mean_of = |f: fn(&MetricReport) -> f64| cubes.iter().map(|c| f(&c.report)).sum::<f64>() / n;
    let mean = MetricReport {
        rmse: mean_of(|m| m.rmse),
        psnr: mean_of(|m| m.psnr),
        ssim: mean_of(|m| m.ssim),
        ergas: mean_of(|m| m.ergas),
    };
    let report = EvalReport { cubes, mean };
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(out) = &a.out {
        write_json(&report, out)?;
    }
    Ok(())
}

fn analyze(cli: &Cli, a: &AnalyzeArgs) -> Result<()> {
    let s = scenario(cli, &a.scenario)?;
    let model = match &a.model {
        Some(stem) => load_model(stem)?,
        None => DenoiserModel::identity(a.bands),
    };
    let report = contraction_report(&s.kernel, a.height, a.width, &model, a.b, a.trials, cli.seed.unwrap_or(0))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn fig4(cli: &Cli, a: &Fig4Args) -> Result<()> {
    let cfg: Fig4Config = load_or_default(a.config.as_deref())?;
    if printed(cli, &cfg)? {
        return Ok(());
    }
    let x = read_cube(&a.input)?;
    let model = match &a.model {
        Some(stem) => load_model(stem)?,
        None => DenoiserModel::init(&DenoiserConfig {
            bands: x.bands(),
            seed: cli.seed.unwrap_or(0),
            ..Default::default()
        })?,
    };
    let s = scenario(cli, &a.scenario)?;
    let cells = run_fig4_experiment(&x, &s, &model, &cfg)?;
    write_fig4(&cells, &a.out)?;
    for c in &cells {
        println!(
            "mu {} b {}: final residual {:.3e}{}",
            c.mu,
            c.b,
            c.trace.final_residual().unwrap_or(f64::NAN),
            c.diverged_at.map(|k| format!(", diverged at {k}")).unwrap_or_default()
        );
    }
    Ok(())
}

fn experiment(cli: &Cli, a: &ExperimentArgs) -> Result<()> {
    let mut cfg: ExperimentConfig = load_or_default(a.config.as_deref())?;
    cfg.seed = cli.seed.unwrap_or(cfg.seed);
    cfg.apply_seed();
    if let Some(out) = &a.out {
        cfg.output_dir = out.clone();
    }
    if printed(cli, &cfg)? {
        return Ok(());
    }
    let report = run_experiment(&cfg)?;
    print!("{}", std::fs::read_to_string(report.dir.join("psnr_table.csv")).unwrap_or_default());
    println!("results in {}", report.dir.display());
    Ok(())
}
