//! Configuration, file plumbing and the experiment runner behind the `hsdeq`
//! binary.

use std::fs;
use std::path::{Path, PathBuf};

use hsdeq::degrade::{scenario_preset, ScenarioSpec, SCENARIO_TAGS};
use hsdeq::training::TrainMode;
use hsdeq::{DegradationScenario, Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub mod config;
pub mod experiment;

pub use config::ExperimentConfig;
pub use experiment::{run_experiment, ExperimentReport};

/// Process exit status for a failed command.
pub fn exit_code(err: &Error) -> u8 {
    if err.is_numeric() {
        3
    } else {
        2
    }
}

pub(crate) fn io_err(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
    Error::Io {
        path: path.into(),
        source,
    }
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize + ?Sized>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn write_text(text: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn create_dir(path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// A preset tag (`"a"` to `"e"`) or an explicit kernel and noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioRef {
    Tag(String),
    Explicit(ScenarioSpec),
}

impl ScenarioRef {
    pub fn tag(tag: &str) -> Self {
        Self::Tag(tag.to_string())
    }

    /// Presets take `seed`; explicit scenarios keep their own.
    pub fn resolve(&self, seed: u64) -> Result<DegradationScenario> {
        match self {
            Self::Tag(tag) => Ok(scenario_preset(tag)?.with_seed(seed)),
            Self::Explicit(spec) => spec.build(),
        }
    }

    /// A tag, or the kernel family name for explicit scenarios.
    pub fn label(&self) -> String {
        match self {
            Self::Tag(tag) => tag.clone(),
            Self::Explicit(spec) => {
                let kind = serde_json::to_value(&spec.kernel)
                    .ok()
                    .and_then(|v| v.get("kind").and_then(|k| k.as_str()).map(str::to_string))
                    .unwrap_or_else(|| "custom".into());
                format!("{kind}-s{}", spec.noise_sigma)
            }
        }
    }

    /// Command-line form: a preset tag or the path of a JSON scenario file.
    pub fn parse_arg(arg: &str) -> Result<Self> {
        if SCENARIO_TAGS.contains(&arg) {
            return Ok(Self::tag(arg));
        }
        if Path::new(arg).is_file() {
            return Ok(Self::Explicit(read_json(arg)?));
        }
        Err(Error::UnknownScenario(arg.to_string()))
    }
}

/// Written as `<stem>.run.json` next to trained weights. Holds no timing so
/// that seeded runs reproduce it byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: TrainMode,
    /// Learned penalty; absent for pre-training.
    pub b: Option<f64>,
    pub unroll_k: Option<usize>,
    pub loss_history: Vec<f64>,
    pub backward_warnings: usize,
}

pub fn run_record_path(stem: impl AsRef<Path>) -> PathBuf {
    stem.as_ref().with_extension("run.json")
}

pub fn read_run_record(stem: impl AsRef<Path>) -> Result<RunRecord> {
    read_json(run_record_path(stem))
}

/// Collects `*.cube` paths: the file itself, or a directory's entries sorted by name.
pub fn cube_paths(path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| io_err(path, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "cube"))
        .collect();
    paths.sort();
    Ok(paths)
}
