//! Experiment configuration. Every field has a default, unknown keys are
//! rejected, and [`ExperimentConfig::validate`] checks the rest before any
//! work starts.

use std::path::PathBuf;

use hsdeq::denoiser::DenoiserConfig;
use hsdeq::synth::{SynthParams, Texture};
use hsdeq::training::{TrainConfig, TrainMode};
use hsdeq::{Error, FixedPointConfig, Result};
use serde::{Deserialize, Serialize};

use crate::ScenarioRef;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Generated in memory from these parameters.
    Synthetic(SynthParams),
    /// Every `*.cube` file in the directory, sorted by name.
    Directory(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Pnp,
    Deq,
    Du,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Pnp => "pnp",
            Method::Deq => "deq",
            Method::Du => "du",
        }
    }
}

/// Weights to load instead of training. Each is a stem accepted by
/// `load_model`; DEQ and DU stems also need a `<stem>.run.json` record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelPaths {
    pub pretrained: Option<PathBuf>,
    pub deq: Option<PathBuf>,
    pub du: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    /// The first `train_count` cubes train; the rest are held out.
    pub train_count: usize,
    pub train_scenario: ScenarioRef,
    pub test_scenarios: Vec<ScenarioRef>,
    /// Extra test cells: the training kernel at each of these noise levels.
    pub noise_sweep: Vec<f64>,
    pub methods: Vec<Method>,
    pub denoiser: DenoiserConfig,
    pub pretrain: TrainConfig,
    /// Shared by DEQ and DU training; `mode` is set per method.
    pub train: TrainConfig,
    /// Candidate PnP penalties, ranked by training-set PSNR. The winner also
    /// initializes `b` for DEQ and DU unless `train.b_init` is set.
    pub pnp_b_grid: Vec<f64>,
    /// Inference solver for DEQ; its `max_iters` is also the PnP iteration count.
    pub fixed_point: FixedPointConfig,
    pub models: ModelPaths,
    pub output_dir: PathBuf,
    /// Write every restored cube under `restored/`.
    pub save_restorations: bool,
    /// Copied into every seeded stage by [`ExperimentConfig::apply_seed`].
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::Synthetic(SynthParams {
                count: 30,
                texture: Texture::Smooth,
                ..SynthParams::default()
            }),
            train_count: 20,
            train_scenario: ScenarioRef::tag("a"),
            test_scenarios: ["a", "b", "c", "d", "e"].map(ScenarioRef::tag).to_vec(),
            noise_sweep: Vec::new(),
            methods: vec![Method::Pnp, Method::Deq, Method::Du],
            denoiser: DenoiserConfig::default(),
            pretrain: TrainConfig {
                mode: TrainMode::Pretrain,
                epochs: 100,
                batch_size: 4,
                lr_schedule: vec![(66, 1e-3), (34, 1e-4)],
                ..TrainConfig::default()
            },
            train: TrainConfig {
                epochs: 40,
                batch_size: 2,
                lr_schedule: vec![(20, 3e-4), (20, 3e-5)],
                ..TrainConfig::default()
            },
            pnp_b_grid: vec![0.01, 0.02, 0.05, 0.1, 0.2],
            fixed_point: FixedPointConfig::default(),
            models: ModelPaths::default(),
            output_dir: PathBuf::from("experiment-out"),
            save_restorations: false,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Propagates `self.seed` to the generator, initializer and both trainers.
    pub fn apply_seed(&mut self) {
        if let DatasetSpec::Synthetic(params) = &mut self.dataset {
            params.seed = self.seed;
        }
        self.denoiser.seed = self.seed;
        self.pretrain.seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        match &self.dataset {
            DatasetSpec::Synthetic(params) => {
                if params.count == 0 {
                    return Err(Error::EmptyDataset);
                }
                params.validate()?;
                if self.train_count >= params.count {
                    return bad(format!(
                        "train_count {} leaves no held-out cubes out of {}",
                        self.train_count, params.count
                    ));
                }
                if params.bands != self.denoiser.bands {
                    return bad(format!(
                        "dataset has {} bands but the denoiser expects {}",
                        params.bands, self.denoiser.bands
                    ));
                }
            }
            DatasetSpec::Directory(dir) => {
                if !dir.is_dir() {
                    return bad(format!("dataset directory {} does not exist", dir.display()));
                }
            }
        }
        let needs_training = self.methods.iter().any(|m| match m {
            Method::Pnp => self.models.pretrained.is_none(),
            Method::Deq => self.models.deq.is_none(),
            Method::Du => self.models.du.is_none(),
        });
        if needs_training && self.train_count == 0 {
            return bad("train_count must be positive when models are trained".into());
        }
        if self.methods.is_empty() {
            return bad("methods must not be empty".into());
        }
        if self.test_scenarios.is_empty() && self.noise_sweep.is_empty() {
            return bad("need at least one test scenario or noise level".into());
        }
        for s in self.test_scenarios.iter().chain([&self.train_scenario]) {
            s.resolve(self.seed)?;
        }
        if self.noise_sweep.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("noise_sweep values must be finite and >= 0".into());
        }
        if self.pnp_b_grid.is_empty() || self.pnp_b_grid.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return bad("pnp_b_grid needs at least one positive value".into());
        }
        for (name, path) in [
            ("pretrained", &self.models.pretrained),
            ("deq", &self.models.deq),
            ("du", &self.models.du),
        ] {
            if let Some(stem) = path {
                let json = stem.with_extension("json");
                if !json.is_file() {
                    return bad(format!("{name} model {} does not exist", json.display()));
                }
            }
        }
        for (name, stem) in [("deq", &self.models.deq), ("du", &self.models.du)] {
            if let Some(stem) = stem {
                let record = crate::run_record_path(stem);
                if !record.is_file() {
                    return bad(format!("{name} run record {} does not exist", record.display()));
                }
            }
        }
        self.pretrain.validate()?;
        self.train.validate()?;
        self.fixed_point.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"seed": 4, "noise_sweep": [0.01, 0.02], "methods": ["deq"]}"#).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.methods, vec![Method::Deq]);
        assert_eq!(cfg.train_count, 20);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sede": 1}"#).is_err());
    }

    #[test]
    fn seed_reaches_every_stage() {
        let mut cfg = ExperimentConfig {
            seed: 11,
            ..Default::default()
        };
        cfg.apply_seed();
        let DatasetSpec::Synthetic(p) = &cfg.dataset else { unreachable!() };
        assert_eq!((p.seed, cfg.denoiser.seed, cfg.pretrain.seed, cfg.train.seed), (11, 11, 11, 11));
    }

    #[test]
    fn empty_dataset_and_bad_split_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        if let DatasetSpec::Synthetic(p) = &mut cfg.dataset {
            p.count = 0;
        }
        assert!(matches!(cfg.validate(), Err(Error::EmptyDataset)));
        let cfg = ExperimentConfig {
            train_count: 30,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn missing_model_paths_are_rejected() {
        let cfg = ExperimentConfig {
            models: ModelPaths {
                deq: Some("/nonexistent/deq".into()),
                ..Default::default()
            },
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }
}
