//! Experiment configuration files (TOML), canonical emission and
//! fingerprints.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::interventions::InterventionPlan;
use crate::proxy::config::{ModelConfig, TrainConfig};
use crate::proxy::sweep::SweepGrid;

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Everything needed to reproduce one experiment.
///
/// ```toml
/// output_dir = "runs"
///
/// [model]
/// depth = 2
/// d_model = 64
/// activation = "gelu"
///
/// [train]
/// lr = 6e-4
/// steps = 2000
/// quant = "mxfp8-e4m3"
///
/// [[plan]]
/// step = 1500
/// action = "skip_ln_quant"
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub plan: Vec<InterventionPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<SweepGrid>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Self {
        ExperimentConfig {
            model,
            train,
            plan: Vec::new(),
            grid: None,
            output_dir: default_output_dir(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        for (i, p) in self.plan.iter().enumerate() {
            if p.step > self.train.steps {
                return Err(Error::Config {
                    path: format!("plan[{i}].step"),
                    message: format!("step {} is beyond the run length {}", p.step, self.train.steps),
                });
            }
        }
        Ok(())
    }

    /// TOML with every default spelled out.
    pub fn to_canonical(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Hash of the model, training and plan sections. The output directory
    /// is excluded so moving results does not change it.
    pub fn fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            model: &'a ModelConfig,
            train: &'a TrainConfig,
            plan: &'a [InterventionPlan],
            grid: &'a Option<SweepGrid>,
        }
        fingerprint(&Key {
            model: &self.model,
            train: &self.train,
            plan: &self.plan,
            grid: &self.grid,
        })
    }
}

/// First 16 hex digits of the SHA-256 of the value's JSON form with keys
/// sorted.
pub fn fingerprint<S: Serialize>(value: &S) -> String {
    let canonical = serde_json::to_value(value).expect("value serializes");
    let digest = Sha256::digest(canonical.to_string().as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Parse and validate. Errors name the offending key path.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| Error::Config {
        path: String::new(),
        message: e.message().to_string(),
    })?;
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Config {
            path: if path == "." { String::new() } else { path },
            message: e.into_inner().message().to_string(),
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_config(&text)
}
