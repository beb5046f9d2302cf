use std::path::{Path, PathBuf};

use consent_core::datastore::SyntheticConfig;
use consent_core::metrics::{DcfParams, DEFAULT_MAX_TRIALS};
use consent_core::trainer::SessionConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Where utterances come from. Synthetic data is used when no feature file
/// is given.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub synthetic: Option<SyntheticConfig>,
    pub feature_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub pcnt_old: u32,
    /// Speakers taken from the unassigned pool; `None` takes all of them.
    pub new_speakers: Option<usize>,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            pcnt_old: 50,
            new_speakers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub max_trials: usize,
    pub dcf: DcfParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_trials: DEFAULT_MAX_TRIALS,
            dcf: DcfParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Training seed; overrides `session.train.seed`.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub session: SessionConfig,
    pub registration: RegistrationConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            out_dir: PathBuf::from("run"),
            dataset: DatasetConfig::default(),
            session: SessionConfig::default(),
            registration: RegistrationConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. A relative feature file path is resolved against
    /// the config file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let (Some(file), Some(dir)) = (&cfg.dataset.feature_file, path.parent()) {
            if file.is_relative() {
                cfg.dataset.feature_file = Some(dir.join(file));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.dataset.synthetic.is_some() && self.dataset.feature_file.is_some() {
            return Err(CliError::Config(
                "dataset: give either synthetic or feature_file, not both".into(),
            ));
        }
        if self.registration.pcnt_old == 0 || self.registration.pcnt_old > 100 {
            return Err(CliError::Config(format!(
                "registration.pcnt_old: {} outside (0, 100]",
                self.registration.pcnt_old
            )));
        }
        self.eval.dcf.validate()?;
        self.session_config().validate()?;
        Ok(())
    }

    /// Session settings with the run seed applied.
    pub fn session_config(&self) -> SessionConfig {
        let mut s = self.session.clone();
        s.train.seed = self.seed;
        s
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
