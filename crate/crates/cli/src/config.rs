use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use segxal_core::dataset::{load_dataset_dir, SyntheticBenchmark};
use segxal_core::orchestrator::RunConfig;
use segxal_core::types::Sample;

use crate::CliError;

/// Name of the effective configuration echoed into every run directory.
pub const ECHO_FILE: &str = "segxal.json";

pub const RUN_ROOT_ENV: &str = "SEGXAL_RUN_ROOT";

/// Configuration file: the run configuration plus data and service paths.
/// Every command-line flag of `segxal run` has a field here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CliConfig {
    #[serde(flatten)]
    pub run: RunConfig,
    /// Exported dataset directories; the synthetic benchmark is generated
    /// in memory when `train_dir` is absent.
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub benchmark: SyntheticBenchmark,
    pub run_dir: Option<PathBuf>,
    /// Where `run` looks for the annotation service in human-oracle mode.
    pub service_addr: String,
    pub poll_ms: u64,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            run: RunConfig::default(),
            train_dir: None,
            val_dir: None,
            benchmark: SyntheticBenchmark::default(),
            run_dir: None,
            service_addr: "127.0.0.1:8080".into(),
            poll_ms: 2000,
        }
    }
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::new(1, format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::new(1, format!("invalid config {}: {e}", path.display())))
    }

    pub fn load_data(&self) -> Result<(Vec<Sample>, Vec<Sample>), CliError> {
        match (&self.train_dir, &self.val_dir) {
            (Some(t), Some(v)) => Ok((load_dataset_dir(t)?, load_dataset_dir(v)?)),
            (Some(_), None) | (None, Some(_)) => Err(CliError::new(1, "train_dir and val_dir must be given together")),
            (None, None) => Ok(self.benchmark.generate()?),
        }
    }

    /// Explicit run directory, else `$SEGXAL_RUN_ROOT/<strategy>-s<seed>`
    /// with `runs` as the default root.
    pub fn resolve_run_dir(&self) -> PathBuf {
        if let Some(d) = &self.run_dir {
            return d.clone();
        }
        let root = std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        let strategy = serde_json::to_value(self.run.strategy)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        root.join(format!("{strategy}-s{}", self.run.al.seed))
    }
}
