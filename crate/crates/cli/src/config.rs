use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use swing_core::model::ModelConfig;
use swing_core::tree::PayoffMode;
use swing_core::TwoFactorParams64;

use crate::error::{CliError, CliResult};

/// Environment variable naming the default configuration file.
pub const CONFIG_ENV: &str = "SWING_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub grid: u64,
    pub transition: u64,
    pub policy: u64,
    #[serde(default = "default_simulate_seed")]
    pub simulate: u64,
}

fn default_simulate_seed() -> u64 {
    4
}

impl Default for Seeds {
    fn default() -> Self {
        Self::from_base(1)
    }
}

impl Seeds {
    /// Consecutive seeds starting at `base`.
    pub fn from_base(base: u64) -> Self {
        Self {
            grid: base,
            transition: base.wrapping_add(1),
            policy: base.wrapping_add(2),
            simulate: base.wrapping_add(3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PricingConfig {
    pub q_min: f64,
    /// Defaults to the number of dates.
    pub q_max: Option<f64>,
    pub grid_size: usize,
    pub n_samples: usize,
    /// Defaults to `n_samples`.
    pub transition_samples: Option<usize>,
    pub seeds: Seeds,
    pub policy_paths: usize,
    /// Cap on Lloyd sweeps per date; a run stops earlier once the relative
    /// distortion decrease falls below 1e-6.
    pub lloyd_iterations: usize,
    pub payoff_mode: PayoffMode,
    pub converge_sizes: Vec<usize>,
}

impl Default for PricingConfig {
    fn default() -> Self {
        Self {
            q_min: 0.0,
            q_max: None,
            grid_size: 50,
            n_samples: 100_000,
            transition_samples: None,
            seeds: Seeds::default(),
            policy_paths: 10_000,
            lloyd_iterations: 500,
            payoff_mode: PayoffMode::default(),
            converge_sizes: vec![10, 50, 100, 200],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Relative paths are resolved against the configuration file.
    pub directory: PathBuf,
    /// `"json"` also writes command results to `<command>.json` files.
    pub formats: Vec<String>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("out"),
            formats: vec!["csv".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub pricing: PricingConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// A validated configuration with its model resolved.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub run: RunConfig,
    pub params: TwoFactorParams64,
    pub out_dir: PathBuf,
}

impl Loaded {
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let run: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::new(run, base)
    }

    pub fn new(run: RunConfig, base: &Path) -> CliResult<Self> {
        let params = run.model.to_params(base)?;
        let p = &run.pricing;
        if p.grid_size == 0 {
            return Err(CliError::Config("grid_size must be at least 1".into()));
        }
        if p.n_samples < 10 * p.grid_size {
            return Err(CliError::Config(format!(
                "n_samples = {} is below 10 x grid_size",
                p.n_samples
            )));
        }
        if p.transition_samples == Some(0) || p.policy_paths == 0 || p.lloyd_iterations == 0 {
            return Err(CliError::Config("sample counts and iteration caps must be positive".into()));
        }
        if run.output.formats.iter().any(|f| f != "csv" && f != "json") {
            return Err(CliError::Config("output formats are `csv` and `json`".into()));
        }
        let out_dir = if run.output.directory.is_absolute() {
            run.output.directory.clone()
        } else {
            base.join(&run.output.directory)
        };
        Ok(Self { run, params, out_dir })
    }

    pub fn transition_samples(&self) -> usize {
        self.run.pricing.transition_samples.unwrap_or(self.run.pricing.n_samples)
    }

    pub fn wants_json(&self) -> bool {
        self.run.output.formats.iter().any(|f| f == "json")
    }
}
