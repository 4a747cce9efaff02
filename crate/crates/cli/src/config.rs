//! Versioned JSON configurations, one per subcommand.

use std::path::Path;

use prefix_moe::attention::TrialLimits;
use prefix_moe::estimation::FitConfig;
use prefix_moe::experiments::SweepSpec;
use prefix_moe::model::{MixingMeasure, RegressionModel};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

fn default_trials() -> usize {
    100
}

fn default_equiv_tolerance() -> f64 {
    1e-9
}

fn default_witness_tolerance() -> f64 {
    1e-10
}

fn default_order() -> u32 {
    1
}

fn default_dataset() -> String {
    "data.csv".into()
}

fn default_step() -> f64 {
    1e-5
}

fn default_mc() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquivConfig {
    pub version: u32,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_equiv_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub limits: TrialLimits,
}

/// Optional pass/fail windows checked after a sweep.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepExpectations {
    pub loss_slope: Option<[f64; 2]>,
    pub l2_slope: Option<[f64; 2]>,
    /// Minimum of `non_shared slope − shared slope` for paired sweeps.
    pub min_separation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub version: u32,
    pub sweep: SweepSpec,
    /// Also run the non-shared parameterization of a linear-shared truth on
    /// the same seeds.
    #[serde(default)]
    pub paired_non_shared: bool,
    #[serde(default)]
    pub expect: SweepExpectations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WitnessConfig {
    pub version: u32,
    /// Non-shared truth `G*`.
    pub truth: RegressionModel,
    pub n_values: Vec<u64>,
    #[serde(default = "default_order")]
    pub r: u32,
    pub mc_samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_witness_tolerance")]
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub version: u32,
    pub model: RegressionModel,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    /// Output CSV, relative to the output directory.
    #[serde(default = "default_dataset")]
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitCliConfig {
    pub version: u32,
    /// Dataset CSV, relative to the output directory.
    #[serde(default = "default_dataset")]
    pub dataset: String,
    pub fit: FitConfig,
    /// Reference measure for losses and oracle initialization; defaults to
    /// the generating measure recorded in the dataset metadata.
    #[serde(default)]
    pub truth: Option<MixingMeasure>,
    #[serde(default = "default_step")]
    pub grad_check_step: f64,
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
}

/// Parses `text`, checking the `version` field first and reporting the
/// offending field path and position on failure.
pub fn parse<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T, CliError> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| CliError::Config(format!("{origin}: invalid JSON at line {}, column {}: {e}", e.line(), e.column())))?;
    match value.get("version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(CONFIG_VERSION) => {}
        Some(v) => return Err(CliError::Config(format!("{origin}: unsupported config version {v} (expected {CONFIG_VERSION})"))),
        None => return Err(CliError::Config(format!("{origin}: missing integer field `version`"))),
    }
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let inner = e.inner();
        CliError::Config(format!(
            "{origin}: field `{}` (line {}, column {}): {inner}",
            e.path(),
            inner.line(),
            inner.column()
        ))
    })
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<(T, String), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    Ok((parse(&text, &path.display().to_string())?, text))
}
