//! The single JSON run-config document shared by every subcommand.
//!
//! One schema serves all commands; each command reads the sections it
//! needs and ignores the rest, so a single file can drive a whole
//! experiment. Unknown keys anywhere are rejected up front.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use alseg_core::active_learning::ALConfig;
use alseg_core::nas::SearchSpace;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed: dataset generation, and the search seed fallback.
    pub seed: Option<u64>,
    pub dataset: Option<DatasetSection>,
    /// Where reports are written (al-run, nas-search).
    pub out_dir: Option<PathBuf>,
    pub al: Option<AlSection>,
    pub search: Option<SearchSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Dataset directory: gen-data writes it, al-run/nas-search read it.
    pub dir: Option<PathBuf>,
    /// Number of image/mask pairs (gen-data).
    pub n: Option<usize>,
    /// Square image side (gen-data).
    pub size: Option<usize>,
    /// Images held out from the end of the dataset as the test set
    /// (al-run, nas-search); default: one fifth.
    #[serde(default)]
    pub test_count: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlSection {
    /// The loop configuration (seed lives here).
    pub config: ALConfig,
    /// Compare mode: run each listed acquisition (n_seeds times each) with
    /// budget-only stopping. Empty list = single run of config.acquisition.
    #[serde(default)]
    pub acquisitions: Vec<String>,
    #[serde(default = "one")]
    pub n_seeds: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    pub space: SearchSpace,
    pub n_trials: usize,
    /// 0 is allowed: candidates are evaluated untrained.
    #[serde(default)]
    pub epochs_per_trial: usize,
    #[serde(default)]
    pub without_replacement: bool,
    /// Overrides the global seed for the search stream.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn one() -> usize {
    1
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, super::CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| super::CliError(format!("could not read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| super::CliError(format!("invalid config {}: {e}", path.display())))
    }
}
