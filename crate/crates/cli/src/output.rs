//! Artifact schemas and writers.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use brightside::kernels::KernelKind;
use brightside::ThetaBar;
use serde::{Deserialize, Serialize};

use crate::config::{Preset, ReferenceSpec};
use crate::error::{CliError, Result};

/// `report.json` written by `sample`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleReport {
    pub schema_version: u32,
    pub kernel: KernelKind,
    pub dim: usize,
    pub iterations: usize,
    pub burnin: usize,
    pub thinning: usize,
    pub kept: usize,
    pub acceptance_rate: f64,
    pub stepping_out_rate: f64,
    pub step_size: f64,
    pub ess: Vec<f64>,
    pub seed: u64,
    pub stream: u64,
    pub wall_time: f64,
    pub valid: bool,
    pub error: Option<String>,
    pub ell_o: f64,
    pub theta_bar: Option<ThetaBar>,
}

/// Per-method aggregate over the valid replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodMetrics {
    pub acceptance_rate: f64,
    pub stepping_out_rate: f64,
    pub step_size: f64,
    /// Smallest per-coordinate ESS over replicates; `None` when too few
    /// samples were kept.
    pub min_ess: Option<f64>,
    pub max_rel_err: f64,
    /// Over probabilities in [0.05, 0.95].
    pub max_rel_err_central: f64,
    /// Over probabilities at or beyond 0.01 and 0.99.
    pub max_rel_err_tails: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSummary {
    pub method: KernelKind,
    pub replicates: usize,
    pub valid_replicates: usize,
    pub errors: Vec<String>,
    pub wall_time: f64,
    pub metrics: Option<MethodMetrics>,
}

/// `summary.json` written by `experiment`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub schema_version: u32,
    pub preset: Preset,
    pub dim: usize,
    pub seed: u64,
    pub reference: ReferenceSpec,
    /// Maximum relative quantile error between the two reference chains.
    pub reference_agreement: Option<f64>,
    pub tuned: bool,
    pub methods: Vec<MethodSummary>,
    /// `false` when any replicate failed.
    pub complete: bool,
    pub wall_time: f64,
}

impl Summary {
    pub fn method(&self, kind: KernelKind) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == kind)
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(CliError::runtime)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}
