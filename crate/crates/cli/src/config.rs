//! Experiment configuration: presets, JSON config files and flag overrides.
//!
//! Resolution order is preset defaults, then the config file, then flags.
//! The resolved [`ExperimentConfig`] is itself a valid config file.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use brightside::geometry::ProjectionParams;
use brightside::kernels::{KernelConfig, KernelKind};
use brightside::targets::{
    binary_regression_posterior, generate_separable_data, mv_student_t, BinaryRegression, Link, MvStudentT,
    RegressionData, SkewT, SkewTParams, TargetModel, DEFAULT_PRIOR_SCALE,
};
use brightside::tuning::TuneOptions;
use brightside::{chain_rng, TuneReport};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Default seed for generated regression data.
pub const DATA_SEED: u64 = 2024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Cauchy,
    Skewt,
    Logistic,
    Robit,
    Custom,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Cauchy => "cauchy",
            Preset::Skewt => "skewt",
            Preset::Logistic => "logistic",
            Preset::Robit => "robit",
            Preset::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    /// Isotropic multivariate Student-t.
    StudentT { nu: f64, loc: Vec<f64>, scale: f64 },
    /// Skew-t with identity scale matrix.
    SkewT { nu: f64, xi: Vec<f64>, alpha: Vec<f64> },
    /// Binary regression posterior. Data are read from `data` when given,
    /// otherwise generated as a separable set from `data_seed`.
    Regression {
        link: Link,
        n_obs: usize,
        covariates: usize,
        data_seed: u64,
        #[serde(default)]
        data: Option<PathBuf>,
        prior_scale: f64,
        prior_nu: f64,
    },
}

/// A target ready to sample.
#[derive(Debug, Clone)]
pub enum BuiltTarget {
    StudentT(MvStudentT),
    SkewT(SkewT),
    Regression(BinaryRegression),
}

impl BuiltTarget {
    pub fn model(&self) -> &dyn TargetModel {
        match self {
            BuiltTarget::StudentT(t) => t,
            BuiltTarget::SkewT(t) => t,
            BuiltTarget::Regression(t) => t,
        }
    }
}

impl TargetSpec {
    pub fn dim(&self) -> Result<usize> {
        match self {
            TargetSpec::StudentT { loc, .. } => Ok(loc.len()),
            TargetSpec::SkewT { xi, .. } => Ok(xi.len()),
            TargetSpec::Regression { data: Some(path), .. } => Ok(read_data(path)?.dim()),
            TargetSpec::Regression { covariates, .. } => Ok(*covariates),
        }
    }

    /// Regression data as used by [`TargetSpec::build`].
    pub fn regression_data(&self) -> Result<Option<RegressionData>> {
        let TargetSpec::Regression { link, n_obs, covariates, data_seed, data, prior_scale, prior_nu } = self else {
            return Ok(None);
        };
        let raw = match data {
            Some(path) => read_data(path)?,
            None => generate_separable_data(*n_obs, *covariates, &mut chain_rng(*data_seed, 0))
                .map_err(CliError::config)?,
        };
        Ok(Some(raw.with_link(*link).with_prior(*prior_scale, *prior_nu)))
    }

    pub fn build(&self) -> Result<BuiltTarget> {
        let built = match self {
            TargetSpec::StudentT { nu, loc, scale } => {
                BuiltTarget::StudentT(mv_student_t(loc.len(), *nu, loc.clone(), *scale).map_err(CliError::config)?)
            }
            TargetSpec::SkewT { nu, xi, alpha } => BuiltTarget::SkewT(
                SkewT::new(SkewTParams { xi: xi.clone(), alpha: alpha.clone(), nu: *nu }).map_err(CliError::config)?,
            ),
            TargetSpec::Regression { .. } => {
                let data = self.regression_data()?.expect("regression spec");
                BuiltTarget::Regression(binary_regression_posterior(data).map_err(CliError::config)?)
            }
        };
        Ok(built)
    }

    /// Natural starting point when a preset gives none.
    fn centre(&self, d: usize) -> Vec<f64> {
        match self {
            TargetSpec::StudentT { loc, .. } => loc.clone(),
            TargetSpec::SkewT { xi, .. } => xi.clone(),
            TargetSpec::Regression { .. } => vec![0.0; d],
        }
    }
}

fn read_data(path: &Path) -> Result<RegressionData> {
    let file = File::open(path).map_err(|e| CliError::config(format!("cannot read data {}: {e}", path.display())))?;
    RegressionData::read_csv(BufReader::new(file)).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneSettings {
    pub enabled: bool,
    pub steps: usize,
    pub mc_batch: usize,
    pub learning_rate: f64,
}

impl Default for TuneSettings {
    fn default() -> Self {
        TuneSettings { enabled: true, steps: 2000, mc_batch: 2000, learning_rate: 0.01 }
    }
}

/// Where reference quantiles come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceSpec {
    /// Closed-form Student-t marginals.
    Analytic,
    /// Independent draws from the target's exact sampler.
    Exact { draws: usize },
    /// An SCS chain `factor` times longer than the method chains, checked
    /// against a second one on another stream.
    LongChain { factor: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub preset: Preset,
    pub paper_scale: bool,
    pub dim: usize,
    pub target: TargetSpec,
    pub iterations: usize,
    pub burnin: usize,
    pub thinning: usize,
    pub replicates: usize,
    pub seed: u64,
    pub ell_o: f64,
    /// Kernel used by `sample`.
    pub kernel: KernelKind,
    /// Kernels compared by `experiment`.
    pub methods: Vec<KernelKind>,
    /// Initial step size of the walk kernels (SCS, SPS, RWM).
    pub step_size: f64,
    pub hmc_step_size: f64,
    pub leapfrog_steps: usize,
    /// Adapt step sizes during burn-in.
    pub adapt: bool,
    pub init: Vec<f64>,
    pub tune: TuneSettings,
    pub reference: ReferenceSpec,
    /// Leading coordinates covered by the Q-Q reports.
    pub report_coordinates: usize,
    pub out: PathBuf,
}

/// Values taken from command-line flags.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub iterations: Option<usize>,
    pub burnin: Option<usize>,
    pub thinning: Option<usize>,
    pub ell_o: Option<f64>,
    pub kernel: Option<KernelKind>,
    pub out: Option<PathBuf>,
    pub paper_scale: bool,
    pub dim: Option<usize>,
    pub replicates: Option<usize>,
    pub no_tune: bool,
    pub data: Option<PathBuf>,
}

fn skew_alpha(d: usize) -> Vec<f64> {
    let mut alpha = vec![0.0; d];
    alpha[0] = 100.0;
    if d > 1 {
        alpha[1] = -100.0;
    }
    alpha
}

impl ExperimentConfig {
    /// Defaults for `preset` in dimension `dim`. `custom` needs a target.
    pub fn preset(preset: Preset, paper_scale: bool, dim: usize, custom: Option<TargetSpec>) -> Result<Self> {
        let scale = |desk: usize, paper: usize| if paper_scale { paper } else { desk };
        let mut cfg = ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            preset,
            paper_scale,
            dim,
            target: TargetSpec::StudentT { nu: 1.0, loc: vec![0.0; dim], scale: 1.0 },
            iterations: scale(100_000, 500_000),
            burnin: scale(10_000, 100),
            thinning: 1,
            replicates: 1,
            seed: 0,
            ell_o: 1.1,
            kernel: KernelKind::Scs,
            methods: vec![KernelKind::Scs],
            step_size: 0.1,
            hmc_step_size: 0.1,
            leapfrog_steps: 10,
            adapt: true,
            init: vec![0.0; dim],
            tune: TuneSettings::default(),
            reference: ReferenceSpec::Analytic,
            report_coordinates: dim.min(4),
            out: PathBuf::from("out"),
        };
        match preset {
            Preset::Cauchy => {
                cfg.thinning = scale(1, 50);
                cfg.replicates = scale(4, 10);
                cfg.init = vec![1e3; dim];
                cfg.methods = vec![KernelKind::Scs, KernelKind::Sps, KernelKind::Rwm, KernelKind::Hmc];
                cfg.tune.enabled = false;
            }
            Preset::Skewt => {
                let alpha = skew_alpha(dim);
                cfg.target = TargetSpec::SkewT { nu: 1.0, xi: vec![0.0; dim], alpha };
                cfg.thinning = scale(10, 50);
                cfg.replicates = 10;
                cfg.init = vec![1.0; dim];
                cfg.methods = vec![KernelKind::Scs, KernelKind::Hmc];
                cfg.reference = ReferenceSpec::Exact { draws: scale(1_000_000, 10_000_000) };
            }
            Preset::Logistic | Preset::Robit => {
                let link = if preset == Preset::Logistic { Link::Logit } else { Link::Robit { nu: 2.0 } };
                cfg.target = TargetSpec::Regression {
                    link,
                    n_obs: scale(30, 50),
                    covariates: dim,
                    data_seed: DATA_SEED,
                    data: None,
                    prior_scale: DEFAULT_PRIOR_SCALE,
                    prior_nu: 2.0,
                };
                cfg.iterations = scale(100_000, 5_000_000);
                cfg.thinning = scale(10, 500);
                cfg.replicates = scale(4, 20);
                cfg.methods = vec![KernelKind::Scs, KernelKind::Hmc];
                cfg.reference = ReferenceSpec::LongChain { factor: 10 };
            }
            Preset::Custom => {
                let target = custom.ok_or_else(|| CliError::config("custom preset needs a target in the config file"))?;
                cfg.init = target.centre(dim);
                cfg.reference = match target {
                    TargetSpec::StudentT { .. } => ReferenceSpec::Analytic,
                    TargetSpec::SkewT { .. } => ReferenceSpec::Exact { draws: 1_000_000 },
                    TargetSpec::Regression { .. } => ReferenceSpec::LongChain { factor: 10 },
                };
                cfg.target = target;
            }
        }
        Ok(cfg)
    }

    /// Merges preset defaults, the optional config file and `ov`, then
    /// validates the result.
    pub fn resolve(ov: &Overrides) -> Result<Self> {
        let file = match &ov.config {
            Some(path) => read_config_value(path)?,
            None => Map::new(),
        };
        if let Some(v) = file.get("schema_version") {
            if v.as_u64() != Some(u64::from(SCHEMA_VERSION)) {
                return Err(CliError::config(format!("unsupported schema_version {v}, expected {SCHEMA_VERSION}")));
            }
        }
        let preset = match ov.preset {
            Some(p) => p,
            None => match file.get("preset") {
                Some(v) => serde_json::from_value(v.clone()).map_err(|e| CliError::config(format!("preset: {e}")))?,
                None => return Err(CliError::config("no preset given (use --preset or a config file)")),
            },
        };
        let paper_scale = ov.paper_scale || file.get("paper_scale").and_then(Value::as_bool).unwrap_or(false);
        let file_target = match file.get("target") {
            Some(v) => Some(
                serde_json::from_value::<TargetSpec>(v.clone()).map_err(|e| CliError::config(format!("target: {e}")))?,
            ),
            None => None,
        };
        let file_dim = match file.get("dim") {
            Some(v) => Some(v.as_u64().ok_or_else(|| CliError::config("dim must be a non-negative integer"))? as usize),
            None => None,
        };
        let data_dim = match &ov.data {
            Some(path) => Some(read_data(path)?.dim()),
            None => None,
        };
        let dim = match (preset, &file_target) {
            (Preset::Custom, Some(t)) => t.dim()?,
            _ => ov
                .dim
                .or(data_dim)
                .or(file_dim)
                .unwrap_or(match preset {
                    Preset::Logistic | Preset::Robit => if paper_scale { 20 } else { 5 },
                    _ => if paper_scale { 100 } else { 10 },
                }),
        };
        if dim == 0 {
            return Err(CliError::config("dim must be at least 1"));
        }
        let defaults = ExperimentConfig::preset(preset, paper_scale, dim, file_target)?;
        let mut merged = serde_json::to_value(&defaults).expect("config serialises");
        merge_into(&mut merged, file);
        let mut cfg: ExperimentConfig =
            serde_json::from_value(merged).map_err(|e| CliError::config(format!("config: {e}")))?;
        cfg.preset = preset;
        cfg.paper_scale = paper_scale;
        cfg.dim = dim;
        cfg.apply(ov)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, ov: &Overrides) -> Result<()> {
        if let Some(v) = ov.seed {
            self.seed = v;
        }
        if let Some(v) = ov.iterations {
            self.iterations = v;
        }
        if let Some(v) = ov.burnin {
            self.burnin = v;
        }
        if let Some(v) = ov.thinning {
            self.thinning = v;
        }
        if let Some(v) = ov.ell_o {
            self.ell_o = v;
        }
        if let Some(v) = ov.kernel {
            self.kernel = v;
        }
        if let Some(v) = &ov.out {
            self.out = v.clone();
        }
        if let Some(v) = ov.replicates {
            self.replicates = v;
        }
        if ov.no_tune {
            self.tune.enabled = false;
        }
        if let Some(path) = &ov.data {
            match &mut self.target {
                TargetSpec::Regression { data, covariates, .. } => {
                    *data = Some(path.clone());
                    *covariates = self.dim;
                }
                _ => return Err(CliError::config("--data applies only to regression targets")),
            }
        }
        Ok(())
    }

    /// Checks every precondition a run depends on.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {}", self.schema_version));
        }
        let target_dim = self.target.dim()?;
        if target_dim != self.dim {
            return bad(format!("target has dimension {target_dim} but dim is {}", self.dim));
        }
        if self.iterations <= self.burnin {
            return bad(format!("iterations ({}) must exceed burnin ({})", self.iterations, self.burnin));
        }
        if self.thinning == 0 || self.thinning > self.iterations - self.burnin {
            return bad(format!("thinning {} keeps no samples", self.thinning));
        }
        if self.replicates == 0 {
            return bad("replicates must be at least 1".into());
        }
        if self.report_coordinates == 0 || self.report_coordinates > self.dim {
            return bad(format!("report_coordinates must be in 1..={}", self.dim));
        }
        if !(1.0..2.0).contains(&self.ell_o) {
            return bad(format!("ell_o must lie in [1, 2), got {}", self.ell_o));
        }
        ProjectionParams::centered(self.dim, self.ell_o).map_err(|e| CliError::config(format!("ell_o: {e}")))?;
        if self.init.len() != self.dim || self.init.iter().any(|v| !v.is_finite()) {
            return bad(format!("init must hold {} finite values", self.dim));
        }
        if self.methods.is_empty() {
            return bad("methods must not be empty".into());
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return bad(format!("method {} listed twice", m.name()));
            }
        }
        for &kind in self.methods.iter().chain(std::iter::once(&self.kernel)) {
            self.kernel_config(kind).validate().map_err(|e| CliError::config(format!("{}: {e}", kind.name())))?;
        }
        self.tune_options().validate().map_err(|e| CliError::config(format!("tune: {e}")))?;
        match (&self.reference, &self.target) {
            (ReferenceSpec::Analytic, TargetSpec::StudentT { .. }) => {}
            (ReferenceSpec::Analytic, _) => return bad("analytic reference needs a student_t target".into()),
            (ReferenceSpec::Exact { .. }, TargetSpec::Regression { .. }) => {
                return bad("regression targets have no exact sampler".into())
            }
            (ReferenceSpec::Exact { draws }, _) if *draws < 2 => return bad("reference draws must be at least 2".into()),
            (ReferenceSpec::LongChain { factor: 0 }, _) => return bad("long_chain factor must be at least 1".into()),
            _ => {}
        }
        self.target.build()?;
        Ok(())
    }

    pub fn kernel_config(&self, kind: KernelKind) -> KernelConfig {
        let adapt = if self.adapt { self.burnin } else { 0 };
        match kind {
            KernelKind::Hmc => KernelConfig::hmc(self.hmc_step_size, self.leapfrog_steps, adapt),
            _ => KernelConfig::walk(kind, self.step_size, adapt),
        }
    }

    pub fn tune_options(&self) -> TuneOptions {
        TuneOptions {
            ell_o: self.ell_o,
            mc_batch: self.tune.mc_batch,
            steps: self.tune.steps,
            learning_rate: self.tune.learning_rate,
            seed: self.seed,
            ..TuneOptions::default()
        }
    }

    /// Projection used by SCS: tuned when a report is given, centred otherwise.
    pub fn projection(&self, tuned: Option<&TuneReport>) -> Result<ProjectionParams> {
        match tuned {
            Some(rep) => rep.params().map_err(CliError::runtime),
            None => ProjectionParams::centered(self.dim, self.ell_o).map_err(CliError::config),
        }
    }

    /// Total sampler iterations an `experiment` run performs, reference
    /// included.
    pub fn planned_iterations(&self) -> u64 {
        let per_chain = self.iterations as u64;
        let methods: u64 = self
            .methods
            .iter()
            .map(|k| if *k == KernelKind::Hmc { self.leapfrog_steps as u64 } else { 1 })
            .sum();
        let reference = match self.reference {
            ReferenceSpec::LongChain { factor } => 2 * factor as u64 * per_chain,
            _ => 0,
        };
        methods * per_chain * self.replicates as u64 + reference
    }
}

fn read_config_value(path: &Path) -> Result<Map<String, Value>> {
    let file = File::open(path).map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    match value {
        Value::Object(map) => Ok(map),
        _ => Err(CliError::config(format!("{}: expected a JSON object", path.display()))),
    }
}

/// Shallow merge, except `tune` which merges key by key.
fn merge_into(base: &mut Value, file: Map<String, Value>) {
    let base = base.as_object_mut().expect("config is an object");
    for (k, v) in file {
        match (k.as_str(), base.get_mut(&k), v) {
            ("tune", Some(Value::Object(b)), Value::Object(o)) => b.extend(o),
            (_, _, v) => {
                base.insert(k, v);
            }
        }
    }
}
