//! The `sample`, `tune` and `experiment` subcommands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use brightside::diagnostics::{empirical_quantiles, qq_report, qq_report_columns, QqReport, QuantileSpec};
use brightside::geometry::ProjectionParams;
use brightside::kernels::{run_chain, run_replicates, ChainOutput, KernelKind, RunSettings};
use brightside::par::{map_indexed, Execution};
use brightside::targets::student_t_quantile;
use brightside::tuning::tune;
use brightside::{chain_rng, TuneReport};

use crate::config::{BuiltTarget, ExperimentConfig, ReferenceSpec, TargetSpec, SCHEMA_VERSION};
use crate::error::{CliError, Result};
use crate::output::{create, ensure_dir, write_json, MethodMetrics, MethodSummary, SampleReport, Summary};

/// Random stream reserved for reference draws and reference chains, well
/// clear of the replicate streams.
pub const REFERENCE_STREAM: u64 = 1 << 32;

fn settings(cfg: &ExperimentConfig) -> RunSettings {
    RunSettings::new(cfg.iterations, cfg.burnin, cfg.thinning, cfg.seed)
}

/// Runs the tuner on `target`; skew-t targets get alignment diagnostics.
pub fn run_tuner(cfg: &ExperimentConfig, target: &BuiltTarget) -> Result<TuneReport> {
    let report = tune(target.model(), &cfg.tune_options()).map_err(CliError::runtime)?;
    Ok(match target {
        BuiltTarget::SkewT(t) => report.with_alignment(&t.params().alpha, &t.params().xi),
        _ => report,
    })
}

fn maybe_tune(cfg: &ExperimentConfig, target: &BuiltTarget, wanted: bool, dir: &Path) -> Result<Option<TuneReport>> {
    if !(wanted && cfg.tune.enabled) {
        return Ok(None);
    }
    let report = run_tuner(cfg, target)?;
    write_json(&dir.join("tune.json"), &report)?;
    Ok(Some(report))
}

/// Single chain of `cfg.kernel`; writes `samples.csv` and `report.json`.
pub fn cmd_sample(cfg: &ExperimentConfig) -> Result<SampleReport> {
    let target = cfg.target.build()?;
    ensure_dir(&cfg.out)?;
    let tuned = maybe_tune(cfg, &target, cfg.kernel == KernelKind::Scs, &cfg.out)?;
    let params = cfg.projection(tuned.as_ref())?;
    let chain = run_chain(&cfg.kernel_config(cfg.kernel), Some(&params), target.model(), &cfg.init, settings(cfg))
        .map_err(CliError::config)?;
    chain
        .write_samples_csv(create(&cfg.out.join("samples.csv"))?)
        .map_err(CliError::runtime)?;
    let report = SampleReport {
        schema_version: SCHEMA_VERSION,
        kernel: chain.kernel,
        dim: cfg.dim,
        iterations: cfg.iterations,
        burnin: cfg.burnin,
        thinning: cfg.thinning,
        kept: chain.samples.len(),
        acceptance_rate: chain.acceptance_rate,
        stepping_out_rate: chain.stepping_out_rate,
        step_size: chain.step_size,
        ess: chain.ess.clone(),
        seed: chain.seed,
        stream: chain.stream,
        wall_time: chain.wall_time,
        valid: chain.valid,
        error: chain.error.clone(),
        ell_o: cfg.ell_o,
        theta_bar: tuned.map(|t| t.theta_bar),
    };
    write_json(&cfg.out.join("report.json"), &report)?;
    if !chain.valid {
        return Err(CliError::runtime(format!(
            "chain failed: {}",
            chain.error.as_deref().unwrap_or("unknown error")
        )));
    }
    Ok(report)
}

/// Runs the tuner and writes `tune.json`.
pub fn cmd_tune(cfg: &ExperimentConfig) -> Result<TuneReport> {
    let target = cfg.target.build()?;
    ensure_dir(&cfg.out)?;
    let report = run_tuner(cfg, &target)?;
    write_json(&cfg.out.join("tune.json"), &report)?;
    Ok(report)
}

/// Reference quantiles per reported coordinate, plus the agreement of the
/// two reference chains when the reference is a chain.
pub fn reference_quantiles(
    cfg: &ExperimentConfig,
    target: &BuiltTarget,
    params: &ProjectionParams,
    spec: &QuantileSpec,
) -> Result<(Vec<Vec<f64>>, Option<f64>)> {
    let coords = cfg.report_coordinates;
    match (&cfg.reference, &cfg.target) {
        (ReferenceSpec::Analytic, TargetSpec::StudentT { nu, loc, scale }) => {
            let q = (0..coords)
                .map(|j| spec.probs().iter().map(|&p| loc[j] + scale * student_t_quantile(p, *nu)).collect())
                .collect();
            Ok((q, None))
        }
        (ReferenceSpec::Analytic, _) => Err(CliError::config("analytic reference needs a student_t target")),
        (ReferenceSpec::Exact { draws }, _) => {
            let mut rng = chain_rng(cfg.seed, REFERENCE_STREAM);
            let mut columns = vec![Vec::with_capacity(*draws); coords];
            for _ in 0..*draws {
                let y = target
                    .model()
                    .exact_sample(&mut rng)
                    .ok_or_else(|| CliError::config("target has no exact sampler"))?;
                for (col, v) in columns.iter_mut().zip(y) {
                    col.push(v);
                }
            }
            let q = columns
                .iter()
                .map(|c| empirical_quantiles(c, spec).map_err(CliError::runtime))
                .collect::<Result<_>>()?;
            Ok((q, None))
        }
        (ReferenceSpec::LongChain { factor }, _) => {
            let long = RunSettings {
                iterations: cfg.burnin + (cfg.iterations - cfg.burnin) * factor,
                ..settings(cfg)
            };
            let kc = cfg.kernel_config(KernelKind::Scs);
            let chains = map_indexed(2, Execution::default(), |k| {
                run_chain(&kc, Some(params), target.model(), &cfg.init, RunSettings {
                    stream: REFERENCE_STREAM + k as u64,
                    ..long
                })
            });
            let chains = chains
                .into_iter()
                .map(|c| match c {
                    Ok(c) if c.valid => Ok(c),
                    Ok(c) => Err(CliError::runtime(format!(
                        "reference chain failed: {}",
                        c.error.unwrap_or_default()
                    ))),
                    Err(e) => Err(CliError::runtime(format!("reference chain: {e}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            let mut q = Vec::with_capacity(coords);
            let mut agreement: f64 = 0.0;
            for j in 0..coords {
                let first = empirical_quantiles(&chains[0].coordinate(j), spec).map_err(CliError::runtime)?;
                let check = qq_report_columns(&[chains[1].coordinate(j)], j, &first, spec).map_err(CliError::runtime)?;
                agreement = agreement.max(check.max_rel_err());
                q.push(first);
            }
            Ok((q, Some(agreement)))
        }
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn metrics(
    chains: &[ChainOutput],
    reference: &[Vec<f64>],
    spec: &QuantileSpec,
) -> Result<(MethodMetrics, QqReport)> {
    let reports = reference
        .iter()
        .enumerate()
        .map(|(j, r)| qq_report(chains, j, r, spec).map_err(CliError::runtime))
        .collect::<Result<Vec<_>>>()?;
    let qq = QqReport::merge(reports);
    let coords = reference.len();
    let min_ess = chains
        .iter()
        .flat_map(|c| c.ess.iter().take(coords).copied())
        .fold(None, |m: Option<f64>, e| Some(m.map_or(e, |m| m.min(e))));
    let m = MethodMetrics {
        acceptance_rate: mean(chains.iter().map(|c| c.acceptance_rate)),
        stepping_out_rate: mean(chains.iter().map(|c| c.stepping_out_rate)),
        step_size: mean(chains.iter().map(|c| c.step_size)),
        min_ess,
        max_rel_err: qq.max_rel_err(),
        max_rel_err_central: qq.max_rel_err_within(0.05, 0.95),
        max_rel_err_tails: qq.max_rel_err_within(0.0, 0.01).max(qq.max_rel_err_within(0.99, 1.0)),
    };
    Ok((m, qq))
}

/// Output directory of an experiment.
pub fn experiment_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.join(cfg.preset.name())
}

/// Runs every method of the preset against its reference and writes the
/// Q-Q reports and `summary.json`. SCS is mandatory: any failed SCS
/// replicate is an error once the artifacts are written. Failed baselines
/// are only flagged.
pub fn cmd_experiment(cfg: &ExperimentConfig) -> Result<Summary> {
    let started = Instant::now();
    let target = cfg.target.build()?;
    let dir = experiment_dir(cfg);
    ensure_dir(&dir)?;
    write_json(&dir.join("config.json"), cfg)?;
    if let Some(data) = cfg.target.regression_data()? {
        data.write_csv(create(&dir.join("data.csv"))?).map_err(CliError::runtime)?;
    }
    let uses_scs = cfg.methods.contains(&KernelKind::Scs) || matches!(cfg.reference, ReferenceSpec::LongChain { .. });
    let tuned = maybe_tune(cfg, &target, uses_scs, &dir)?;
    let params = cfg.projection(tuned.as_ref())?;
    let spec = QuantileSpec::default();
    let (reference, reference_agreement) = reference_quantiles(cfg, &target, &params, &spec)?;

    let mut methods = Vec::new();
    for &kind in &cfg.methods {
        let t0 = Instant::now();
        let runs = run_replicates(
            &cfg.kernel_config(kind),
            Some(&params),
            target.model(),
            &cfg.init,
            settings(cfg),
            cfg.replicates,
            Execution::default(),
        );
        let mut errors = Vec::new();
        let mut valid = Vec::new();
        for (k, run) in runs.into_iter().enumerate() {
            match run {
                Ok(c) if c.valid => valid.push(c),
                Ok(c) => errors.push(format!("replicate {k}: {}", c.error.unwrap_or_default())),
                Err(e) => errors.push(format!("replicate {k}: {e}")),
            }
        }
        let metrics = if valid.is_empty() {
            None
        } else {
            let (m, qq) = metrics(&valid, &reference, &spec)?;
            qq.write_csv(create(&dir.join(format!("qq_{}.csv", kind.name())))?)
                .map_err(CliError::runtime)?;
            write_json(&dir.join(format!("qq_{}.json", kind.name())), &qq)?;
            Some(m)
        };
        methods.push(MethodSummary {
            method: kind,
            replicates: cfg.replicates,
            valid_replicates: valid.len(),
            errors,
            wall_time: t0.elapsed().as_secs_f64(),
            metrics,
        });
    }

    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        preset: cfg.preset,
        dim: cfg.dim,
        seed: cfg.seed,
        reference: cfg.reference.clone(),
        reference_agreement,
        tuned: tuned.is_some(),
        complete: methods.iter().all(|m| m.errors.is_empty()),
        methods,
        wall_time: started.elapsed().as_secs_f64(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    if let Some(scs) = summary.method(KernelKind::Scs) {
        if !scs.errors.is_empty() {
            return Err(CliError::runtime(format!("scs failed: {}", scs.errors.join("; "))));
        }
    }
    Ok(summary)
}
