//! Chain summaries: quantiles, KS distance, effective sample size and Q-Q
//! reports against a reference.

use std::io::Write;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::ChainOutput;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("empty input")]
    EmptyInput,
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("probabilities must be strictly increasing inside (0,1)")]
    InvalidProbs,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub const DEFAULT_PROBS: [f64; 11] = [0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 0.8, 0.9, 0.95, 0.98, 0.99];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileSpec {
    probs: Vec<f64>,
}

impl QuantileSpec {
    pub fn new(probs: Vec<f64>) -> Result<Self, DiagnosticsError> {
        let inside = probs.iter().all(|&p| p > 0.0 && p < 1.0);
        let increasing = probs.windows(2).all(|w| w[0] < w[1]);
        if probs.is_empty() || !inside || !increasing {
            return Err(DiagnosticsError::InvalidProbs);
        }
        Ok(QuantileSpec { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Keeps the probabilities inside `[lo, hi]`.
    pub fn restricted(&self, lo: f64, hi: f64) -> Self {
        QuantileSpec { probs: self.probs.iter().copied().filter(|p| (lo..=hi).contains(p)).collect() }
    }
}

impl Default for QuantileSpec {
    fn default() -> Self {
        QuantileSpec { probs: DEFAULT_PROBS.to_vec() }
    }
}

/// Type-7 quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = p * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted_copy(samples: &[f64]) -> Vec<f64> {
    let mut v = samples.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    v
}

/// Quantiles by linear interpolation of order statistics at rank `p(n-1)+1`.
pub fn empirical_quantiles(samples: &[f64], spec: &QuantileSpec) -> Result<Vec<f64>, DiagnosticsError> {
    if samples.is_empty() {
        return Err(DiagnosticsError::EmptyInput);
    }
    if samples.len() < 2 {
        return Err(DiagnosticsError::TooFewSamples { need: 2, got: samples.len() });
    }
    let sorted = sorted_copy(samples);
    Ok(spec.probs.iter().map(|&p| quantile_sorted(&sorted, p)).collect())
}

/// `sup |F_n - F|`, evaluated on both sides of every jump.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64, DiagnosticsError> {
    if samples.is_empty() {
        return Err(DiagnosticsError::EmptyInput);
    }
    let sorted = sorted_copy(samples);
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    Ok(d.clamp(0.0, 1.0))
}

/// One-sample KS critical value at the 1% level.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.63 / (n as f64).sqrt()
}

/// Sample autocorrelations `rho_0..rho_{n-1}` via zero-padded FFT.
pub fn autocorrelation(samples: &[f64]) -> Vec<f64> {
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let m = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = samples.iter().map(|&x| Complex::new(x - mean, 0.0)).collect();
    buf.resize(m, Complex::new(0.0, 0.0));
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(m).process(&mut buf);
    buf.iter_mut().for_each(|c| *c = Complex::new(c.norm_sqr(), 0.0));
    planner.plan_fft_inverse(m).process(&mut buf);
    let c0 = buf[0].re;
    if c0 <= 0.0 {
        return vec![1.0; n.min(1)];
    }
    buf[..n].iter().map(|c| c.re / c0).collect()
}

/// Effective sample size with Geyer's initial positive sequence, clipped to
/// `[1, n]`.
pub fn ess(samples: &[f64]) -> Result<f64, DiagnosticsError> {
    if samples.is_empty() {
        return Err(DiagnosticsError::EmptyInput);
    }
    let n = samples.len();
    if n < 10 {
        return Err(DiagnosticsError::TooFewSamples { need: 10, got: n });
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    if samples.iter().all(|&x| x == mean) {
        return Ok(1.0);
    }
    let rho = autocorrelation(samples);
    let mut tau = -1.0;
    let mut k = 0;
    while k + 1 < n {
        let pair = rho[k] + rho[k + 1];
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        k += 2;
    }
    Ok((n as f64 / tau).clamp(1.0, n as f64))
}

/// Per-coordinate ESS of a row-major sample matrix.
pub fn ess_per_coordinate(rows: &[Vec<f64>]) -> Result<Vec<f64>, DiagnosticsError> {
    let d = rows.first().ok_or(DiagnosticsError::EmptyInput)?.len();
    (0..d)
        .map(|j| ess(&rows.iter().map(|r| r[j]).collect::<Vec<_>>()))
        .collect()
}

/// Moving-block bootstrap percentile interval for the `p`-quantile.
pub fn block_bootstrap_quantile<R: Rng + ?Sized>(
    series: &[f64],
    p: f64,
    block_len: usize,
    replicates: usize,
    level: f64,
    rng: &mut R,
) -> Result<(f64, f64), DiagnosticsError> {
    let n = series.len();
    if n < 2 {
        return Err(DiagnosticsError::TooFewSamples { need: 2, got: n });
    }
    let b = block_len.clamp(1, n);
    let starts = n - b + 1;
    let mut stats = Vec::with_capacity(replicates);
    let mut buf = Vec::with_capacity(n + b);
    for _ in 0..replicates {
        buf.clear();
        while buf.len() < n {
            let s = rng.random_range(0..starts);
            buf.extend_from_slice(&series[s..s + b]);
        }
        buf.truncate(n);
        buf.sort_unstable_by(f64::total_cmp);
        stats.push(quantile_sorted(&buf, p));
    }
    stats.sort_unstable_by(f64::total_cmp);
    let tail = 0.5 * (1.0 - level);
    Ok((quantile_sorted(&stats, tail), quantile_sorted(&stats, 1.0 - tail)))
}

/// Block length for [`block_bootstrap_quantile`] sized to the integrated
/// autocorrelation time.
pub fn block_length_for(series: &[f64]) -> usize {
    let n = series.len();
    match ess(series) {
        Ok(e) => ((2.0 * n as f64 / e).ceil() as usize).clamp(1, n / 10 + 1),
        Err(_) => 1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QqRow {
    pub coord: usize,
    pub prob: f64,
    pub sample_q: f64,
    pub ref_q: f64,
    pub rel_err: f64,
    pub env_lo: f64,
    pub env_hi: f64,
}

/// Q-Q comparison of one coordinate across replicate chains.
///
/// `sample_q` is the pooled quantile, `env_lo`/`env_hi` the spread of the
/// per-replicate quantiles. Relative errors are `|s - r| / max(|r|, siqr)`
/// with `siqr` the pooled semi-interquartile range, which keeps quantiles
/// near zero from blowing up the ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QqReport {
    pub rows: Vec<QqRow>,
    pub replicates: usize,
    pub scale_floor: f64,
}

impl QqReport {
    pub fn max_rel_err(&self) -> f64 {
        self.rows.iter().map(|r| r.rel_err).fold(0.0, f64::max)
    }

    /// Largest relative error over probabilities in `[lo, hi]`.
    pub fn max_rel_err_within(&self, lo: f64, hi: f64) -> f64 {
        self.rows
            .iter()
            .filter(|r| (lo..=hi).contains(&r.prob))
            .map(|r| r.rel_err)
            .fold(0.0, f64::max)
    }

    pub fn merge(reports: impl IntoIterator<Item = QqReport>) -> QqReport {
        let mut rows = Vec::new();
        let mut replicates = 0;
        let mut scale_floor = f64::INFINITY;
        for r in reports {
            replicates = replicates.max(r.replicates);
            scale_floor = scale_floor.min(r.scale_floor);
            rows.extend(r.rows);
        }
        QqReport { rows, replicates, scale_floor }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DiagnosticsError> {
        let mut wtr = csv::Writer::from_writer(w);
        for row in &self.rows {
            wtr.serialize(row)?;
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Vec<QqRow>, DiagnosticsError> {
        let mut rdr = csv::Reader::from_reader(r);
        Ok(rdr.deserialize().collect::<Result<_, _>>()?)
    }

    pub fn to_json(&self) -> Result<String, DiagnosticsError> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn relative_error(sample: f64, reference: f64, floor: f64) -> f64 {
    (sample - reference).abs() / reference.abs().max(floor)
}

/// Builds a [`QqReport`] for `coordinate` from replicate chains.
pub fn qq_report(
    chains: &[ChainOutput],
    coordinate: usize,
    reference_quantiles: &[f64],
    spec: &QuantileSpec,
) -> Result<QqReport, DiagnosticsError> {
    let columns: Vec<Vec<f64>> = chains.iter().map(|c| c.coordinate_checked(coordinate)).collect::<Option<_>>().ok_or_else(
        || DiagnosticsError::DimensionMismatch(format!("coordinate {coordinate} out of range")),
    )?;
    qq_report_columns(&columns, coordinate, reference_quantiles, spec)
}

/// As [`qq_report`] for raw per-replicate sample columns.
pub fn qq_report_columns(
    columns: &[Vec<f64>],
    coordinate: usize,
    reference_quantiles: &[f64],
    spec: &QuantileSpec,
) -> Result<QqReport, DiagnosticsError> {
    if columns.is_empty() {
        return Err(DiagnosticsError::EmptyInput);
    }
    if reference_quantiles.len() != spec.len() {
        return Err(DiagnosticsError::DimensionMismatch(format!(
            "{} reference quantiles for {} probabilities",
            reference_quantiles.len(),
            spec.len()
        )));
    }
    let per_rep: Vec<Vec<f64>> = columns.iter().map(|c| empirical_quantiles(c, spec)).collect::<Result<_, _>>()?;
    let pooled = sorted_copy(&columns.concat());
    if pooled.len() < 2 {
        return Err(DiagnosticsError::TooFewSamples { need: 2, got: pooled.len() });
    }
    let siqr = 0.5 * (quantile_sorted(&pooled, 0.75) - quantile_sorted(&pooled, 0.25));
    let floor = if siqr > 0.0 { siqr } else { f64::MIN_POSITIVE };
    let rows = spec
        .probs
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let s = quantile_sorted(&pooled, p);
            let r = reference_quantiles[i];
            let (lo, hi) = per_rep
                .iter()
                .map(|q| q[i])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            QqRow { coord: coordinate, prob: p, sample_q: s, ref_q: r, rel_err: relative_error(s, r, floor), env_lo: lo, env_hi: hi }
        })
        .collect();
    Ok(QqReport { rows, replicates: columns.len(), scale_floor: floor })
}
