//! Built-in target distributions.
//!
//! All log-densities are unnormalised. Every built-in is positive and
//! continuous on `R^d`, supplies an analytic gradient, and (except the
//! regression posterior) an exact sampler.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::{Rng, RngCore};
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::special::{ln_regularized_incomplete_beta, regularized_incomplete_beta};
use crate::{dot, norm_sq};

#[derive(Debug, Error)]
pub enum TargetError {
    #[error("invalid target parameter: {0}")]
    InvalidParameter(String),
    #[error("regression csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("regression csv: {0}")]
    Schema(String),
}

/// Unnormalised target density `pi` on `R^d`.
pub trait TargetModel: Send + Sync {
    fn dim(&self) -> usize;

    /// `log pi(y)` up to an additive constant.
    fn log_density(&self, y: &[f64]) -> f64;

    /// `grad log pi(y)`, when available.
    fn grad_log_density(&self, _y: &[f64]) -> Option<Vec<f64>> {
        None
    }

    /// One independent draw from `pi`, when an exact sampler exists.
    fn exact_sample(&self, _rng: &mut dyn RngCore) -> Option<Vec<f64>> {
        None
    }

    /// Tail-probe witness of `sup pi(y) (1+|y|^2)^{(d+1)/2} < infinity`.
    fn sub_cauchy(&self) -> bool
    where
        Self: Sized,
    {
        let mut rng = crate::rng::chain_rng(0x5ca1ab1e, 0);
        tail_probe(self, 1000, &mut rng).bounded
    }
}

impl<T: TargetModel + ?Sized> TargetModel for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn log_density(&self, y: &[f64]) -> f64 {
        (**self).log_density(y)
    }
    fn grad_log_density(&self, y: &[f64]) -> Option<Vec<f64>> {
        (**self).grad_log_density(y)
    }
    fn exact_sample(&self, rng: &mut dyn RngCore) -> Option<Vec<f64>> {
        (**self).exact_sample(rng)
    }
}

impl<T: TargetModel + ?Sized> TargetModel for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn log_density(&self, y: &[f64]) -> f64 {
        (**self).log_density(y)
    }
    fn grad_log_density(&self, y: &[f64]) -> Option<Vec<f64>> {
        (**self).grad_log_density(y)
    }
    fn exact_sample(&self, rng: &mut dyn RngCore) -> Option<Vec<f64>> {
        (**self).exact_sample(rng)
    }
}

// ---------------------------------------------------------------------------
// univariate Student-t

/// Log density of the standard univariate Student-t with `nu` degrees of freedom.
pub fn student_t_log_pdf(t: f64, nu: f64) -> f64 {
    ln_gamma((nu + 1.0) / 2.0) - ln_gamma(nu / 2.0) - 0.5 * (nu * PI).ln()
        - (nu + 1.0) / 2.0 * (t * t / nu).ln_1p()
}

/// CDF of the standard univariate Student-t.
pub fn student_t_cdf(t: f64, nu: f64) -> f64 {
    if t == 0.0 {
        return 0.5;
    }
    let x = nu / (nu + t * t);
    let tail = 0.5 * regularized_incomplete_beta(x, nu / 2.0, 0.5).expect("x in [0,1]");
    if t < 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

/// `log T_nu(t)`, accurate far into the lower tail.
pub fn student_t_log_cdf(t: f64, nu: f64) -> f64 {
    if t == 0.0 {
        return -std::f64::consts::LN_2;
    }
    let x = nu / (nu + t * t);
    let ln_tail =
        ln_regularized_incomplete_beta(x, nu / 2.0, 0.5).expect("x in [0,1]") - std::f64::consts::LN_2;
    if t < 0.0 {
        ln_tail
    } else {
        (-ln_tail.exp()).ln_1p()
    }
}

/// Inverse of [`student_t_cdf`] for `p` in (0, 1), by bisection.
pub fn student_t_quantile(p: f64, nu: f64) -> f64 {
    if !(p > 0.0 && p < 1.0) {
        return f64::NAN;
    }
    if p == 0.5 {
        return 0.0;
    }
    if p > 0.5 {
        return -student_t_quantile(1.0 - p, nu);
    }
    let mut lo = -1.0;
    while student_t_cdf(lo, nu) > p && lo > -1e300 {
        lo *= 2.0;
    }
    let mut hi = 0.0;
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if student_t_cdf(mid, nu) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `T'(t)/T(t)`, the derivative of `log T_nu`.
fn student_t_log_cdf_slope(t: f64, nu: f64) -> f64 {
    (student_t_log_pdf(t, nu) - student_t_log_cdf(t, nu)).exp()
}

// ---------------------------------------------------------------------------
// multivariate Student-t

/// Isotropic multivariate Student-t; `nu = 1` is the multivariate Cauchy.
#[derive(Debug, Clone, PartialEq)]
pub struct MvStudentT {
    pub nu: f64,
    pub loc: Vec<f64>,
    pub scale: f64,
}

/// Multivariate Student-t with location `loc` and isotropic `scale`.
pub fn mv_student_t(d: usize, nu: f64, loc: Vec<f64>, scale: f64) -> Result<MvStudentT, TargetError> {
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(TargetError::InvalidParameter(format!("nu must be positive, got {nu}")));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(TargetError::InvalidParameter(format!("scale must be positive, got {scale}")));
    }
    if loc.len() != d {
        return Err(TargetError::InvalidParameter(format!(
            "location has length {}, expected {d}",
            loc.len()
        )));
    }
    Ok(MvStudentT { nu, loc, scale })
}

impl MvStudentT {
    /// Standard `d`-variate Cauchy.
    pub fn cauchy(d: usize) -> Self {
        MvStudentT { nu: 1.0, loc: vec![0.0; d], scale: 1.0 }
    }
}

impl TargetModel for MvStudentT {
    fn dim(&self) -> usize {
        self.loc.len()
    }

    fn log_density(&self, y: &[f64]) -> f64 {
        let d = self.dim() as f64;
        let q: f64 = y
            .iter()
            .zip(&self.loc)
            .map(|(a, b)| ((a - b) / self.scale).powi(2))
            .sum();
        -(self.nu + d) / 2.0 * (q / self.nu).ln_1p()
    }

    fn grad_log_density(&self, y: &[f64]) -> Option<Vec<f64>> {
        let d = self.dim() as f64;
        let s2 = self.scale * self.scale;
        let q: f64 = y.iter().zip(&self.loc).map(|(a, b)| (a - b).powi(2) / s2).sum();
        let k = -(self.nu + d) / (self.nu + q) / s2;
        Some(y.iter().zip(&self.loc).map(|(a, b)| k * (a - b)).collect())
    }

    fn exact_sample(&self, rng: &mut dyn RngCore) -> Option<Vec<f64>> {
        let chi = ChiSquared::new(self.nu).ok()?;
        let v: f64 = chi.sample(rng) / self.nu;
        let w = self.scale / v.sqrt();
        Some(
            self.loc
                .iter()
                .map(|m| m + w * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        )
    }
}

// ---------------------------------------------------------------------------
// multivariate skew-t (identity scale matrix)

/// Skew-t with location `xi`, skewness `alpha`, `nu` degrees of freedom and
/// identity scale matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewTParams {
    pub xi: Vec<f64>,
    pub alpha: Vec<f64>,
    pub nu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkewT {
    params: SkewTParams,
}

impl SkewT {
    pub fn new(params: SkewTParams) -> Result<Self, TargetError> {
        if !(params.nu > 0.0 && params.nu.is_finite()) {
            return Err(TargetError::InvalidParameter(format!("nu must be positive, got {}", params.nu)));
        }
        if params.xi.len() != params.alpha.len() {
            return Err(TargetError::InvalidParameter("xi and alpha lengths differ".into()));
        }
        Ok(SkewT { params })
    }

    pub fn params(&self) -> &SkewTParams {
        &self.params
    }

    /// `(Q, alpha'z, w)` with `w = alpha'z sqrt((nu+d)/(nu+Q))`.
    fn parts(&self, y: &[f64]) -> (Vec<f64>, f64, f64, f64) {
        let z: Vec<f64> = y.iter().zip(&self.params.xi).map(|(a, b)| a - b).collect();
        let q = norm_sq(&z);
        let az = dot(&self.params.alpha, &z);
        let nu_d = self.params.nu + z.len() as f64;
        let w = az * (nu_d / (self.params.nu + q)).sqrt();
        (z, q, az, w)
    }
}

/// `log f(y)` for the skew-t, without the constant `log 2` and the
/// Student-t normaliser.
pub fn skew_t_log_density(y: &[f64], params: &SkewTParams) -> f64 {
    SkewT { params: params.clone() }.log_density(y)
}

/// One exact draw via `xi + V^{-1/2} Z`, `V ~ chi2_nu / nu`, `Z` skew-normal.
pub fn skew_t_exact_sample<R: Rng + ?Sized>(params: &SkewTParams, rng: &mut R) -> Vec<f64> {
    let u: Vec<f64> = (0..params.xi.len()).map(|_| rng.sample(StandardNormal)).collect();
    let w: f64 = rng.sample(StandardNormal);
    let sign = if w <= dot(&params.alpha, &u) { 1.0 } else { -1.0 };
    let v = ChiSquared::new(params.nu).expect("nu > 0").sample(rng) / params.nu;
    let k = sign / v.sqrt();
    params.xi.iter().zip(&u).map(|(m, ui)| m + k * ui).collect()
}

impl TargetModel for SkewT {
    fn dim(&self) -> usize {
        self.params.xi.len()
    }

    fn log_density(&self, y: &[f64]) -> f64 {
        let nu = self.params.nu;
        let d = self.dim() as f64;
        let (_, q, _, w) = self.parts(y);
        -(nu + d) / 2.0 * (q / nu).ln_1p() + student_t_log_cdf(w, nu + d)
    }

    fn grad_log_density(&self, y: &[f64]) -> Option<Vec<f64>> {
        let nu = self.params.nu;
        let d = self.dim() as f64;
        let (z, q, az, w) = self.parts(y);
        let base = -(nu + d) / (nu + q);
        let k = ((nu + d) / (nu + q)).sqrt();
        let slope = student_t_log_cdf_slope(w, nu + d);
        let shrink = az / (nu + q);
        Some(
            z.iter()
                .zip(&self.params.alpha)
                .map(|(zi, ai)| base * zi + slope * k * (ai - shrink * zi))
                .collect(),
        )
    }

    fn exact_sample(&self, rng: &mut dyn RngCore) -> Option<Vec<f64>> {
        Some(skew_t_exact_sample(&self.params, rng))
    }
}

// ---------------------------------------------------------------------------
// binary regression

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Link {
    Logit,
    /// Student-t CDF link with `nu` degrees of freedom.
    Robit { nu: f64 },
}

/// Binary-response data set with its model specification.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionData {
    /// `n` rows of `d` covariates.
    pub x: Vec<Vec<f64>>,
    pub y: Vec<u8>,
    pub link: Link,
    pub prior_scale: f64,
    pub prior_nu: f64,
}

/// Default weakly-informative coefficient prior scale.
pub const DEFAULT_PRIOR_SCALE: f64 = 2.5;

impl RegressionData {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<u8>) -> Result<Self, TargetError> {
        if x.len() != y.len() {
            return Err(TargetError::Schema(format!("{} rows of x but {} responses", x.len(), y.len())));
        }
        if let Some(d) = x.first().map(Vec::len) {
            if d == 0 || x.iter().any(|row| row.len() != d) {
                return Err(TargetError::Schema("ragged covariate rows".into()));
            }
        } else {
            return Err(TargetError::Schema("no observations".into()));
        }
        if y.iter().any(|&v| v > 1) {
            return Err(TargetError::Schema("responses must be 0 or 1".into()));
        }
        Ok(RegressionData { x, y, link: Link::Logit, prior_scale: DEFAULT_PRIOR_SCALE, prior_nu: 2.0 })
    }

    pub fn with_link(mut self, link: Link) -> Self {
        self.link = link;
        self
    }

    pub fn with_prior(mut self, scale: f64, nu: f64) -> Self {
        self.prior_scale = scale;
        self.prior_nu = nu;
        self
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.x[0].len()
    }

    /// Writes the `x_1..x_d, y` CSV layout with a header row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), TargetError> {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (1..=self.dim()).map(|j| format!("x_{j}")).collect();
        header.push("y".into());
        out.write_record(&header)?;
        for (row, &yi) in self.x.iter().zip(&self.y) {
            let mut rec: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            rec.push(yi.to_string());
            out.write_record(&rec)?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Reads the CSV layout written by [`RegressionData::write_csv`]; model
    /// settings default to logit link with the t_2(2.5) prior.
    pub fn read_csv<R: Read>(r: R) -> Result<Self, TargetError> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        let d = header.len().checked_sub(1).filter(|&d| d > 0).ok_or_else(|| {
            TargetError::Schema("need at least one covariate column and a y column".into())
        })?;
        for (j, name) in header.iter().enumerate() {
            let want = if j < d { format!("x_{}", j + 1) } else { "y".to_string() };
            if name.trim() != want {
                return Err(TargetError::Schema(format!("column {j} is '{name}', expected '{want}'")));
            }
        }
        let mut x = Vec::new();
        let mut y = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let row = (0..d)
                .map(|j| rec[j].trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| TargetError::Schema(e.to_string()))?;
            let yi = rec[d].trim().parse::<u8>().map_err(|e| TargetError::Schema(e.to_string()))?;
            x.push(row);
            y.push(yi);
        }
        RegressionData::new(x, y)
    }
}

/// Centres each column and rescales it to standard deviation 0.5
/// (population convention, divisor `n`). Constant columns are only centred.
pub fn standardize_columns(x: &mut [Vec<f64>]) {
    let n = x.len() as f64;
    let d = x.first().map_or(0, Vec::len);
    for j in 0..d {
        let mean = x.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = x.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        let k = if var > 0.0 { 0.5 / var.sqrt() } else { 1.0 };
        for r in x.iter_mut() {
            r[j] = (r[j] - mean) * k;
        }
    }
}

/// Raw covariates `x_i ~ N(0, I_d)` and responses `y_i = 1{x_i1 > 0}`.
pub fn generate_separable_raw<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> (Vec<Vec<f64>>, Vec<u8>) {
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let y = x.iter().map(|r: &Vec<f64>| u8::from(r[0] > 0.0)).collect();
    (x, y)
}

/// Separable data set, standardised.
pub fn generate_separable_data<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Result<RegressionData, TargetError> {
    if n < 2 || d < 1 {
        return Err(TargetError::InvalidParameter(format!("need n >= 2 and d >= 1, got n={n}, d={d}")));
    }
    let (mut x, y) = generate_separable_raw(n, d, rng);
    standardize_columns(&mut x);
    RegressionData::new(x, y)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Posterior over coefficients `beta` under independent `t_nu(scale)` priors.
#[derive(Debug, Clone)]
pub struct BinaryRegression {
    data: RegressionData,
}

pub fn binary_regression_posterior(data: RegressionData) -> Result<BinaryRegression, TargetError> {
    if !(data.prior_scale > 0.0 && data.prior_nu > 0.0) {
        return Err(TargetError::InvalidParameter("prior scale and nu must be positive".into()));
    }
    if let Link::Robit { nu } = data.link {
        if !(nu > 0.0) {
            return Err(TargetError::InvalidParameter("robit nu must be positive".into()));
        }
    }
    Ok(BinaryRegression { data })
}

impl BinaryRegression {
    pub fn data(&self) -> &RegressionData {
        &self.data
    }

    /// Log-likelihood alone (prior excluded).
    pub fn log_likelihood(&self, beta: &[f64]) -> f64 {
        self.data
            .x
            .iter()
            .zip(&self.data.y)
            .map(|(row, &yi)| {
                let eta = dot(row, beta);
                let sign = if yi == 1 { 1.0 } else { -1.0 };
                // log F(eta) for y=1, log(1-F(eta)) = log F(-eta) for y=0
                match self.data.link {
                    Link::Logit => -softplus(-sign * eta),
                    Link::Robit { nu } => student_t_log_cdf(sign * eta, nu),
                }
            })
            .sum()
    }

    fn log_prior(&self, beta: &[f64]) -> f64 {
        let s = self.data.prior_scale;
        let nu = self.data.prior_nu;
        beta.iter().map(|b| -(nu + 1.0) / 2.0 * ((b / s).powi(2) / nu).ln_1p()).sum()
    }
}

impl TargetModel for BinaryRegression {
    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn log_density(&self, beta: &[f64]) -> f64 {
        self.log_likelihood(beta) + self.log_prior(beta)
    }

    fn grad_log_density(&self, beta: &[f64]) -> Option<Vec<f64>> {
        let s2 = self.data.prior_scale.powi(2);
        let nu = self.data.prior_nu;
        let mut g: Vec<f64> = beta.iter().map(|b| -(nu + 1.0) * b / (nu * s2 + b * b)).collect();
        for (row, &yi) in self.data.x.iter().zip(&self.data.y) {
            let eta = dot(row, beta);
            let sign = if yi == 1 { 1.0 } else { -1.0 };
            // d/d eta log F(sign * eta)
            let slope = match self.data.link {
                Link::Logit => sign / (1.0 + (sign * eta).exp()),
                Link::Robit { nu } => sign * student_t_log_cdf_slope(sign * eta, nu),
            };
            for (gj, xj) in g.iter_mut().zip(row) {
                *gj += slope * xj;
            }
        }
        Some(g)
    }
}

// ---------------------------------------------------------------------------
// tail probe

/// Outcome of [`tail_probe`].
#[derive(Debug, Clone, PartialEq)]
pub struct TailProbe {
    /// `max_ray log pi(y) + (d+1)/2 log(1+|y|^2)` at `|y| = 1e5`.
    pub at_1e5: f64,
    /// Same at `|y| = 1e6`.
    pub at_1e6: f64,
    pub bounded: bool,
}

/// Numerical witness for the sub-Cauchy condition: along `rays` random
/// directions, `log pi(y) + (d+1)/2 log(1+|y|^2)` must not increase over the
/// last decade of radii `[1e5, 1e6]`. A heuristic, not a proof.
pub fn tail_probe<R: Rng + ?Sized>(target: &dyn TargetModel, rays: usize, rng: &mut R) -> TailProbe {
    let d = target.dim();
    let weight = |r: f64, u: &[f64]| {
        let y: Vec<f64> = u.iter().map(|v| v * r).collect();
        target.log_density(&y) + (d as f64 + 1.0) / 2.0 * (r * r).ln_1p()
    };
    let mut at_1e5 = f64::NEG_INFINITY;
    let mut at_1e6 = f64::NEG_INFINITY;
    let mut bounded = true;
    for _ in 0..rays {
        let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm_sq(&g).sqrt();
        let u: Vec<f64> = g.iter().map(|v| v / n).collect();
        let lo = weight(1e5, &u);
        let hi = weight(1e6, &u);
        at_1e5 = at_1e5.max(lo);
        at_1e6 = at_1e6.max(hi);
        if hi - lo > 1e-6 * (1.0 + lo.abs()) {
            bounded = false;
        }
    }
    TailProbe { at_1e5, at_1e6, bounded }
}
