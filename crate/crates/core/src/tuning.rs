//! Variational choice of the projection parameters.
//!
//! With the latitude fixed, pushing the uniform law on the bright side
//! through the projection gives a family `q_theta` on `R^d`. The tuner
//! minimises a Monte Carlo estimate of `KL(q_theta || pi)` (up to constants)
//! over the longitude `h_o`, shift `mu` and scale `R` with Adam, holding the
//! cap samples fixed within a step so gradients pass through the projection.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{sample_uniform_cap, GeometryError, ProjectionParams, SpherePoint, INTERIOR_MARGIN};
use crate::par::{self, Execution};
use crate::rng::chain_rng;
use crate::targets::TargetModel;
use crate::{dot, norm_sq};

/// Consecutive nonfinite objectives after which [`tune`] gives up.
pub const MAX_NONFINITE_STEPS: usize = 10;

const CHUNK: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TuningError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid tuning options: {0}")]
    InvalidOptions(String),
    #[error("objective was not finite for {steps} consecutive steps (last at step {at})")]
    NonfiniteObjective { steps: usize, at: usize },
    #[error("gradient is not finite")]
    NonfiniteGradient,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// The tunable part of the projection parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaBar {
    pub h_o: Vec<f64>,
    pub mu: Vec<f64>,
    pub r: f64,
}

impl ThetaBar {
    /// `h_o = 0`, `mu = 0`, `R = 1`.
    pub fn initial(d: usize) -> Self {
        ThetaBar { h_o: vec![0.0; d], mu: vec![0.0; d], r: 1.0 }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Validated projection parameters at latitude `ell_o`.
    pub fn params(&self, ell_o: f64) -> Result<ProjectionParams, GeometryError> {
        ProjectionParams::new(self.h_o.clone(), ell_o, self.mu.clone(), self.r)
    }

    // no validation: finite-difference probes may sit a hair outside the ball
    fn raw_params(&self, ell_o: f64) -> ProjectionParams {
        ProjectionParams { h_o: self.h_o.clone(), ell_o, mu: self.mu.clone(), r: self.r }
    }
}

/// Gradient of the KL objective with respect to `(h_o, mu, R)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlGradient {
    pub h_o: Vec<f64>,
    pub mu: Vec<f64>,
    pub r: f64,
}

impl KlGradient {
    fn zeros(d: usize) -> Self {
        KlGradient { h_o: vec![0.0; d], mu: vec![0.0; d], r: 0.0 }
    }

    fn add(&mut self, other: &KlGradient) {
        self.h_o.iter_mut().zip(&other.h_o).for_each(|(a, b)| *a += b);
        self.mu.iter_mut().zip(&other.mu).for_each(|(a, b)| *a += b);
        self.r += other.r;
    }

    fn scale(&mut self, c: f64) {
        self.h_o.iter_mut().for_each(|a| *a *= c);
        self.mu.iter_mut().for_each(|a| *a *= c);
        self.r *= c;
    }

    /// Flattened as `(h_o, mu, R)`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.h_o.clone();
        v.extend_from_slice(&self.mu);
        v.push(self.r);
        v
    }

    pub fn norm(&self) -> f64 {
        norm_sq(&self.to_vec()).sqrt()
    }

    fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }
}

/// Per-sample integrand `-log J(x) - log pi(y(x))`.
pub fn kl_terms(
    theta: &ThetaBar,
    ell_o: f64,
    target: &dyn TargetModel,
    cap_samples: &[SpherePoint],
    exec: Execution,
) -> Result<Vec<f64>, TuningError> {
    check_dims(theta, target)?;
    let p = theta.raw_params(ell_o);
    par::map_slice(cap_samples, exec, |x| {
        let y = p.forward(x)?;
        Ok(-p.log_jacobian_at_cap_point(x)? - target.log_density(&y))
    })
    .into_iter()
    .collect()
}

/// Monte Carlo KL objective: the mean of [`kl_terms`].
pub fn kl_objective(
    theta: &ThetaBar,
    ell_o: f64,
    target: &dyn TargetModel,
    cap_samples: &[SpherePoint],
) -> Result<f64, TuningError> {
    kl_objective_with(theta, ell_o, target, cap_samples, Execution::default())
}

pub fn kl_objective_with(
    theta: &ThetaBar,
    ell_o: f64,
    target: &dyn TargetModel,
    cap_samples: &[SpherePoint],
    exec: Execution,
) -> Result<f64, TuningError> {
    Ok(value_and_gradient(theta, ell_o, target, cap_samples, exec, false)?.0)
}

/// Reparameterised gradient of [`kl_objective`]; falls back to central finite
/// differences when the target has no gradient.
pub fn kl_gradient(
    theta: &ThetaBar,
    ell_o: f64,
    target: &dyn TargetModel,
    cap_samples: &[SpherePoint],
) -> Result<KlGradient, TuningError> {
    kl_gradient_with(theta, ell_o, target, cap_samples, Execution::default())
}

pub fn kl_gradient_with(
    theta: &ThetaBar,
    ell_o: f64,
    target: &dyn TargetModel,
    cap_samples: &[SpherePoint],
    exec: Execution,
) -> Result<KlGradient, TuningError> {
    Ok(value_and_gradient(theta, ell_o, target, cap_samples, exec, true)?.1.expect("gradient requested"))
}

fn check_dims(theta: &ThetaBar, target: &dyn TargetModel) -> Result<(), TuningError> {
    let d = target.dim();
    for got in [theta.h_o.len(), theta.mu.len()] {
        if got != d {
            return Err(TuningError::DimensionMismatch { expected: d, got });
        }
    }
    Ok(())
}

/// Objective and (optionally) gradient in one pass over the batch. Chunks
/// are summed in a fixed order so the result does not depend on `exec`.
pub fn value_and_gradient(
    theta: &ThetaBar,
    ell_o: f64,
    target: &dyn TargetModel,
    cap_samples: &[SpherePoint],
    exec: Execution,
    with_gradient: bool,
) -> Result<(f64, Option<KlGradient>), TuningError> {
    check_dims(theta, target)?;
    if cap_samples.is_empty() {
        return Err(TuningError::InvalidOptions("empty cap batch".into()));
    }
    let d = theta.dim();
    let n = cap_samples.len() as f64;
    let analytic = with_gradient && target.grad_log_density(&theta.mu).is_some();
    let p = theta.raw_params(ell_o);
    let chunks: Vec<&[SpherePoint]> = cap_samples.chunks(CHUNK).collect();
    let partial = par::map_slice(&chunks, exec, |chunk| {
        let mut value = 0.0;
        let mut grad = KlGradient::zeros(d);
        for x in chunk.iter() {
            let y = p.forward(x)?;
            value += -p.log_jacobian_at_cap_point(x)? - target.log_density(&y);
            if analytic {
                let g = target.grad_log_density(&y).ok_or(TuningError::NonfiniteGradient)?;
                sample_gradient(&p, x, &y, &g, &mut grad);
            }
        }
        Ok::<_, TuningError>((value, grad))
    });
    let mut value = 0.0;
    let mut grad = KlGradient::zeros(d);
    for part in partial {
        let (v, g) = part?;
        value += v;
        grad.add(&g);
    }
    value /= n;
    if !with_gradient {
        return Ok((value, None));
    }
    if analytic {
        grad.scale(1.0 / n);
        Ok((value, Some(grad)))
    } else {
        Ok((value, Some(finite_difference_gradient(theta, ell_o, target, cap_samples, exec)?)))
    }
}

/// Adds one sample's contribution to `d f / d(h_o, mu, R)` where
/// `f = -log J - log pi(y)` and `g = grad log pi(y)`.
fn sample_gradient(p: &ProjectionParams, x: &SpherePoint, y: &[f64], g: &[f64], acc: &mut KlGradient) {
    let d = p.dim() as f64;
    let lat = x.latitude();
    let s = p.dark_threshold() - lat;
    let ell_x = lat + 1.0;
    let hx = x.longitude();
    let proj = 1.0 - dot(hx, &p.h_o) - p.dark_threshold() * lat;
    let push = p.r * ell_x / s;
    for i in 0..g.len() {
        acc.h_o[i] += hx[i] / proj + push * g[i];
        acc.mu[i] -= g[i];
    }
    let radial: f64 = y.iter().zip(&p.mu).zip(g).map(|((yi, mi), gi)| (yi - mi) * gi).sum();
    acc.r += -(d + radial) / p.r;
}

/// Central differences on all `2d + 1` coordinates with common cap samples,
/// step `1e-5 (1 + |coordinate|)`.
pub fn finite_difference_gradient(
    theta: &ThetaBar,
    ell_o: f64,
    target: &dyn TargetModel,
    cap_samples: &[SpherePoint],
    exec: Execution,
) -> Result<KlGradient, TuningError> {
    let d = theta.dim();
    let f = |t: &ThetaBar| value_and_gradient(t, ell_o, target, cap_samples, exec, false).map(|v| v.0);
    let mut out = KlGradient::zeros(d);
    for k in 0..=2 * d {
        let mut plus = theta.clone();
        let mut minus = theta.clone();
        let (cp, cm) = match k {
            k if k < d => (&mut plus.h_o[k], &mut minus.h_o[k]),
            k if k < 2 * d => (&mut plus.mu[k - d], &mut minus.mu[k - d]),
            _ => (&mut plus.r, &mut minus.r),
        };
        let step = 1e-5 * (1.0 + cp.abs());
        *cp += step;
        *cm -= step;
        let slope = (f(&plus)? - f(&minus)?) / (2.0 * step);
        match k {
            k if k < d => out.h_o[k] = slope,
            k if k < 2 * d => out.mu[k - d] = slope,
            _ => out.r = slope,
        }
    }
    Ok(out)
}

/// Radially shrinks `h_o` into `||h_o||^2 <= 1 - (ell_o-1)^2 - 1e-9`.
pub fn project_params(theta: &ThetaBar, ell_o: f64) -> ThetaBar {
    let mut out = theta.clone();
    let bound = 1.0 - (ell_o - 1.0).powi(2) - INTERIOR_MARGIN;
    if bound <= 0.0 {
        out.h_o.iter_mut().for_each(|v| *v = 0.0);
        return out;
    }
    let n2 = norm_sq(&out.h_o);
    if n2 > bound {
        let c = (bound / n2).sqrt();
        out.h_o.iter_mut().for_each(|v| *v *= c);
        while norm_sq(&out.h_o) > bound {
            out.h_o.iter_mut().for_each(|v| *v *= 1.0 - 1e-15);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOptions {
    pub ell_o: f64,
    pub mc_batch: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub init: Option<ThetaBar>,
    /// Record `theta` every this many steps in the report.
    pub trace_every: usize,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for TuneOptions {
    fn default() -> Self {
        TuneOptions {
            ell_o: 1.1,
            mc_batch: 2000,
            steps: 2000,
            learning_rate: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            init: None,
            trace_every: 10,
            exec: Execution::default(),
        }
    }
}

impl TuneOptions {
    pub fn validate(&self) -> Result<(), TuningError> {
        let bad = |m: &str| Err(TuningError::InvalidOptions(m.into()));
        if self.mc_batch == 0 {
            return bad("mc_batch must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0,1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("Adam epsilon must be positive");
        }
        if self.trace_every == 0 {
            return bad("trace_every must be at least 1");
        }
        if !(1.0..=2.0).contains(&self.ell_o) {
            return Err(GeometryError::LatitudeOutOfRange(self.ell_o).into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMetrics {
    /// Cosine between `h_o` and the skewness direction (0 if `h_o = 0`).
    pub cosine: f64,
    /// `||mu - xi|| / ||xi||`, or `||mu||` when `xi = 0`.
    pub rel_distance: f64,
}

pub fn alignment_metrics(theta: &ThetaBar, alpha_skew: &[f64], xi: &[f64]) -> AlignmentMetrics {
    let nh = norm_sq(&theta.h_o).sqrt();
    let na = norm_sq(alpha_skew).sqrt();
    let cosine = if nh == 0.0 || na == 0.0 { 0.0 } else { dot(&theta.h_o, alpha_skew) / (nh * na) };
    let diff: Vec<f64> = theta.mu.iter().zip(xi).map(|(m, x)| m - x).collect();
    let nx = norm_sq(xi).sqrt();
    let dist = norm_sq(&diff).sqrt();
    AlignmentMetrics { cosine, rel_distance: if nx == 0.0 { dist } else { dist / nx } }
}

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let opt: Vec<Option<f64>> = v.iter().map(|x| x.is_finite().then_some(*x)).collect();
        opt.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let opt = Vec::<Option<f64>>::deserialize(d)?;
        Ok(opt.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub theta_bar: ThetaBar,
    pub ell_o: f64,
    /// NaN marks a skipped nonfinite step; JSON stores it as `null`.
    #[serde(with = "nan_as_null")]
    pub objective_trace: Vec<f64>,
    #[serde(with = "nan_as_null")]
    pub grad_norm_trace: Vec<f64>,
    /// `(step, theta)` pairs, every `trace_every` steps and at the end.
    pub theta_trace: Vec<(usize, ThetaBar)>,
    pub alignment: Option<AlignmentMetrics>,
    pub alignment_trace: Vec<(usize, AlignmentMetrics)>,
}

impl TuneReport {
    pub fn params(&self) -> Result<ProjectionParams, GeometryError> {
        self.theta_bar.params(self.ell_o)
    }

    /// Fills the skew alignment diagnostics from the recorded trace.
    pub fn with_alignment(mut self, alpha_skew: &[f64], xi: &[f64]) -> Self {
        self.alignment = Some(alignment_metrics(&self.theta_bar, alpha_skew, xi));
        self.alignment_trace = self
            .theta_trace
            .iter()
            .map(|(k, t)| (*k, alignment_metrics(t, alpha_skew, xi)))
            .collect();
        self
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], o: &TuneOptions) {
        self.t += 1;
        let c1 = 1.0 - o.adam_beta1.powi(self.t);
        let c2 = 1.0 - o.adam_beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = o.adam_beta1 * self.m[i] + (1.0 - o.adam_beta1) * grad[i];
            self.v[i] = o.adam_beta2 * self.v[i] + (1.0 - o.adam_beta2) * grad[i] * grad[i];
            params[i] -= o.learning_rate * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + o.adam_eps);
        }
    }
}

/// Draws `n` uniform bright-side points.
pub fn cap_batch<R: Rng + ?Sized>(d: usize, ell_o: f64, n: usize, rng: &mut R) -> Vec<SpherePoint> {
    (0..n).map(|_| sample_uniform_cap(d, ell_o, rng)).collect()
}

/// Adam on `(h_o, mu, log R)` with a fresh cap batch each step, projecting
/// `h_o` back into the observer ball after every update.
pub fn tune(target: &dyn TargetModel, opts: &TuneOptions) -> Result<TuneReport, TuningError> {
    opts.validate()?;
    let d = target.dim();
    let ell_o = opts.ell_o;
    let mut theta = project_params(&opts.init.clone().unwrap_or_else(|| ThetaBar::initial(d)), ell_o);
    check_dims(&theta, target)?;
    if !(theta.r > 0.0 && theta.r.is_finite()) {
        return Err(GeometryError::NonpositiveScale(theta.r).into());
    }
    theta.params(ell_o)?;

    let mut rng = chain_rng(opts.seed, 0);
    let mut adam = Adam::new(2 * d + 1);
    let mut objective_trace = Vec::with_capacity(opts.steps);
    let mut grad_norm_trace = Vec::with_capacity(opts.steps);
    let mut theta_trace = vec![(0, theta.clone())];
    let mut nonfinite_run = 0;

    for step in 0..opts.steps {
        let batch = cap_batch(d, ell_o, opts.mc_batch, &mut rng);
        let (value, grad) = value_and_gradient(&theta, ell_o, target, &batch, opts.exec, true)?;
        let grad = grad.expect("gradient requested");
        objective_trace.push(value);
        if !value.is_finite() || !grad.is_finite() {
            grad_norm_trace.push(f64::NAN);
            nonfinite_run += 1;
            if nonfinite_run >= MAX_NONFINITE_STEPS {
                return Err(TuningError::NonfiniteObjective { steps: nonfinite_run, at: step });
            }
            continue;
        }
        nonfinite_run = 0;
        grad_norm_trace.push(grad.norm());

        let mut flat = theta.h_o.clone();
        flat.extend_from_slice(&theta.mu);
        flat.push(theta.r.ln());
        let mut g = grad.to_vec();
        // chain rule for rho = log R
        g[2 * d] *= theta.r;
        adam.step(&mut flat, &g, opts);
        theta.h_o.copy_from_slice(&flat[..d]);
        theta.mu.copy_from_slice(&flat[d..2 * d]);
        theta.r = flat[2 * d].exp();
        theta = project_params(&theta, ell_o);

        if (step + 1) % opts.trace_every == 0 || step + 1 == opts.steps {
            theta_trace.push((step + 1, theta.clone()));
        }
    }
    theta.params(ell_o)?;
    Ok(TuneReport {
        theta_bar: theta,
        ell_o,
        objective_trace,
        grad_norm_trace,
        theta_trace,
        alignment: None,
        alignment_trace: Vec::new(),
    })
}
