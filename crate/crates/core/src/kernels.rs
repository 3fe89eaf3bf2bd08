//! Markov transition kernels and the chain runner.
//!
//! The projection sampler walks on the sphere: a Gaussian step in the tangent
//! space at `x` is pulled back onto the sphere, and a proposal that lands on
//! the dark side is carried along the great circle through `x` and the
//! proposal, in whole multiples of the proposal arc, until it re-emerges on
//! the bright side. The stepping-out map is symmetric, so the plain
//! Metropolis ratio of `pi(y) J(y)` applies.

use std::f64::consts::PI;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, ProjectionParams, SpherePoint};
use crate::rng::chain_rng;
use crate::targets::TargetModel;
use crate::{dot, norm_sq};

/// Below this value of `1 - <x,x'>^2` the great circle through `x` and `x'`
/// is numerically undefined.
pub const DEGENERACY_TOL: f64 = 1e-14;

/// Robbins-Monro exponent of the burn-in step-size schedule.
pub const ADAPT_EXPONENT: f64 = 0.6;

/// Adapted step sizes are kept inside `[MIN_STEP, MAX_STEP]`.
pub const MIN_STEP: f64 = 1e-10;
pub const MAX_STEP: f64 = 1e10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("invalid kernel configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("target density is not finite at {0:?}")]
    NonfiniteTarget(Vec<f64>),
    #[error("target provides no gradient")]
    MissingGradient,
    #[error("x and x' are (anti)podal; great circle undefined")]
    DegenerateProposal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Scs,
    Sps,
    Rwm,
    Hmc,
}

impl KernelKind {
    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Scs => "scs",
            KernelKind::Sps => "sps",
            KernelKind::Rwm => "rwm",
            KernelKind::Hmc => "hmc",
        }
    }
}

impl std::str::FromStr for KernelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "scs" => Ok(KernelKind::Scs),
            "sps" => Ok(KernelKind::Sps),
            "rwm" => Ok(KernelKind::Rwm),
            "hmc" => Ok(KernelKind::Hmc),
            other => Err(format!("unknown kernel '{other}' (expected scs, sps, rwm or hmc)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub kind: KernelKind,
    /// Step size: on the sphere for SCS/SPS, in target space for RWM, the
    /// leapfrog step for HMC.
    pub h: f64,
    pub leapfrog_steps: usize,
    pub target_accept: f64,
    /// Number of initial iterations during which `h` adapts; must not exceed
    /// the burn-in.
    pub adapt_burnin: usize,
}

impl KernelConfig {
    /// Walk-type kernel targeting acceptance 0.234.
    pub fn walk(kind: KernelKind, h: f64, adapt_burnin: usize) -> Self {
        KernelConfig { kind, h, leapfrog_steps: 1, target_accept: 0.234, adapt_burnin }
    }

    /// HMC with `leapfrog_steps` steps, targeting acceptance 0.8.
    pub fn hmc(eps: f64, leapfrog_steps: usize, adapt_burnin: usize) -> Self {
        KernelConfig { kind: KernelKind::Hmc, h: eps, leapfrog_steps, target_accept: 0.8, adapt_burnin }
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(KernelError::InvalidConfig(format!("step size must be positive, got {}", self.h)));
        }
        if self.kind == KernelKind::Hmc && self.leapfrog_steps == 0 {
            return Err(KernelError::InvalidConfig("HMC needs at least one leapfrog step".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(KernelError::InvalidConfig(format!(
                "target acceptance must lie in (0,1), got {}",
                self.target_accept
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// sphere moves

/// Tangent-space Gaussian step of size `h`, pulled back to the sphere.
pub fn propose_tangent<R: Rng + ?Sized>(x: &SpherePoint, h: f64, rng: &mut R) -> SpherePoint {
    let raw: Vec<f64> = (0..x.as_slice().len())
        .map(|_| h * rng.sample::<f64, _>(StandardNormal))
        .collect();
    tangent_move(x, &raw)
}

/// Deterministic core of [`propose_tangent`]: projects `raw` onto the tangent
/// space at `x` and renormalises `x + delta`.
pub fn tangent_move(x: &SpherePoint, raw: &[f64]) -> SpherePoint {
    let xs = x.as_slice();
    let c = dot(xs, raw);
    let moved = xs.iter().zip(raw).map(|(xi, ri)| xi + (ri - c * xi)).collect();
    SpherePoint::normalized(moved)
}

/// The great circle through a bright `x` and a dark `x'`, and the number of
/// whole arcs `alpha` needed to cross the dark arc.
#[derive(Debug, Clone, PartialEq)]
pub struct GreatCircleFrame {
    /// Unit vector orthogonal to `x` in the plane of `x` and `x'`.
    pub u: Vec<f64>,
    /// Arc from `x` to `x'`.
    pub alpha: f64,
    /// Arc from `x` to the circle's highest point.
    pub phi: f64,
    /// Half-width of the dark arc.
    pub gamma: f64,
    pub k: u64,
}

pub fn great_circle_frame(x: &SpherePoint, xp: &SpherePoint, ell_o: f64) -> Result<GreatCircleFrame, KernelError> {
    let xs = x.as_slice();
    let c = dot(xs, xp.as_slice()).clamp(-1.0, 1.0);
    let s2 = 1.0 - c * c;
    if s2 <= DEGENERACY_TOL {
        return Err(KernelError::DegenerateProposal);
    }
    let s = s2.sqrt();
    let mut u: Vec<f64> = xp.as_slice().iter().zip(xs).map(|(b, a)| (b - c * a) / s).collect();
    // clean up the O(eps) drift so u is orthonormal to x to machine precision
    let drift = dot(&u, xs);
    u.iter_mut().zip(xs).for_each(|(ui, xi)| *ui -= drift * xi);
    let un = norm_sq(&u).sqrt();
    u.iter_mut().for_each(|ui| *ui /= un);

    let alpha = c.acos();
    let zx = x.latitude();
    let zu = u[u.len() - 1];
    let amp = zx.hypot(zu);
    // latitude along the circle is amp * cos(theta - phi); for u_lat >= 0 this
    // is arccos(z_x / amp), the general case wraps into [0, 2 pi)
    let phi = if zu >= 0.0 {
        (zx / amp).clamp(-1.0, 1.0).acos()
    } else {
        2.0 * PI - (zx / amp).clamp(-1.0, 1.0).acos()
    };
    let gamma = ((ell_o - 1.0) / amp).clamp(-1.0, 1.0).acos();
    let k = ((phi + gamma) / alpha).floor() as u64 + 1;
    debug_assert!(k as f64 <= (2.0 * PI / alpha).ceil() + 1.0);
    Ok(GreatCircleFrame { u, alpha, phi, gamma, k })
}

/// Relocates a dark-side proposal `x'` to `cos(K alpha) x + sin(K alpha) u`.
pub fn stepping_out(x: &SpherePoint, xp: &SpherePoint, ell_o: f64) -> Result<SpherePoint, KernelError> {
    let frame = great_circle_frame(x, xp, ell_o)?;
    Ok(walk_frame(x, &frame))
}

fn walk_frame(x: &SpherePoint, frame: &GreatCircleFrame) -> SpherePoint {
    let angle = frame.k as f64 * frame.alpha;
    let (s, c) = angle.sin_cos();
    SpherePoint::normalized(x.as_slice().iter().zip(&frame.u).map(|(xi, ui)| c * xi + s * ui).collect())
}

// ---------------------------------------------------------------------------
// projection sampler

/// Chain state of the projection sampler: sphere point, its image and
/// `log pi(y) + log J(y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScsState {
    pub x: SpherePoint,
    pub y: Vec<f64>,
    pub log_weight: f64,
}

impl ScsState {
    /// Lifts `y0` with the inverse projection.
    pub fn from_point(params: &ProjectionParams, target: &dyn TargetModel, y0: &[f64]) -> Result<Self, KernelError> {
        Self::from_sphere(params, target, params.inverse(y0))
    }

    pub fn from_sphere(params: &ProjectionParams, target: &dyn TargetModel, x: SpherePoint) -> Result<Self, KernelError> {
        let y = params.forward(&x)?;
        let log_weight = target.log_density(&y) + params.log_jacobian_at_cap_point(&x)?;
        if !log_weight.is_finite() {
            return Err(KernelError::NonfiniteTarget(y));
        }
        Ok(ScsState { x, y, log_weight })
    }
}

/// A proposed move and its log-weight; `None` fields mean "reject outright".
#[derive(Debug, Clone, PartialEq)]
pub struct ScsProposal {
    pub x: SpherePoint,
    pub y: Option<Vec<f64>>,
    pub log_weight: f64,
    pub stepped_out: bool,
}

/// Outcome of one transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub accepted: bool,
    pub stepped_out: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScsKernel {
    pub params: ProjectionParams,
    pub h: f64,
}

impl ScsKernel {
    pub fn new(params: ProjectionParams, h: f64) -> Result<Self, KernelError> {
        params.validate()?;
        if !(h > 0.0) {
            return Err(KernelError::InvalidConfig(format!("step size must be positive, got {h}")));
        }
        Ok(ScsKernel { params, h })
    }

    /// Draws `x*` (tangent move, then stepping-out if it is dark) and
    /// evaluates its weight.
    pub fn propose<R: Rng + ?Sized>(
        &self,
        state: &ScsState,
        target: &dyn TargetModel,
        rng: &mut R,
    ) -> Result<ScsProposal, KernelError> {
        let ell_o = self.params.ell_o;
        let xp = propose_tangent(&state.x, self.h, rng);
        // the stereographic dark side is a single point; never step out there
        let dark = !self.params.is_stereographic() && xp.is_dark(ell_o);
        let x_star = if dark {
            match stepping_out(&state.x, &xp, ell_o) {
                Ok(x) => x,
                Err(KernelError::DegenerateProposal) => {
                    return Ok(ScsProposal { x: xp, y: None, log_weight: f64::NEG_INFINITY, stepped_out: true })
                }
                Err(e) => return Err(e),
            }
        } else {
            xp
        };
        let y = match self.params.forward(&x_star) {
            Ok(y) => y,
            // the threshold itself, hit only through rounding
            Err(GeometryError::DarkSidePoint { .. }) => {
                return Ok(ScsProposal { x: x_star, y: None, log_weight: f64::NEG_INFINITY, stepped_out: dark })
            }
            Err(e) => return Err(e.into()),
        };
        let log_pi = target.log_density(&y);
        if log_pi.is_nan() {
            return Err(KernelError::NonfiniteTarget(y));
        }
        let log_weight = log_pi + self.params.log_jacobian_at_cap_point(&x_star)?;
        Ok(ScsProposal { x: x_star, y: Some(y), log_weight, stepped_out: dark })
    }

    /// One Metropolis transition; on rejection `state` is untouched.
    pub fn step<R: Rng + ?Sized>(
        &self,
        state: &mut ScsState,
        target: &dyn TargetModel,
        rng: &mut R,
    ) -> Result<StepInfo, KernelError> {
        let prop = self.propose(state, target, rng)?;
        let log_ratio = (prop.log_weight - state.log_weight).min(0.0);
        let u: f64 = rng.random();
        let accepted = prop.y.is_some() && u.ln() < log_ratio;
        if accepted {
            state.x = prop.x;
            state.y = prop.y.expect("checked");
            state.log_weight = prop.log_weight;
        }
        Ok(StepInfo { accepted, stepped_out: prop.stepped_out })
    }
}

/// One projection-sampler transition from `x`. Returns the new sphere point,
/// whether the proposal was accepted, and the image of the new point.
pub fn scs_step<R: Rng + ?Sized>(
    x: &SpherePoint,
    p: &ProjectionParams,
    h: f64,
    target: &dyn TargetModel,
    rng: &mut R,
) -> Result<(SpherePoint, bool, Vec<f64>), KernelError> {
    let kernel = ScsKernel::new(p.clone(), h)?;
    let mut state = ScsState::from_sphere(p, target, x.clone())?;
    let info = kernel.step(&mut state, target, rng)?;
    Ok((state.x, info.accepted, state.y))
}

// ---------------------------------------------------------------------------
// Euclidean baselines

/// Position with cached log density (and gradient for HMC).
#[derive(Debug, Clone, PartialEq)]
pub struct EuclidState {
    pub y: Vec<f64>,
    pub log_p: f64,
    pub grad: Option<Vec<f64>>,
}

impl EuclidState {
    pub fn new(target: &dyn TargetModel, y: Vec<f64>, with_grad: bool) -> Result<Self, KernelError> {
        let log_p = target.log_density(&y);
        if !log_p.is_finite() {
            return Err(KernelError::NonfiniteTarget(y));
        }
        let grad = if with_grad {
            let g = target.grad_log_density(&y).ok_or(KernelError::MissingGradient)?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(KernelError::NonfiniteTarget(y));
            }
            Some(g)
        } else {
            None
        };
        Ok(EuclidState { y, log_p, grad })
    }
}

/// Gaussian random-walk Metropolis step.
pub fn rwm_step<R: Rng + ?Sized>(
    state: &mut EuclidState,
    h: f64,
    target: &dyn TargetModel,
    rng: &mut R,
) -> Result<bool, KernelError> {
    let prop: Vec<f64> = state
        .y
        .iter()
        .map(|v| v + h * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let log_p = target.log_density(&prop);
    if log_p.is_nan() {
        return Err(KernelError::NonfiniteTarget(prop));
    }
    let u: f64 = rng.random();
    let accepted = u.ln() < (log_p - state.log_p).min(0.0);
    if accepted {
        state.y = prop;
        state.log_p = log_p;
    }
    Ok(accepted)
}

/// `steps` leapfrog steps of size `eps` with identity mass matrix. Returns
/// `None` if the density or gradient stops being finite along the way.
pub fn leapfrog(
    q: &[f64],
    p: &[f64],
    grad: &[f64],
    eps: f64,
    steps: usize,
    target: &dyn TargetModel,
) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut q = q.to_vec();
    let mut p: Vec<f64> = p.iter().zip(grad).map(|(pi, gi)| pi + 0.5 * eps * gi).collect();
    let mut g = grad.to_vec();
    for l in 0..steps {
        q.iter_mut().zip(&p).for_each(|(qi, pi)| *qi += eps * pi);
        g = target.grad_log_density(&q)?;
        if g.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let w = if l + 1 == steps { 0.5 * eps } else { eps };
        p.iter_mut().zip(&g).for_each(|(pi, gi)| *pi += w * gi);
    }
    Some((q, p, g))
}

/// Hamiltonian Monte Carlo step with momentum refresh and Metropolis
/// correction on the total energy.
pub fn hmc_step<R: Rng + ?Sized>(
    state: &mut EuclidState,
    eps: f64,
    steps: usize,
    target: &dyn TargetModel,
    rng: &mut R,
) -> Result<bool, KernelError> {
    let grad = state.grad.as_ref().ok_or(KernelError::MissingGradient)?;
    let p0: Vec<f64> = (0..state.y.len()).map(|_| rng.sample(StandardNormal)).collect();
    let u: f64 = rng.random();
    let Some((q1, p1, g1)) = leapfrog(&state.y, &p0, grad, eps, steps, target) else {
        return Ok(false);
    };
    let log_p1 = target.log_density(&q1);
    if !log_p1.is_finite() {
        return Ok(false);
    }
    let h0 = -state.log_p + 0.5 * norm_sq(&p0);
    let h1 = -log_p1 + 0.5 * norm_sq(&p1);
    let accepted = u.ln() < (h0 - h1).min(0.0);
    if accepted {
        state.y = q1;
        state.log_p = log_p1;
        state.grad = Some(g1);
    }
    Ok(accepted)
}

/// Burn-in update `log h += t^{-0.6} (1{accepted} - target_accept)`.
///
/// When the acceptance rate stays above target for every `h` (a nearly
/// uniform pullback does this) the update diverges; the clamp keeps it finite.
pub fn adapt_step_size(h: f64, accepted: bool, t: usize, target_accept: f64) -> f64 {
    let gain = (t.max(1) as f64).powf(-ADAPT_EXPONENT);
    let hit = if accepted { 1.0 } else { 0.0 };
    (h * (gain * (hit - target_accept)).exp()).clamp(MIN_STEP, MAX_STEP)
}

// ---------------------------------------------------------------------------
// chain runner

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSettings {
    pub iterations: usize,
    pub burnin: usize,
    pub thinning: usize,
    pub seed: u64,
    /// Random-stream index under `seed` (replicate number).
    pub stream: u64,
}

impl RunSettings {
    pub fn new(iterations: usize, burnin: usize, thinning: usize, seed: u64) -> Self {
        RunSettings { iterations, burnin, thinning, seed, stream: 0 }
    }

    pub fn kept(&self) -> usize {
        (self.iterations - self.burnin) / self.thinning
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainOutput {
    pub kernel: KernelKind,
    /// Kept draws in target coordinates, one row per kept iteration.
    pub samples: Vec<Vec<f64>>,
    /// 1-based iteration number of each kept row.
    pub iterations: Vec<usize>,
    /// Post-burn-in acceptance rate.
    pub acceptance_rate: f64,
    /// Fraction of post-burn-in proposals that needed stepping-out.
    pub stepping_out_rate: f64,
    /// Step size after adaptation.
    pub step_size: f64,
    pub step_size_trace: Vec<f64>,
    /// Effective sample size per coordinate of the kept draws (empty when
    /// fewer than ten were kept).
    pub ess: Vec<f64>,
    pub seed: u64,
    pub stream: u64,
    pub wall_time: f64,
    /// `false` when the run aborted early; `samples` then holds what was
    /// collected before the failure.
    pub valid: bool,
    pub error: Option<String>,
}

impl ChainOutput {
    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    /// Column `j` of the kept draws.
    pub fn coordinate(&self, j: usize) -> Vec<f64> {
        self.samples.iter().map(|row| row[j]).collect()
    }

    pub fn coordinate_checked(&self, j: usize) -> Option<Vec<f64>> {
        self.samples.iter().map(|row| row.get(j).copied()).collect()
    }

    /// Writes `iter,y_1..y_d` rows.
    pub fn write_samples_csv<W: std::io::Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["iter".to_string()];
        header.extend((1..=self.dim()).map(|j| format!("y_{j}")));
        wtr.write_record(&header)?;
        for (it, row) in self.iterations.iter().zip(&self.samples) {
            let mut rec = vec![it.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Reads back the output of [`ChainOutput::write_samples_csv`] as
/// `(iterations, rows)`.
pub fn read_samples_csv<R: std::io::Read>(r: R) -> Result<(Vec<usize>, Vec<Vec<f64>>), String> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers().map_err(|e| e.to_string())?.clone();
    let d = header.len().saturating_sub(1);
    let expected = std::iter::once("iter".to_string()).chain((1..=d).map(|j| format!("y_{j}")));
    if !header.iter().map(str::to_string).eq(expected) {
        return Err(format!("unexpected samples header {header:?}"));
    }
    let mut iters = Vec::new();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        iters.push(rec[0].parse().map_err(|e| format!("bad iteration '{}': {e}", &rec[0]))?);
        let row = (1..=d)
            .map(|j| rec[j].parse::<f64>().map_err(|e| format!("bad value '{}': {e}", &rec[j])))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok((iters, rows))
}

enum Sampler {
    Sphere(ScsKernel, ScsState),
    Euclid(EuclidState),
}

impl Sampler {
    fn position(&self) -> &[f64] {
        match self {
            Sampler::Sphere(_, s) => &s.y,
            Sampler::Euclid(s) => &s.y,
        }
    }
}

/// Runs one chain. Configuration problems are returned as errors before any
/// iteration happens; a target failure mid-run yields a partial output with
/// `valid = false`.
pub fn run_chain(
    config: &KernelConfig,
    params: Option<&ProjectionParams>,
    target: &dyn TargetModel,
    init: &[f64],
    settings: RunSettings,
) -> Result<ChainOutput, KernelError> {
    config.validate()?;
    let d = target.dim();
    if init.len() != d {
        return Err(KernelError::InvalidConfig(format!("init has length {}, target dimension {d}", init.len())));
    }
    if settings.iterations <= settings.burnin {
        return Err(KernelError::InvalidConfig("iterations must exceed burn-in".into()));
    }
    if settings.thinning == 0 {
        return Err(KernelError::InvalidConfig("thinning must be at least 1".into()));
    }
    if config.adapt_burnin > settings.burnin {
        return Err(KernelError::InvalidConfig("adaptation window longer than burn-in".into()));
    }

    let started = Instant::now();
    let mut rng = chain_rng(settings.seed, settings.stream);
    let mut sampler = match config.kind {
        KernelKind::Scs | KernelKind::Sps => {
            let p = match (config.kind, params) {
                (KernelKind::Scs, Some(p)) => p.clone(),
                (KernelKind::Scs, None) => {
                    return Err(KernelError::InvalidConfig("SCS needs projection parameters".into()))
                }
                (_, Some(p)) => ProjectionParams::new(vec![0.0; d], 2.0, p.mu.clone(), p.r)?,
                (_, None) => ProjectionParams::stereographic(d),
            };
            if p.dim() != d {
                return Err(KernelError::InvalidConfig(format!(
                    "projection dimension {} does not match target dimension {d}",
                    p.dim()
                )));
            }
            let state = ScsState::from_point(&p, target, init)?;
            Sampler::Sphere(ScsKernel::new(p, config.h)?, state)
        }
        KernelKind::Rwm => Sampler::Euclid(EuclidState::new(target, init.to_vec(), false)?),
        KernelKind::Hmc => Sampler::Euclid(EuclidState::new(target, init.to_vec(), true)?),
    };

    let mut h = config.h;
    let trace_stride = (config.adapt_burnin / 1000).max(1);
    let mut trace = vec![h];
    let mut samples = Vec::with_capacity(settings.kept());
    let mut kept_iters = Vec::with_capacity(settings.kept());
    let mut accepted_after = 0usize;
    let mut stepped_after = 0usize;
    let mut failure = None;

    for it in 0..settings.iterations {
        let step = match &mut sampler {
            Sampler::Sphere(kernel, state) => {
                kernel.h = h;
                kernel.step(state, target, &mut rng)
            }
            Sampler::Euclid(state) => {
                let r = if config.kind == KernelKind::Hmc {
                    hmc_step(state, h, config.leapfrog_steps, target, &mut rng)
                } else {
                    rwm_step(state, h, target, &mut rng)
                };
                r.map(|accepted| StepInfo { accepted, stepped_out: false })
            }
        };
        let info = match step {
            Ok(info) => info,
            Err(e) => {
                failure = Some(e.to_string());
                break;
            }
        };
        if it < config.adapt_burnin {
            h = adapt_step_size(h, info.accepted, it + 1, config.target_accept);
            if (it + 1) % trace_stride == 0 {
                trace.push(h);
            }
        }
        if it >= settings.burnin {
            accepted_after += usize::from(info.accepted);
            stepped_after += usize::from(info.stepped_out);
            if (it + 1 - settings.burnin) % settings.thinning == 0 {
                samples.push(sampler.position().to_vec());
                kept_iters.push(it + 1);
            }
        }
    }

    let post = (settings.iterations - settings.burnin) as f64;
    let ess = crate::diagnostics::ess_per_coordinate(&samples).unwrap_or_default();
    Ok(ChainOutput {
        kernel: config.kind,
        samples,
        iterations: kept_iters,
        acceptance_rate: accepted_after as f64 / post,
        stepping_out_rate: stepped_after as f64 / post,
        step_size: h,
        step_size_trace: trace,
        ess,
        seed: settings.seed,
        stream: settings.stream,
        wall_time: started.elapsed().as_secs_f64(),
        valid: failure.is_none(),
        error: failure,
    })
}

/// Runs `replicates` chains with streams `0..replicates` under one seed.
pub fn run_replicates(
    config: &KernelConfig,
    params: Option<&ProjectionParams>,
    target: &dyn TargetModel,
    init: &[f64],
    settings: RunSettings,
    replicates: usize,
    exec: crate::par::Execution,
) -> Vec<Result<ChainOutput, KernelError>> {
    crate::par::map_indexed(replicates, exec, |k| {
        run_chain(config, params, target, init, RunSettings { stream: k as u64, ..settings })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::chain_rng;
    use crate::targets::{mv_student_t, MvStudentT};

    fn deg(a: f64) -> f64 {
        a.to_radians()
    }

    /// `pi(y) = 1/J(y)`: the uniform law on the bright side, pulled back.
    struct UniformPullback(ProjectionParams);

    impl TargetModel for UniformPullback {
        fn dim(&self) -> usize {
            self.0.dim()
        }
        fn log_density(&self, y: &[f64]) -> f64 {
            -self.0.log_jacobian(y).unwrap()
        }
    }

    #[test]
    fn tangent_move_hand_example() {
        let x = SpherePoint::normalized(vec![1.0, 0.0]);
        let xp = tangent_move(&x, &[0.3, 0.4]);
        assert!((xp.as_slice()[0] - 1.0 / 1.16f64.sqrt()).abs() < 1e-12);
        assert!((xp.as_slice()[1] - 0.4 / 1.16f64.sqrt()).abs() < 1e-12);
        assert!((xp.as_slice()[0] - 0.92848).abs() < 1e-5);
        assert!((xp.as_slice()[1] - 0.37139).abs() < 1e-5);
    }

    #[test]
    fn tangent_step_is_orthogonal_and_small() {
        let mut rng = chain_rng(4, 0);
        let x = SpherePoint::normalized(vec![0.3, -0.2, 0.5, -0.6]);
        for _ in 0..1000 {
            let raw: Vec<f64> = (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let c = dot(x.as_slice(), &raw);
            let delta: Vec<f64> = raw.iter().zip(x.as_slice()).map(|(r, xi)| r - c * xi).collect();
            assert!(dot(&delta, x.as_slice()).abs() < 1e-12);
        }
        let mut dists: Vec<f64> = (0..1000)
            .map(|_| {
                let xp = propose_tangent(&x, 1e-6, &mut rng);
                norm_sq(&xp.as_slice().iter().zip(x.as_slice()).map(|(a, b)| a - b).collect::<Vec<_>>()).sqrt()
            })
            .collect();
        dists.sort_by(f64::total_cmp);
        assert!(dists[500] < 1e-5);
    }

    #[test]
    fn frame_hand_example() {
        let x = SpherePoint::normalized(vec![1.0, 0.0]);
        let xp = SpherePoint::normalized(vec![deg(80.0).cos(), deg(80.0).sin()]);
        let f = great_circle_frame(&x, &xp, 1.5).unwrap();
        assert!(f.u[0].abs() < 1e-12 && (f.u[1] - 1.0).abs() < 1e-12);
        assert!((f.alpha - deg(80.0)).abs() < 1e-12);
        assert!((f.phi - PI / 2.0).abs() < 1e-12);
        assert!((f.gamma - PI / 3.0).abs() < 1e-12);
        assert_eq!(f.k, 2);

        let star = stepping_out(&x, &xp, 1.5).unwrap();
        assert!((star.as_slice()[0] - deg(160.0).cos()).abs() < 1e-12);
        assert!((star.as_slice()[1] - deg(160.0).sin()).abs() < 1e-12);
        assert!((star.as_slice()[0] + 0.93969).abs() < 1e-5);
        assert!(star.latitude() < 0.5);
    }

    #[test]
    fn degenerate_proposals() {
        let x = SpherePoint::normalized(vec![1.0, 0.0]);
        assert_eq!(great_circle_frame(&x, &x, 1.5), Err(KernelError::DegenerateProposal));
        let anti = SpherePoint::normalized(vec![-1.0, 0.0]);
        assert_eq!(great_circle_frame(&x, &anti, 1.5), Err(KernelError::DegenerateProposal));
    }

    #[test]
    fn dark_proposal_means_k_at_least_two() {
        let mut rng = chain_rng(8, 0);
        let p = ProjectionParams::centered(3, 1.3).unwrap();
        let mut hits = 0;
        while hits < 2000 {
            let x = crate::geometry::sample_uniform_cap(3, 1.3, &mut rng);
            let xp = propose_tangent(&x, 1.0, &mut rng);
            if !xp.is_dark(p.ell_o) {
                continue;
            }
            hits += 1;
            let f = great_circle_frame(&x, &xp, p.ell_o).unwrap();
            assert!(f.gamma <= PI / 2.0);
            assert!(f.alpha > f.phi - f.gamma && f.alpha < f.phi + f.gamma);
            assert!(f.k >= 2);
        }
    }

    #[test]
    fn wrapped_frame_when_walking_away_from_the_top() {
        // x below the equator, x' reached over more than a right angle
        let x = SpherePoint::normalized(vec![0.0, 1.0, -0.9]);
        let xp = SpherePoint::normalized(vec![0.2, -0.7, 0.69]);
        assert!(xp.is_dark(1.5) && !x.is_dark(1.5));
        let star = stepping_out(&x, &xp, 1.5).unwrap();
        assert!(star.latitude() <= 0.5 + 1e-12);
    }

    #[test]
    fn cauchy_projection_accepts_everything_on_cauchy() {
        let d = 3;
        let target = MvStudentT::cauchy(d);
        let kernel = ScsKernel::new(ProjectionParams::cauchy(d), 0.8).unwrap();
        let mut rng = chain_rng(5, 0);
        let mut state = ScsState::from_point(&kernel.params, &target, &[1.0, -2.0, 0.5]).unwrap();
        for _ in 0..2000 {
            assert!(kernel.step(&mut state, &target, &mut rng).unwrap().accepted);
        }
    }

    #[test]
    fn uniform_pullback_accepts_everything() {
        let p = ProjectionParams::new(vec![0.2, -0.1], 1.3, vec![1.0, 2.0], 1.5).unwrap();
        let target = UniformPullback(p.clone());
        let kernel = ScsKernel::new(p.clone(), 1.2).unwrap();
        let mut rng = chain_rng(6, 0);
        let mut state = ScsState::from_point(&p, &target, &[0.0, 0.0]).unwrap();
        for _ in 0..2000 {
            let prop = kernel.propose(&state, &target, &mut rng.clone()).unwrap();
            assert!((prop.log_weight - state.log_weight).abs() < 1e-8);
            assert!(kernel.step(&mut state, &target, &mut rng).unwrap().accepted);
        }
    }

    #[test]
    fn rejection_leaves_state_bit_identical() {
        // a very concentrated target rejects almost every big move
        let target = mv_student_t(2, 1.0, vec![0.0; 2], 1e-3).unwrap();
        let p = ProjectionParams::centered(2, 1.1).unwrap();
        let mut rng = chain_rng(7, 0);
        let x = p.inverse(&[0.0, 0.0]);
        let mut rejected = 0;
        for _ in 0..200 {
            let (x_new, acc, y) = scs_step(&x, &p, 1.5, &target, &mut rng).unwrap();
            if !acc {
                rejected += 1;
                assert_eq!(x_new, x);
                assert_eq!(y, p.forward(&x).unwrap());
            }
        }
        assert!(rejected > 0);

        let mut st = EuclidState::new(&target, vec![0.0, 0.0], true).unwrap();
        let before = st.clone();
        let mut rej = 0;
        for _ in 0..50 {
            if !rwm_step(&mut st, 10.0, &target, &mut rng).unwrap() {
                rej += 1;
            }
            if st.y == before.y {
                assert_eq!(st, before);
            }
        }
        assert!(rej > 0);
        let before = st.clone();
        if !hmc_step(&mut st, 5.0, 3, &target, &mut rng).unwrap() {
            assert_eq!(st, before);
        }
    }

    #[test]
    fn rwm_small_steps_accept() {
        let target = MvStudentT::cauchy(3);
        let mut st = EuclidState::new(&target, vec![0.0; 3], false).unwrap();
        let mut rng = chain_rng(1, 0);
        let acc = (0..1000).filter(|_| rwm_step(&mut st, 1e-4, &target, &mut rng).unwrap()).count();
        assert!(acc >= 990);
    }

    #[test]
    fn leapfrog_is_reversible() {
        let target = mv_student_t(4, 3.0, vec![0.5; 4], 1.0).unwrap();
        let q = vec![1.0, -0.3, 2.0, 0.1];
        let p = vec![0.4, 0.2, -1.0, 0.7];
        let g = target.grad_log_density(&q).unwrap();
        let (q1, p1, g1) = leapfrog(&q, &p, &g, 0.05, 20, &target).unwrap();
        let neg: Vec<f64> = p1.iter().map(|v| -v).collect();
        let (q2, p2, _) = leapfrog(&q1, &neg, &g1, 0.05, 20, &target).unwrap();
        for i in 0..4 {
            assert!((q2[i] - q[i]).abs() < 1e-10);
            assert!((p2[i] + p[i]).abs() < 1e-10);
        }
    }

    struct StdNormal(usize);
    impl TargetModel for StdNormal {
        fn dim(&self) -> usize {
            self.0
        }
        fn log_density(&self, y: &[f64]) -> f64 {
            -0.5 * norm_sq(y)
        }
        fn grad_log_density(&self, y: &[f64]) -> Option<Vec<f64>> {
            Some(y.iter().map(|v| -v).collect())
        }
    }

    #[test]
    fn hmc_energy_error_is_second_order() {
        let target = StdNormal(5);
        let mut rng = chain_rng(2, 0);
        let mut errs = Vec::new();
        for _ in 0..500 {
            let q: Vec<f64> = (0..5).map(|_| rng.sample(StandardNormal)).collect();
            let p: Vec<f64> = (0..5).map(|_| rng.sample(StandardNormal)).collect();
            let g = target.grad_log_density(&q).unwrap();
            let (q1, p1, _) = leapfrog(&q, &p, &g, 0.01, 10, &target).unwrap();
            let h0 = 0.5 * norm_sq(&q) + 0.5 * norm_sq(&p);
            let h1 = 0.5 * norm_sq(&q1) + 0.5 * norm_sq(&p1);
            errs.push((h1 - h0).abs());
        }
        errs.sort_by(f64::total_cmp);
        assert!(errs[250] < 1e-3);
        let mut st = EuclidState::new(&target, vec![0.0; 5], true).unwrap();
        let acc = (0..1000).filter(|_| hmc_step(&mut st, 0.01, 10, &target, &mut rng).unwrap()).count();
        assert!(acc > 990);
    }

    #[test]
    fn samples_csv_round_trip() {
        let target = MvStudentT::cauchy(3);
        let cfg = KernelConfig::walk(KernelKind::Scs, 0.5, 0);
        let out = run_chain(&cfg, Some(&ProjectionParams::cauchy(3)), &target, &[0.0; 3], RunSettings::new(50, 10, 2, 1)).unwrap();
        let mut buf = Vec::new();
        out.write_samples_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"iter,y_1,y_2,y_3\n"));
        let (iters, rows) = read_samples_csv(&buf[..]).unwrap();
        assert_eq!(iters, out.iterations);
        assert_eq!(rows, out.samples);
        assert!(read_samples_csv(&b"it,y_1\n1,2\n"[..]).is_err());
    }

    #[test]
    fn adaptation_is_clamped() {
        let mut h = 1.0;
        for t in 1..10_000_000 {
            h = adapt_step_size(h, true, t, 0.234);
        }
        assert_eq!(h, MAX_STEP);
    }

    #[test]
    fn adaptation_direction() {
        let mut h = 1.0;
        for t in 1..100 {
            let next = adapt_step_size(h, true, t, 0.234);
            assert!(next > h);
            h = next;
        }
        for t in 1..100 {
            let next = adapt_step_size(h, false, t, 0.234);
            assert!(next < h);
            h = next;
        }
    }

    #[test]
    fn run_chain_contracts() {
        let target = MvStudentT::cauchy(2);
        let p = ProjectionParams::centered(2, 1.1).unwrap();
        let cfg = KernelConfig::walk(KernelKind::Scs, 0.5, 100);
        let s = RunSettings::new(1003, 100, 3, 42);
        let a = run_chain(&cfg, Some(&p), &target, &[0.0, 0.0], s).unwrap();
        assert_eq!(a.samples.len(), (1003 - 100) / 3);
        assert_eq!(a.iterations[0], 103);
        let b = run_chain(&cfg, Some(&p), &target, &[0.0, 0.0], s).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.step_size_trace, b.step_size_trace);

        assert!(run_chain(&cfg, None, &target, &[0.0, 0.0], s).is_err());
        assert!(run_chain(&cfg, Some(&p), &target, &[0.0], s).is_err());
        assert!(run_chain(&cfg, Some(&p), &target, &[0.0, 0.0], RunSettings::new(10, 10, 1, 0)).is_err());
        assert!(run_chain(&KernelConfig::walk(KernelKind::Scs, -1.0, 0), Some(&p), &target, &[0.0; 2], s).is_err());
        assert!(run_chain(&KernelConfig::hmc(0.1, 0, 0), None, &target, &[0.0; 2], s).is_err());

        for cfg in [
            KernelConfig::walk(KernelKind::Sps, 0.5, 100),
            KernelConfig::walk(KernelKind::Rwm, 0.5, 100),
            KernelConfig::hmc(0.1, 5, 100),
        ] {
            let out = run_chain(&cfg, None, &target, &[0.0, 0.0], s).unwrap();
            assert!(out.valid);
            assert_eq!(out.samples.len(), 301);
            assert!((0.0..=1.0).contains(&out.acceptance_rate));
        }
    }

    #[test]
    fn stereographic_mode_never_steps_out() {
        let target = MvStudentT::cauchy(3);
        let cfg = KernelConfig::walk(KernelKind::Sps, 2.0, 0);
        let out = run_chain(&cfg, None, &target, &[0.0; 3], RunSettings::new(5000, 0, 1, 3)).unwrap();
        assert_eq!(out.stepping_out_rate, 0.0);
    }

    struct Exploding;
    impl TargetModel for Exploding {
        fn dim(&self) -> usize {
            1
        }
        fn log_density(&self, y: &[f64]) -> f64 {
            if y[0].abs() > 3.0 {
                f64::NAN
            } else {
                0.0
            }
        }
    }

    #[test]
    fn target_failure_gives_partial_output() {
        let cfg = KernelConfig::walk(KernelKind::Rwm, 1.0, 0);
        let out = run_chain(&cfg, None, &Exploding, &[0.0], RunSettings::new(10_000, 0, 1, 1)).unwrap();
        assert!(!out.valid);
        assert!(out.error.is_some());
        assert!(out.samples.len() < 10_000);
    }
}
