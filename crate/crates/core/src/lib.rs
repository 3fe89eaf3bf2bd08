//! # brightside
//!
//! Metropolis sampling of heavy-tailed distributions through the sub-Cauchy
//! projection: the target on `R^d` is pulled back onto the "bright side" of a
//! unit sphere (the part below an interior observer point), a random walk runs
//! there, and states are mapped back with the projection.
//!
//! The crate is organised as
//!
//! * [`geometry`]: the projection family, its inverse, log-Jacobians, uniform
//!   sampling on the bright side and spherical-cap area formulas.
//! * [`kernels`]: the projection sampler transition (tangent random walk plus
//!   great-circle stepping-out), the stereographic special case, random-walk
//!   Metropolis and HMC baselines, and the chain runner.
//! * [`tuning`]: Monte Carlo KL objective over projection parameters with
//!   reparameterised gradients and Adam.
//! * [`targets`]: multivariate Student-t, skew-t and binary-regression
//!   posteriors.
//! * [`diagnostics`]: quantiles, KS statistics, ESS and Q-Q reports.
//!
//! Replicate chains, tuner batches and reference draws fan out over rayon when
//! the `parallel` feature is enabled (the default); see [`par`].
//!
//! ```
//! use brightside::geometry::{ProjectionParams, SpherePoint};
//!
//! let p = ProjectionParams::centered(2, 1.1).unwrap();
//! let z = p.inverse(&[3.0, -4.0]);
//! let y = p.forward(&z).unwrap();
//! assert!((y[0] - 3.0).abs() < 1e-10 && (y[1] + 4.0).abs() < 1e-10);
//! ```

pub mod diagnostics;
pub mod geometry;
pub mod kernels;
pub mod par;
pub mod rng;
pub mod special;
pub mod targets;
pub mod tuning;

pub use geometry::{ProjectionParams, SpherePoint};
pub use kernels::{ChainOutput, KernelConfig, KernelKind};
pub use rng::{chain_rng, ChainRng};
pub use targets::TargetModel;
pub use tuning::{ThetaBar, TuneOptions, TuneReport};

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}
