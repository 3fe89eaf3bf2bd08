//! The sub-Cauchy projection family.
//!
//! Sphere points are stored origin-centred: a [`SpherePoint`] `z` is a unit
//! vector in `R^{d+1}` and its latitude is `z[d]`. The classical picture puts
//! the sphere on top of the plane, centred at `e_{d+1}`; its latitude
//! `ell_x = z[d] + 1` only appears inside the formulas below. An observer
//! `o = (h_o, ell_o)` inside the ball removes the cap `z[d] > ell_o - 1` (the
//! dark side); every other sphere point maps to the plane along the line
//! through `o`.
//!
//! A projection is parameterised by [`ProjectionParams`] `(h_o, ell_o, mu, R)`,
//! with `mu`, `R` shifting and rescaling the plane. `ell_o = 1, h_o = 0` is the
//! Cauchy projection (the uniform law on the bright side pushes forward to a
//! multivariate Cauchy), and `ell_o = 2, h_o = 0` is stereographic projection.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::special::regularized_incomplete_beta;
use crate::{dot, norm_sq};

/// Slack kept between the observer and the sphere; keeps the constant
/// coefficient of the chord quadratic strictly negative.
pub const INTERIOR_MARGIN: f64 = 1e-9;

/// Round-off allowance on the chord-quadratic discriminant.
pub const DISCRIMINANT_SLACK: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("observer outside the ball: |h_o|^2 + (ell_o-1)^2 = {0} exceeds 1 - {INTERIOR_MARGIN}")]
    ObserverOutsideBall(f64),
    #[error("observer latitude {0} outside [1, 2]")]
    LatitudeOutOfRange(f64),
    #[error("scale R must be positive, got {0}")]
    NonpositiveScale(f64),
    #[error("ell_o = 2 requires h_o = 0")]
    BoundaryWithoutSymmetry,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite input")]
    NonfiniteInput,
    #[error("point on the dark side: latitude {latitude} >= {threshold}")]
    DarkSidePoint { latitude: f64, threshold: f64 },
    #[error("chord quadratic has negative discriminant {0}")]
    NegativeDiscriminant(f64),
}

/// Projection parameters `theta = (o, mu, R)` with observer `o = (h_o, ell_o)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionParams {
    pub h_o: Vec<f64>,
    pub ell_o: f64,
    pub mu: Vec<f64>,
    pub r: f64,
}

impl ProjectionParams {
    /// Validated constructor.
    pub fn new(h_o: Vec<f64>, ell_o: f64, mu: Vec<f64>, r: f64) -> Result<Self, GeometryError> {
        validate_params(ProjectionParams { h_o, ell_o, mu, r })
    }

    /// `h_o = 0`, `mu = 0`, `R = 1` at the given latitude.
    pub fn centered(d: usize, ell_o: f64) -> Result<Self, GeometryError> {
        Self::new(vec![0.0; d], ell_o, vec![0.0; d], 1.0)
    }

    /// The Cauchy projection: `h_o = 0, ell_o = 1`.
    pub fn cauchy(d: usize) -> Self {
        Self::centered(d, 1.0).expect("centre of the ball is a valid observer")
    }

    /// Stereographic projection: observer at the north pole.
    pub fn stereographic(d: usize) -> Self {
        Self::centered(d, 2.0).expect("north pole is the admitted boundary observer")
    }

    pub fn dim(&self) -> usize {
        self.h_o.len()
    }

    /// Latitude threshold in origin-centred coordinates: `z[d] > ell_o - 1` is dark.
    pub fn dark_threshold(&self) -> f64 {
        self.ell_o - 1.0
    }

    pub fn is_stereographic(&self) -> bool {
        self.ell_o == 2.0
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let d = self.h_o.len();
        if self.mu.len() != d {
            return Err(GeometryError::DimensionMismatch { expected: d, got: self.mu.len() });
        }
        let finite = self.ell_o.is_finite()
            && self.r.is_finite()
            && self.h_o.iter().chain(&self.mu).all(|v| v.is_finite());
        if !finite {
            return Err(GeometryError::NonfiniteInput);
        }
        if !(1.0..=2.0).contains(&self.ell_o) {
            return Err(GeometryError::LatitudeOutOfRange(self.ell_o));
        }
        if self.r <= 0.0 {
            return Err(GeometryError::NonpositiveScale(self.r));
        }
        if self.ell_o == 2.0 {
            if self.h_o.iter().any(|&v| v != 0.0) {
                return Err(GeometryError::BoundaryWithoutSymmetry);
            }
            return Ok(());
        }
        let depth = norm_sq(&self.h_o) + (self.ell_o - 1.0).powi(2);
        if depth > 1.0 - INTERIOR_MARGIN {
            return Err(GeometryError::ObserverOutsideBall(depth));
        }
        Ok(())
    }

    /// Origin-centred observer `(h_o, ell_o - 1)`.
    pub fn observer(&self) -> Vec<f64> {
        let mut o = self.h_o.clone();
        o.push(self.ell_o - 1.0);
        o
    }

    fn check_dim(&self, got: usize) -> Result<(), GeometryError> {
        if got != self.dim() {
            Err(GeometryError::DimensionMismatch { expected: self.dim(), got })
        } else {
            Ok(())
        }
    }

    fn standardize(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.mu).map(|(yi, mi)| (yi - mi) / self.r).collect()
    }

    /// Projects a bright-side sphere point to `R^d`.
    pub fn forward(&self, x: &SpherePoint) -> Result<Vec<f64>, GeometryError> {
        self.check_dim(x.dim())?;
        let lat = x.latitude();
        let threshold = self.dark_threshold();
        if !(lat < threshold) {
            return Err(GeometryError::DarkSidePoint { latitude: lat, threshold });
        }
        let ell_x = lat + 1.0;
        // ell_o - ell_x, formed without the +1 round trip
        let s = threshold - lat;
        let a = self.r * self.ell_o / s;
        let b = self.r * ell_x / s;
        let y = x
            .longitude()
            .iter()
            .zip(&self.h_o)
            .zip(&self.mu)
            .map(|((hx, ho), m)| a * hx - b * ho + m)
            .collect::<Vec<_>>();
        if y.iter().all(|v| v.is_finite()) {
            Ok(y)
        } else {
            Err(GeometryError::DarkSidePoint { latitude: lat, threshold })
        }
    }

    /// Positive root `M` of the chord quadratic for plane point `y`.
    pub fn chord_scale(&self, y: &[f64]) -> Result<ChordScale, GeometryError> {
        self.check_dim(y.len())?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonfiniteInput);
        }
        Ok(self.chord_scale_hat(&self.standardize(y))?.0)
    }

    /// Chord scale for an already standardised `y_hat = (y - mu)/R`; also
    /// returns the clamped discriminant `B^2 - AC`.
    fn chord_scale_hat(&self, y_hat: &[f64]) -> Result<(ChordScale, f64), GeometryError> {
        let ell = self.ell_o;
        let mut diff_sq = 0.0;
        let mut diff_dot_h = 0.0;
        for (yh, ho) in y_hat.iter().zip(&self.h_o) {
            let diff = yh - ho;
            diff_sq += diff * diff;
            diff_dot_h += diff * ho;
        }
        let a = diff_sq + ell * ell;
        let b = diff_dot_h - ell * (ell - 1.0);
        let c = norm_sq(&self.h_o) + ell * ell - 2.0 * ell;
        let mut disc = b * b - a * c;
        if disc < 0.0 {
            if disc < -DISCRIMINANT_SLACK {
                return Err(GeometryError::NegativeDiscriminant(disc));
            }
            disc = 0.0;
        }
        let root = disc.sqrt();
        // conjugate form avoids cancellation in -B + sqrt(.) when B > 0
        let m = if b > 0.0 { -c / (b + root) } else { (root - b) / a };
        Ok((ChordScale { m, a, b, c }, disc))
    }

    /// Lifts `y` onto the bright side.
    ///
    /// Panics if `y` has the wrong dimension; non-finite entries produce a
    /// non-finite point.
    pub fn inverse(&self, y: &[f64]) -> SpherePoint {
        assert_eq!(y.len(), self.dim(), "dimension mismatch in inverse projection");
        let y_hat = self.standardize(y);
        let m = match self.chord_scale_hat(&y_hat) {
            Ok((cs, _)) => cs.m,
            Err(_) => f64::NAN,
        };
        let mut z: Vec<f64> = y_hat
            .iter()
            .zip(&self.h_o)
            .map(|(yh, ho)| m * yh + (1.0 - m) * ho)
            .collect();
        z.push(self.dark_threshold() - m * self.ell_o);
        SpherePoint::normalized(z)
    }

    /// `log J(y)` of the forward map at plane point `y`.
    pub fn log_jacobian(&self, y: &[f64]) -> Result<f64, GeometryError> {
        self.check_dim(y.len())?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonfiniteInput);
        }
        let d = self.dim() as f64;
        let (cs, disc) = self.chord_scale_hat(&self.standardize(y))?;
        // M|y^-h_o|^2 + <y^-h_o,h_o> + ell_o - ell_o^2 (1-M) = M A + B = sqrt(B^2 - AC)
        Ok(d * self.r.ln() + 0.5 * disc.ln() - d * cs.m.ln() - self.ell_o.ln())
    }

    /// `log J` expressed through the sphere point:
    /// `J = R^d ell_o^d (1 - <o, x>) / (ell_o - ell_x)^{d+1}`.
    pub fn log_jacobian_at_cap_point(&self, x: &SpherePoint) -> Result<f64, GeometryError> {
        self.check_dim(x.dim())?;
        let lat = x.latitude();
        let threshold = self.dark_threshold();
        if !(lat < threshold) {
            return Err(GeometryError::DarkSidePoint { latitude: lat, threshold });
        }
        let d = self.dim() as f64;
        let proj = 1.0 - dot(x.longitude(), &self.h_o) - threshold * lat;
        Ok(d * self.r.ln() + proj.ln() + d * self.ell_o.ln() - (d + 1.0) * (threshold - lat).ln())
    }
}

/// Checks every parameter invariant and hands the parameters back.
pub fn validate_params(p: ProjectionParams) -> Result<ProjectionParams, GeometryError> {
    p.validate()?;
    Ok(p)
}

/// Root of `A M^2 + 2 B M + C = 0` together with its coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChordScale {
    pub m: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl ChordScale {
    /// Relative residual of the quadratic at `m`.
    pub fn residual(&self) -> f64 {
        let r = self.a * self.m * self.m + 2.0 * self.b * self.m + self.c;
        let scale = self.a * self.m * self.m + (2.0 * self.b * self.m).abs() + self.c.abs();
        r.abs() / scale.max(f64::MIN_POSITIVE)
    }
}

/// A point on the origin-centred unit sphere `S^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpherePoint(Vec<f64>);

impl SpherePoint {
    /// Rescales `z` to unit length.
    pub fn normalized(mut z: Vec<f64>) -> Self {
        let n = norm_sq(&z).sqrt();
        z.iter_mut().for_each(|v| *v /= n);
        SpherePoint(z)
    }

    /// `(0, ..., 0, -1)`, the point tangent to the plane.
    pub fn south_pole(d: usize) -> Self {
        let mut z = vec![0.0; d + 1];
        z[d] = -1.0;
        SpherePoint(z)
    }

    pub fn dim(&self) -> usize {
        self.0.len() - 1
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Last coordinate.
    pub fn latitude(&self) -> f64 {
        self.0[self.0.len() - 1]
    }

    /// First `d` coordinates.
    pub fn longitude(&self) -> &[f64] {
        &self.0[..self.0.len() - 1]
    }

    pub fn is_dark(&self, ell_o: f64) -> bool {
        self.latitude() > ell_o - 1.0
    }
}

/// Uniform draw on the bright side `{z in S^d : z[d] < ell_o - 1}`.
pub fn sample_uniform_cap<R: Rng + ?Sized>(d: usize, ell_o: f64, rng: &mut R) -> SpherePoint {
    sample_uniform_cap_counted(d, ell_o, rng).0
}

/// As [`sample_uniform_cap`], also returning the number of raw sphere draws
/// used (accepted one included).
pub fn sample_uniform_cap_counted<R: Rng + ?Sized>(
    d: usize,
    ell_o: f64,
    rng: &mut R,
) -> (SpherePoint, u64) {
    let threshold = ell_o - 1.0;
    let mut trials = 0;
    loop {
        trials += 1;
        let g: Vec<f64> = (0..=d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n2 = norm_sq(&g);
        if n2 == 0.0 {
            continue;
        }
        let z = SpherePoint::normalized(g);
        if z.latitude() < threshold {
            return (z, trials);
        }
    }
}

/// Fraction of the sphere's surface lying on the dark side, `z[d] > ell_o - 1`.
///
/// Equals `(1/2) I_{1-(ell_o-1)^2}(d/2, 1/2)`; the half accounts for the
/// sign of the latitude.
pub fn cap_ratio_exact(d: usize, ell_o: f64) -> f64 {
    if ell_o <= 1.0 {
        return 0.5;
    }
    if ell_o >= 2.0 {
        return 0.0;
    }
    let t = ell_o - 1.0;
    // c/(c+1) with c = (1 - t^2)/t^2
    let x = 1.0 - t * t;
    0.5 * regularized_incomplete_beta(x, d as f64 / 2.0, 0.5).expect("arguments in domain")
}

/// Upper bound `(e^{1/2}/2) sqrt(d+1) [1-(ell_o-1)^2]^{(d-1)/2}` on the dark-side
/// surface fraction.
pub fn cap_ratio_bound(d: usize, ell_o: f64) -> f64 {
    let d = d as f64;
    let base = 1.0 - (ell_o - 1.0).powi(2);
    0.5f64.exp() / 2.0 * (d + 1.0).sqrt() * base.powf((d - 1.0) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::chain_rng;
    use proptest::prelude::*;

    const SQRT3: f64 = 1.732_050_807_568_877_2;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn validation_cases() {
        assert!(ProjectionParams::new(vec![0.0], 1.0, vec![0.0], 1.0).is_ok());
        assert!(ProjectionParams::new(vec![0.0, 0.0], 2.0, vec![0.0, 0.0], 1.0).is_ok());
        assert!(matches!(
            ProjectionParams::new(vec![0.9, 0.0], 1.5, vec![0.0; 2], 1.0),
            Err(GeometryError::ObserverOutsideBall(_))
        ));
        assert!(matches!(
            ProjectionParams::new(vec![0.1, 0.0], 2.0, vec![0.0; 2], 1.0),
            Err(GeometryError::BoundaryWithoutSymmetry)
        ));
        assert!(matches!(
            ProjectionParams::new(vec![0.0], 1.0, vec![0.0], 0.0),
            Err(GeometryError::NonpositiveScale(_))
        ));
        assert!(matches!(
            ProjectionParams::new(vec![0.0], 0.5, vec![0.0], 1.0),
            Err(GeometryError::LatitudeOutOfRange(_))
        ));
        assert!(matches!(
            ProjectionParams::new(vec![0.0], 1.0, vec![0.0, 1.0], 1.0),
            Err(GeometryError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            ProjectionParams::new(vec![f64::NAN], 1.0, vec![0.0], 1.0),
            Err(GeometryError::NonfiniteInput)
        ));
    }

    #[test]
    fn south_pole_maps_to_mu() {
        let p = ProjectionParams::new(vec![0.2, -0.1], 1.3, vec![4.0, -2.0], 3.0).unwrap();
        let y = p.forward(&SpherePoint::south_pole(2)).unwrap();
        assert!(close(y[0], 4.0, 1e-14) && close(y[1], -2.0, 1e-14));
    }

    #[test]
    fn one_dimensional_cauchy_example() {
        let p = ProjectionParams::cauchy(1);
        let z = SpherePoint::normalized(vec![SQRT3 / 2.0, -0.5]);
        let y = p.forward(&z).unwrap();
        assert!(close(y[0], SQRT3, 1e-14));

        let cs = p.chord_scale(&[SQRT3]).unwrap();
        assert!(close(cs.m, 0.5, 1e-14));
        assert!(close(cs.m, 1.0 / (1.0 + 3.0f64).sqrt(), 1e-14));

        let back = p.inverse(&[SQRT3]);
        assert!(close(back.as_slice()[0], SQRT3 / 2.0, 1e-14));
        assert!(close(back.as_slice()[1], -0.5, 1e-14));

        assert!(close(p.log_jacobian_at_cap_point(&z).unwrap(), 4f64.ln(), 1e-13));
        assert!(close(p.log_jacobian(&[SQRT3]).unwrap(), 4f64.ln(), 1e-13));
    }

    #[test]
    fn chord_scale_at_mu_and_stereographic() {
        let p = ProjectionParams::cauchy(3);
        assert!(close(p.chord_scale(&[0.0; 3]).unwrap().m, 1.0, 1e-15));
        let s = ProjectionParams::stereographic(1);
        assert!(close(s.chord_scale(&[2.0]).unwrap().m, 0.5, 1e-15));
        assert!(close(s.log_jacobian(&[2.0]).unwrap(), 2f64.ln(), 1e-14));
    }

    #[test]
    fn jacobian_vanishes_at_origin_for_cauchy_projection() {
        for d in [1, 2, 5, 50] {
            let p = ProjectionParams::cauchy(d);
            assert!(p.log_jacobian(&vec![0.0; d]).unwrap().abs() < 1e-14);
            assert!(p.log_jacobian_at_cap_point(&SpherePoint::south_pole(d)).unwrap().abs() < 1e-14);
        }
    }

    #[test]
    fn dark_points_rejected() {
        let p = ProjectionParams::centered(1, 1.5).unwrap();
        let z = SpherePoint::normalized(vec![0.0, 1.0]);
        assert!(matches!(p.forward(&z), Err(GeometryError::DarkSidePoint { .. })));
        assert!(matches!(p.log_jacobian_at_cap_point(&z), Err(GeometryError::DarkSidePoint { .. })));
        // exact tie at the threshold counts as dark for the projection
        let tie = SpherePoint::normalized(vec![(0.75f64).sqrt(), 0.5]);
        assert!(p.forward(&tie).is_err() || tie.latitude() < 0.5);
    }

    #[test]
    fn inverse_approaches_boundary_monotonically() {
        let p = ProjectionParams::new(vec![0.3, 0.1], 1.2, vec![0.0; 2], 1.0).unwrap();
        let dir = [0.6, -0.8];
        let mut last = -1.0;
        for k in 0..40 {
            let r = 10f64.powf(k as f64 / 5.0 - 2.0);
            let z = p.inverse(&[r * dir[0], r * dir[1]]);
            assert!(z.latitude() < 0.2);
            assert!(z.latitude() >= last);
            last = z.latitude();
        }
        assert!(last > 0.2 - 1e-5);
    }

    #[test]
    fn chord_scale_decreases_along_rays() {
        let p = ProjectionParams::new(vec![0.3, -0.2], 1.4, vec![0.0; 2], 1.0).unwrap();
        let dir = [0.28, 0.96];
        let mut prev = f64::INFINITY;
        for k in 0..200 {
            let t = k as f64 * 0.25;
            let y = [p.h_o[0] + t * dir[0], p.h_o[1] + t * dir[1]];
            let cs = p.chord_scale(&y).unwrap();
            assert!(cs.m < prev);
            assert!(cs.residual() < 1e-10);
            assert!(cs.c <= 0.0);
            prev = cs.m;
        }
    }

    #[test]
    fn cap_sampler_stays_bright() {
        let mut rng = chain_rng(1, 0);
        let mut lat_sum = 0.0;
        for _ in 0..2000 {
            let z = sample_uniform_cap(4, 1.0, &mut rng);
            assert!(z.latitude() < 0.0);
            assert!((norm_sq(z.as_slice()).sqrt() - 1.0).abs() < 1e-12);
            lat_sum += z.latitude();
        }
        assert!(lat_sum < 0.0);
    }

    #[test]
    fn cap_ratio_values() {
        assert!((cap_ratio_exact(1, 1.5) - 1.0 / 3.0).abs() < 1e-14);
        for d in [1, 2, 10, 100] {
            assert_eq!(cap_ratio_exact(d, 1.0), 0.5);
            assert_eq!(cap_ratio_exact(d, 2.0), 0.0);
            assert!(cap_ratio_exact(d, 1.999_999) < 1e-3);
        }
        let b = cap_ratio_bound(100, 1.1);
        assert!((b - 0.824_360_635_350_064 * 101f64.sqrt() * 0.99f64.powf(49.5)).abs() < 1e-12);
        assert!((b - 5.04).abs() < 0.01);
        assert!((cap_ratio_bound(1, 1.7) - 0.5f64.exp() / 2.0 * 2f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn bound_dominates_exact_ratio() {
        for d in 1..=200 {
            for k in 1..=99 {
                let ell = 1.0 + k as f64 / 100.0;
                assert!(cap_ratio_bound(d, ell) >= cap_ratio_exact(d, ell), "d={d} ell={ell}");
            }
        }
    }

    fn params_strategy(d: usize) -> impl Strategy<Value = ProjectionParams> {
        (
            prop::collection::vec(-1.0f64..1.0, d),
            1.0f64..1.95,
            0.0f64..0.99,
            prop::collection::vec(-5.0f64..5.0, d),
            0.1f64..10.0,
        )
            .prop_map(move |(dir, ell, frac, mu, r)| {
                let room = (1.0 - (ell - 1.0).powi(2) - 2.0 * INTERIOR_MARGIN).max(0.0).sqrt();
                let n = norm_sq(&dir).sqrt().max(1e-12);
                let h_o = dir.iter().map(|v| v / n * room * frac).collect();
                ProjectionParams::new(h_o, ell, mu, r).unwrap()
            })
    }

    proptest! {
        #[test]
        fn round_trip_and_bright_closure(
            (p, y) in (1usize..6).prop_flat_map(|d| (params_strategy(d), prop::collection::vec(-1e3f64..1e3, d)))
        ) {
            let z = p.inverse(&y);
            prop_assert!(z.latitude() < p.dark_threshold());
            prop_assert!((norm_sq(z.as_slice()).sqrt() - 1.0).abs() <= 1e-12);
            let back = p.forward(&z).unwrap();
            let err = back.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!(err <= 1e-8 * (1.0 + norm_sq(&y).sqrt()));
        }

        #[test]
        fn two_jacobian_routes_agree(
            (p, y) in (1usize..6).prop_flat_map(|d| (params_strategy(d), prop::collection::vec(-50f64..50.0, d)))
        ) {
            let z = p.inverse(&y);
            let via_y = p.log_jacobian(&p.forward(&z).unwrap()).unwrap();
            let via_x = p.log_jacobian_at_cap_point(&z).unwrap();
            prop_assert!((via_y - via_x).abs() <= 1e-10 * (1.0 + via_x.abs()));
        }
    }
}
