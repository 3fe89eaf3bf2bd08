//! Regularized incomplete beta function.

use statrs::function::beta::ln_beta;
use thiserror::Error;

const MAX_ITER: usize = 2000;
const TINY: f64 = 1e-300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecialError {
    #[error("argument outside domain: x={x}, a={a}, b={b}")]
    DomainError { x: f64, a: f64, b: f64 },
    #[error("continued fraction failed to converge (x={x}, a={a}, b={b})")]
    NoConvergence { x: f64, a: f64, b: f64 },
}

fn check_domain(x: f64, a: f64, b: f64) -> Result<(), SpecialError> {
    let ok = (0.0..=1.0).contains(&x) && a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite();
    if ok {
        Ok(())
    } else {
        Err(SpecialError::DomainError { x, a, b })
    }
}

/// `I_x(a, b)`, evaluated with a modified-Lentz continued fraction.
///
/// The fraction converges quickly for `x < (a+1)/(a+b+2)`; above that point
/// the reflection `I_x(a,b) = 1 - I_{1-x}(b,a)` is used.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> Result<f64, SpecialError> {
    check_domain(x, a, b)?;
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    if x > (a + 1.0) / (a + b + 2.0) {
        Ok(1.0 - ln_beta_cf_direct(1.0 - x, b, a)?.exp())
    } else {
        Ok(ln_beta_cf_direct(x, a, b)?.exp())
    }
}

/// `ln I_x(a, b)`, accurate in the far lower tail where `I_x` underflows.
pub fn ln_regularized_incomplete_beta(x: f64, a: f64, b: f64) -> Result<f64, SpecialError> {
    check_domain(x, a, b)?;
    if x == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    if x == 1.0 {
        return Ok(0.0);
    }
    if x > (a + 1.0) / (a + b + 2.0) {
        Ok((-ln_beta_cf_direct(1.0 - x, b, a)?.exp()).ln_1p())
    } else {
        ln_beta_cf_direct(x, a, b)
    }
}

/// `ln I_x(a,b)` straight from the continued fraction, no reflection.
fn ln_beta_cf_direct(x: f64, a: f64, b: f64) -> Result<f64, SpecialError> {
    let ln_prefix = a * x.ln() + b * (-x).ln_1p() - ln_beta(a, b) - a.ln();
    Ok(ln_prefix + lentz(x, a, b)?.ln())
}

fn lentz(x: f64, a: f64, b: f64) -> Result<f64, SpecialError> {
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;

    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut f = d;

    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;

        let even = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + even * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + even / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        f *= d * c;

        let odd = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + odd * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + odd / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        f *= delta;
        if (delta - 1.0).abs() <= f64::EPSILON {
            return Ok(f);
        }
    }
    Err(SpecialError::NoConvergence { x, a, b })
}
