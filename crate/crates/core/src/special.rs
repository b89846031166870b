//! Moments and entropies of transforms of a scalar Gaussian derivative
//! `Z ~ N(μ, σ²)`: the folded normal `|Z|` and the scaled noncentral
//! chi-squared `Z²`.
//!
//! The squared-derivative entropy uses the term
//!
//! ```text
//! T(r) = ₂F₂(1, 1; 3/2, 2; -r²/2) · r²,      r = μ/σ
//! ```
//!
//! which is evaluated through the positive-term expansion
//!
//! ```text
//! T(r) = 2 · Σ_{k≥1} Pois(k; x) · Σ_{n<k} 1/(2n+1),      x = r²/2
//! ```
//!
//! (the alternating hypergeometric series loses all precision well before
//! `x = 30`). For `x > 60` the asymptotic expansion
//! `log x + γ + 2 log 2 - Σₙ (2n-1)!! / (2ⁿ n xⁿ)` takes over.

use std::f64::consts::{E, FRAC_2_PI, LN_2, PI, SQRT_2};

use statrs::function::erf::erf;

use crate::error::{Error, Result};

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Crossover between the series and the asymptotic branch, in `x = r²/2`.
pub const SERIES_MAX_X: f64 = 60.0;
const MAX_SERIES_TERMS: usize = 500;
const MAX_ABS_R: f64 = 1e8;

/// Parameters of a scalar Gaussian marginal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussParams {
    pub mu: f64,
    pub sigma: f64,
}

impl GaussParams {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::invalid(format!("sigma must be > 0, got {sigma}")));
        }
        if !mu.is_finite() {
            return Err(Error::invalid(format!("mu must be finite, got {mu}")));
        }
        Ok(GaussParams { mu, sigma })
    }

    /// Standardized mean `μ/σ`.
    pub fn r(&self) -> f64 {
        self.mu / self.sigma
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoldedMoments {
    pub mean: f64,
    pub var: f64,
}

/// Mean and variance of `|Z|`.
///
/// The variance is computed as `σ² - 2|μ|δ - δ²` with `δ = E|Z| - |μ|`,
/// which avoids cancelling `μ²` against `E|Z|²` when `|r|` is large.
pub fn folded_moments(p: GaussParams) -> FoldedMoments {
    let GaussParams { mu, sigma } = p;
    let r = p.r().abs();
    let a = mu.abs();
    // E|Z| = σ√(2/π)e^{-r²/2} + |μ|·erf(r/√2), so δ = σ√(2/π)e^{-r²/2} - |μ|·erfc(r/√2).
    let tail = 1.0 - erf(r / SQRT_2);
    let delta = FRAC_2_PI.sqrt() * sigma * (-0.5 * r * r).exp() - a * tail;
    let mean = a + delta;
    let var = (sigma * sigma - 2.0 * a * delta - delta * delta).max(0.0);
    FoldedMoments { mean, var }
}

/// Variance of `Z²`: `4σ²μ² + 2σ⁴`.
pub fn ncx2_var(p: GaussParams) -> f64 {
    let s2 = p.sigma * p.sigma;
    4.0 * s2 * p.mu * p.mu + 2.0 * s2 * s2
}

/// `₂F₂(1, 1; 3/2, 2; -r²/2) · r²`.
pub fn hyp2f2_entropy_term(r: f64) -> Result<f64> {
    if !r.is_finite() {
        return Err(Error::invalid(format!("entropy term needs finite r, got {r}")));
    }
    let r = r.abs().min(MAX_ABS_R);
    let x = 0.5 * r * r;
    Ok(if x <= SERIES_MAX_X {
        entropy_term_series(x)
    } else {
        entropy_term_asymptotic(x)
    })
}

fn entropy_term_series(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    let mut pmf = (-x).exp();
    let mut harmonic = 0.0;
    let mut sum = 0.0;
    for k in 1..=MAX_SERIES_TERMS {
        pmf *= x / k as f64;
        harmonic += 1.0 / (2 * k - 1) as f64;
        let term = pmf * harmonic;
        sum += term;
        if k as f64 > x && term < 1e-16 * sum {
            break;
        }
    }
    2.0 * sum
}

fn entropy_term_asymptotic(x: f64) -> f64 {
    let mut value = x.ln() + EULER_GAMMA + 2.0 * LN_2;
    // cₙ = (2n-1)!! / (2ⁿ n xⁿ); c_{n+1}/cₙ = (2n+1) n / (2 (n+1) x).
    let mut c = 1.0 / (2.0 * x);
    for n in 1..60 {
        value -= c;
        let next = c * (2 * n + 1) as f64 * n as f64 / (2.0 * (n + 1) as f64 * x);
        if next < 1e-17 * value.abs() || next > c {
            break;
        }
        c = next;
    }
    value
}

/// `2 log σ - T(μ/σ)`. The additive entropy constant of a central χ²₁ is
/// omitted; only differences of this quantity are meaningful.
pub fn sq_entropy(p: GaussParams) -> Result<f64> {
    Ok(2.0 * p.sigma.ln() - hyp2f2_entropy_term(p.r())?)
}

/// Differential entropy of a Gaussian with variance `var`.
pub fn gauss_entropy(var: f64) -> Result<f64> {
    if !(var.is_finite() && var > 0.0) {
        return Err(Error::invalid(format!("variance must be > 0, got {var}")));
    }
    Ok(0.5 * (2.0 * PI * E * var).ln())
}
