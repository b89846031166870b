//! Gaussian-process surrogate: fitting, the posterior of `f`, the posterior of
//! each partial derivative, and look-ahead derivative variances after a
//! hypothetical observation.
//!
//! Inputs live in the unit cube. Hyperparameters are fitted on standardized
//! outputs and stored on the raw output scale, so every posterior is
//! returned in raw units. Only the diagonal of the gradient covariance is
//! ever formed.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{kernel_unchecked, scaled_sqdist, Hyperparams};
use crate::optim::{maximize_box, SpgOptions};
use crate::qmc::SobolStream;

/// Jitter ladder, relative to the outputscale.
const JITTERS: [f64; 7] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5];
const MAX_JITTER: f64 = 1e-4;

/// Mean and standard deviation of the observed outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub sd: f64,
    /// All outputs (numerically) identical; `sd` is then reported as 1.
    pub degenerate: bool,
}

/// Observed inputs (unit cube) and raw outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    dim: usize,
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
}

impl Dataset {
    pub fn empty(dim: usize) -> Self {
        Dataset {
            dim,
            x: Vec::new(),
            y: Vec::new(),
        }
    }

    pub fn new(x: Vec<Vec<f64>>, y: Vec<f64>) -> Result<Self> {
        let dim = x
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::invalid("dataset needs at least one point"))?;
        let mut data = Dataset::empty(dim);
        if x.len() != y.len() {
            return Err(Error::invalid(format!(
                "{} inputs but {} outputs",
                x.len(),
                y.len()
            )));
        }
        for (xi, yi) in x.into_iter().zip(y) {
            data.push(xi, yi)?;
        }
        Ok(data)
    }

    pub fn push(&mut self, x: Vec<f64>, y: f64) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::invalid(format!(
                "point has dimension {}, dataset has {}",
                x.len(),
                self.dim
            )));
        }
        if x.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::invalid(format!("input {x:?} is outside the unit cube")));
        }
        if !y.is_finite() {
            return Err(Error::invalid(format!("observation {y} is not finite")));
        }
        self.x.push(x);
        self.y.push(y);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.x
    }

    pub fn outputs(&self) -> &[f64] {
        &self.y
    }

    pub fn standardization(&self) -> Standardization {
        if self.y.is_empty() {
            return Standardization {
                mean: 0.0,
                sd: 1.0,
                degenerate: true,
            };
        }
        let n = self.y.len() as f64;
        let mean = self.y.iter().sum::<f64>() / n;
        let var = if self.y.len() > 1 {
            self.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let sd = var.sqrt();
        if sd <= 1e-12 * mean.abs().max(1.0) {
            Standardization {
                mean,
                sd: 1.0,
                degenerate: true,
            }
        } else {
            Standardization {
                mean,
                sd,
                degenerate: false,
            }
        }
    }
}

/// Posterior of `f(x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FPosterior {
    pub mu: f64,
    pub var: f64,
}

/// Marginal posteriors of each partial derivative at one point, plus the
/// covariance of each with `f` at the same point.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivPosterior {
    pub mu_d: Vec<f64>,
    pub var_d: Vec<f64>,
    pub cross: Vec<f64>,
}

/// Derivative variances after hypothetically observing `f`, with the plug-in
/// mean obtained by fixing the observation to the current posterior mean.
#[derive(Debug, Clone, PartialEq)]
pub struct LookAhead {
    pub var_l: Vec<f64>,
    pub mu_plugin: Vec<f64>,
}

/// Settings for maximum-likelihood fitting.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub n_starts: usize,
    pub max_iter: usize,
    /// Multi-start boxes (natural scale, sampled log-uniformly by QMC).
    pub start_lengthscale: (f64, f64),
    pub start_outputscale: (f64, f64),
    pub start_noise: (f64, f64),
    /// Optimization bounds on the standardized scale.
    pub bound_lengthscale: (f64, f64),
    pub bound_outputscale: (f64, f64),
    pub bound_noise: (f64, f64),
    pub bound_mean: (f64, f64),
    pub prior: HyperPrior,
}

/// Optional log-density added to the marginal likelihood (MAP fitting).
/// Densities are on the standardized scale and on the natural (not log)
/// hyperparameter values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HyperPrior {
    /// Plain maximum likelihood.
    #[default]
    None,
    /// `ℓ ~ Gamma(3, 6)`, `s ~ Gamma(2, 0.15)`, `η² ~ Gamma(1.1, 0.05)`
    /// (shape, rate).
    Gamma,
    /// `ℓ ~ LogNormal(√2 + ½ log d, √3)`, `η² ~ LogNormal(-4, 1)`.
    DimScaled,
}

impl HyperPrior {
    /// Log-density and its gradient with respect to
    /// `(log ℓ₁..log ℓ_d, log s, log η², m)`.
    fn log_density(&self, p: &[f64], d: usize) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; p.len()];
        // In log coordinates: Gamma(a, b) gives (a-1)u - b·e^u, LogNormal(μ, σ) gives -u - (u-μ)²/2σ².
        let gamma = |u: f64, a: f64, b: f64| ((a - 1.0) * u - b * u.exp(), (a - 1.0) - b * u.exp());
        let lognormal = |u: f64, mu: f64, sigma: f64| {
            let z = (u - mu) / sigma;
            (-u - 0.5 * z * z, -1.0 - z / sigma)
        };
        let mut total = 0.0;
        let mut add = |i: usize, (v, g): (f64, f64)| {
            total += v;
            grad[i] += g;
        };
        match self {
            HyperPrior::None => {}
            HyperPrior::Gamma => {
                for i in 0..d {
                    add(i, gamma(p[i], 3.0, 6.0));
                }
                add(d, gamma(p[d], 2.0, 0.15));
                add(d + 1, gamma(p[d + 1], 1.1, 0.05));
            }
            HyperPrior::DimScaled => {
                let mu = std::f64::consts::SQRT_2 + 0.5 * (d as f64).ln();
                for i in 0..d {
                    add(i, lognormal(p[i], mu, 3f64.sqrt()));
                }
                add(d + 1, lognormal(p[d + 1], -4.0, 1.0));
            }
        }
        (total, grad)
    }
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            n_starts: 8,
            max_iter: 200,
            start_lengthscale: (0.05, 3.0),
            start_outputscale: (0.2, 5.0),
            start_noise: (1e-6, 0.1),
            bound_lengthscale: (0.01, 20.0),
            bound_outputscale: (0.01, 100.0),
            bound_noise: (1e-6, 1.0),
            bound_mean: (-5.0, 5.0),
            prior: HyperPrior::None,
        }
    }
}

/// A GP conditioned on a dataset with fixed hyperparameters.
#[derive(Debug, Clone)]
pub struct GpModel {
    hp: Hyperparams,
    data: Dataset,
    standardization: Standardization,
    /// Lower Cholesky factor of `K + (η² + jitter) I`.
    chol: DMatrix<f64>,
    alpha: DVector<f64>,
    jitter: f64,
    /// Row-major copy of the inputs for the hot loops.
    flat_x: Vec<f64>,
    log_marginal_likelihood: Option<f64>,
}

#[cfg(test)]
thread_local! {
    static FACTORIZATIONS: std::cell::Cell<usize> = const { std::cell::Cell::new(0) };
}

#[cfg(test)]
pub(crate) fn factorization_count() -> usize {
    FACTORIZATIONS.with(|c| c.get())
}

fn gram(x: &[Vec<f64>], hp: &Hyperparams) -> DMatrix<f64> {
    let t = x.len();
    let mut k = DMatrix::zeros(t, t);
    for a in 0..t {
        k[(a, a)] = hp.outputscale;
        for b in 0..a {
            let v = kernel_unchecked(&x[a], &x[b], hp);
            k[(a, b)] = v;
            k[(b, a)] = v;
        }
    }
    k
}

/// Cholesky of `k + (noise + jitter·scale) I` with jitter escalation.
fn factorize(k: &DMatrix<f64>, noise: f64, scale: f64) -> Result<(DMatrix<f64>, f64)> {
    #[cfg(test)]
    FACTORIZATIONS.with(|c| c.set(c.get() + 1));
    let ladder = JITTERS.iter().copied().chain(std::iter::once(MAX_JITTER));
    for j in ladder {
        let mut m = k.clone();
        let add = noise + j * scale;
        for i in 0..m.nrows() {
            m[(i, i)] += add;
        }
        if let Some(c) = m.cholesky() {
            return Ok((c.unpack(), j));
        }
    }
    Err(Error::Cholesky { jitter: MAX_JITTER })
}

fn solve_lower(l: &DMatrix<f64>, b: &mut DVector<f64>) {
    let ok = l.solve_lower_triangular_mut(b);
    debug_assert!(ok, "Cholesky factor has a zero pivot");
}

impl GpModel {
    /// The prior: no data, posterior equals `GP(m, k)`.
    pub fn prior(hp: Hyperparams) -> Result<Self> {
        hp.validate()?;
        let dim = hp.dim();
        Ok(GpModel {
            hp,
            data: Dataset::empty(dim),
            standardization: Dataset::empty(dim).standardization(),
            chol: DMatrix::zeros(0, 0),
            alpha: DVector::zeros(0),
            jitter: 0.0,
            flat_x: Vec::new(),
            log_marginal_likelihood: None,
        })
    }

    /// Conditions on `data` with the given (raw-scale) hyperparameters.
    pub fn condition(data: Dataset, hp: Hyperparams) -> Result<Self> {
        hp.validate()?;
        if hp.dim() != data.dim() {
            return Err(Error::invalid(format!(
                "hyperparameters have dimension {}, data {}",
                hp.dim(),
                data.dim()
            )));
        }
        if data.is_empty() {
            return Self::prior(hp);
        }
        let k = gram(data.inputs(), &hp);
        let (chol, jitter) = factorize(&k, hp.noise_var, hp.outputscale)?;
        let mut alpha = DVector::from_iterator(
            data.len(),
            data.outputs().iter().map(|y| y - hp.mean_const),
        );
        solve_lower(&chol, &mut alpha);
        let lml_quad = alpha.norm_squared();
        chol.tr_solve_lower_triangular_mut(&mut alpha);
        let log_det: f64 = chol.diagonal().iter().map(|v| v.ln()).sum();
        let t = data.len() as f64;
        let lml = -0.5 * lml_quad - log_det - 0.5 * t * (2.0 * std::f64::consts::PI).ln();
        let flat_x = data.inputs().iter().flatten().copied().collect();
        let standardization = data.standardization();
        Ok(GpModel {
            hp,
            data,
            standardization,
            chol,
            alpha,
            jitter,
            flat_x,
            log_marginal_likelihood: Some(lml),
        })
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hp
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn dim(&self) -> usize {
        self.hp.dim()
    }

    pub fn standardization(&self) -> Standardization {
        self.standardization
    }

    pub fn is_degenerate(&self) -> bool {
        self.standardization.degenerate
    }

    /// Jitter actually added (relative to the outputscale).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn log_marginal_likelihood(&self) -> Option<f64> {
        self.log_marginal_likelihood
    }

    /// Noise variance used in look-ahead denominators and BALD, floored at
    /// `1e-6` standardized units.
    pub fn effective_noise(&self) -> f64 {
        let sd = self.standardization.sd;
        self.hp.noise_var.max(1e-6 * sd * sd)
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::invalid(format!(
                "point has dimension {}, model expects {}",
                x.len(),
                self.dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("point has non-finite coordinates"));
        }
        Ok(())
    }

    /// Kernel vector `k(X, x)` and its gradient rows `∂k(x, X)/∂xᵢ`.
    fn kernel_terms(&self, x: &[f64]) -> (DVector<f64>, Vec<DVector<f64>>) {
        let d = self.dim();
        let t = self.data.len();
        let mut k = DVector::zeros(t);
        let mut g: Vec<DVector<f64>> = (0..d).map(|_| DVector::zeros(t)).collect();
        for j in 0..t {
            let xj = &self.flat_x[j * d..(j + 1) * d];
            let kj = self.hp.outputscale * (-0.5 * scaled_sqdist(x, xj, &self.hp.lengthscales)).exp();
            k[j] = kj;
            for i in 0..d {
                let l = self.hp.lengthscales[i];
                g[i][j] = -(x[i] - xj[i]) / (l * l) * kj;
            }
        }
        (k, g)
    }

    /// Whitened terms shared by every posterior at `x`.
    pub(crate) fn point_terms(&self, x: &[f64]) -> Result<PointTerms> {
        self.check_point(x)?;
        let (k, mut g) = self.kernel_terms(x);
        let mu_d: Vec<f64> = g.iter().map(|gi| gi.dot(&self.alpha)).collect();
        let mut vf = k;
        if !self.data.is_empty() {
            solve_lower(&self.chol, &mut vf);
            for gi in g.iter_mut() {
                solve_lower(&self.chol, gi);
            }
        }
        Ok(PointTerms {
            x: x.to_vec(),
            var: (self.hp.outputscale - vf.norm_squared()).max(0.0),
            mu_d,
            vf,
            vd: g,
        })
    }

    pub fn posterior_f(&self, x: &[f64]) -> Result<FPosterior> {
        self.check_point(x)?;
        let mut k = self.kernel_vector(x);
        let mu = k.dot(&self.alpha) + self.hp.mean_const;
        if !self.data.is_empty() {
            solve_lower(&self.chol, &mut k);
        }
        Ok(FPosterior {
            mu,
            var: (self.hp.outputscale - k.norm_squared()).max(0.0),
        })
    }

    fn kernel_vector(&self, x: &[f64]) -> DVector<f64> {
        let d = self.dim();
        let t = self.data.len();
        DVector::from_iterator(
            t,
            (0..t).map(|j| kernel_unchecked(x, &self.flat_x[j * d..(j + 1) * d], &self.hp)),
        )
    }

    pub fn posterior_deriv(&self, x: &[f64]) -> Result<DerivPosterior> {
        Ok(self.point_terms(x)?.deriv_posterior(&self.hp))
    }

    /// Posterior mean gradient only; `O(t·d)` per point.
    pub fn mean_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let (_, g) = self.kernel_terms(x);
        Ok(g.iter().map(|gi| gi.dot(&self.alpha)).collect())
    }

    /// Look-ahead derivative variance at `x` after observing `y` at `x`.
    pub fn lookahead_local(&self, x: &[f64]) -> Result<LookAhead> {
        let terms = self.point_terms(x)?;
        self.lookahead_from(&terms, &terms)
    }

    /// Look-ahead derivative variance at `x_plus` after observing `y` at
    /// `x_star`.
    pub fn lookahead_global(&self, x_star: &[f64], x_plus: &[f64]) -> Result<LookAhead> {
        let star = self.point_terms(x_star)?;
        let plus = self.point_terms(x_plus)?;
        self.lookahead_from(&star, &plus)
    }

    pub(crate) fn lookahead_from(&self, star: &PointTerms, plus: &PointTerms) -> Result<LookAhead> {
        let denom = star.var + self.effective_noise();
        if !(denom.is_finite() && denom > 0.0) {
            return Err(Error::NumericalFailure(format!(
                "look-ahead denominator σ² + η² = {denom}"
            )));
        }
        let cross = star.cross_with(plus, &self.hp);
        let post = plus.deriv_posterior(&self.hp);
        let var_l = post
            .var_d
            .iter()
            .zip(&cross)
            .map(|(v, c)| (v - c * c / denom).clamp(0.0, *v))
            .collect();
        Ok(LookAhead {
            var_l,
            mu_plugin: post.mu_d,
        })
    }

    /// Fits hyperparameters by multi-start maximization of the log marginal
    /// likelihood. Deterministic given `seed`.
    pub fn fit(data: Dataset, seed: u64) -> Result<Self> {
        Self::fit_with(data, seed, &FitOptions::default(), None)
    }

    /// As [`GpModel::fit`], with explicit options and an optional warm start
    /// that replaces one of the QMC starts.
    pub fn fit_with(
        data: Dataset,
        seed: u64,
        opts: &FitOptions,
        warm_start: Option<&Hyperparams>,
    ) -> Result<Self> {
        if data.len() < 2 {
            return Err(Error::invalid(format!(
                "fitting needs at least 2 observations, got {}",
                data.len()
            )));
        }
        let d = data.dim();
        let st = data.standardization();
        if st.degenerate {
            let hp = Hyperparams {
                lengthscales: vec![1.0; d],
                outputscale: 1e-6,
                noise_var: 1e-4,
                mean_const: st.mean,
            };
            return Self::condition(data, hp);
        }
        let y: Vec<f64> = data.outputs().iter().map(|v| (v - st.mean) / st.sd).collect();
        let lml = LmlObjective::new(data.inputs(), &y);

        let (lo, hi) = opts.bounds(d);
        let mut starts = Vec::with_capacity(opts.n_starts.max(1));
        if let Some(w) = warm_start.filter(|w| w.dim() == d) {
            let mut p: Vec<f64> = w.lengthscales.iter().map(|l| l.ln()).collect();
            p.push((w.outputscale / (st.sd * st.sd)).ln());
            p.push((w.noise_var / (st.sd * st.sd)).max(opts.bound_noise.0).ln());
            p.push((w.mean_const - st.mean) / st.sd);
            starts.push(p);
        }
        let mut sobol = SobolStream::scrambled(d + 2, seed)?;
        while starts.len() < opts.n_starts.max(1) {
            let u = sobol.next_point();
            let log_lerp = |(a, b): (f64, f64), t: f64| a.ln() + t * (b.ln() - a.ln());
            let mut p: Vec<f64> = u[..d].iter().map(|&t| log_lerp(opts.start_lengthscale, t)).collect();
            p.push(log_lerp(opts.start_outputscale, u[d]));
            p.push(log_lerp(opts.start_noise, u[d + 1]));
            p.push(0.0);
            starts.push(p);
        }

        let spg = SpgOptions {
            max_iter: opts.max_iter,
            tol: 1e-6,
            ..SpgOptions::default()
        };
        let mut best: Option<(f64, Vec<f64>)> = None;
        for s in &starts {
            let mut obj = |p: &[f64]| {
                let (v, mut g) = lml.value_grad(p)?;
                let (pv, pg) = opts.prior.log_density(p, d);
                g.iter_mut().zip(pg).for_each(|(a, b)| *a += b);
                Some((v + pv, g))
            };
            if let Some(res) = maximize_box(&mut obj, s, &lo, &hi, &spg) {
                if best.as_ref().map_or(true, |(v, _)| res.value > *v) {
                    best = Some((res.value, res.x));
                }
            }
        }
        let (_, p) = best.ok_or_else(|| {
            Error::NumericalFailure("log marginal likelihood undefined at every start".into())
        })?;
        let s2 = st.sd * st.sd;
        let hp = Hyperparams {
            lengthscales: p[..d].iter().map(|v| v.exp()).collect(),
            outputscale: p[d].exp() * s2,
            noise_var: p[d + 1].exp() * s2,
            mean_const: st.mean + st.sd * p[d + 2],
        };
        Self::condition(data, hp)
    }
}

impl FitOptions {
    /// Bounds on `(log ℓ₁..log ℓ_d, log s, log η², m)`.
    fn bounds(&self, d: usize) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![self.bound_lengthscale.0.ln(); d];
        let mut hi = vec![self.bound_lengthscale.1.ln(); d];
        lo.extend([
            self.bound_outputscale.0.ln(),
            self.bound_noise.0.ln(),
            self.bound_mean.0,
        ]);
        hi.extend([
            self.bound_outputscale.1.ln(),
            self.bound_noise.1.ln(),
            self.bound_mean.1,
        ]);
        (lo, hi)
    }
}

/// Whitened kernel terms at one point: `vf = L⁻¹k(X, x)` and
/// `vd[i] = L⁻¹ ∂k(X, x)/∂xᵢ`.
#[derive(Debug, Clone)]
pub(crate) struct PointTerms {
    pub x: Vec<f64>,
    pub var: f64,
    pub mu_d: Vec<f64>,
    pub vf: DVector<f64>,
    pub vd: Vec<DVector<f64>>,
}

impl PointTerms {
    pub fn deriv_posterior(&self, hp: &Hyperparams) -> DerivPosterior {
        let var_d = self
            .vd
            .iter()
            .zip(&hp.lengthscales)
            .map(|(v, l)| (hp.outputscale / (l * l) - v.norm_squared()).max(0.0))
            .collect();
        // Prior Cov[f(x), ∂f(x)/∂xᵢ] vanishes for a stationary kernel.
        let cross = self.vd.iter().map(|v| -self.vf.dot(v)).collect();
        DerivPosterior {
            mu_d: self.mu_d.clone(),
            var_d,
            cross,
        }
    }

    /// Posterior `Cov[f(self.x), ∂f(other.x)/∂xᵢ]` for each `i`.
    pub fn cross_with(&self, other: &PointTerms, hp: &Hyperparams) -> Vec<f64> {
        let k = kernel_unchecked(&self.x, &other.x, hp);
        (0..hp.dim())
            .map(|i| {
                let l = hp.lengthscales[i];
                let prior = (self.x[i] - other.x[i]) / (l * l) * k;
                prior - self.vf.dot(&other.vd[i])
            })
            .collect()
    }
}

/// Log marginal likelihood of standardized data as a function of
/// `(log ℓ, log s, log η², m)`, with analytic gradient.
struct LmlObjective<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    /// Squared coordinate differences per dimension, `t × t` each.
    sqdiff: Vec<DMatrix<f64>>,
}

impl<'a> LmlObjective<'a> {
    fn new(x: &'a [Vec<f64>], y: &'a [f64]) -> Self {
        let t = x.len();
        let d = x[0].len();
        let sqdiff = (0..d)
            .map(|i| DMatrix::from_fn(t, t, |a, b| (x[a][i] - x[b][i]).powi(2)))
            .collect();
        LmlObjective { x, y, sqdiff }
    }

    fn value_grad(&self, p: &[f64]) -> Option<(f64, Vec<f64>)> {
        let d = self.sqdiff.len();
        let t = self.x.len();
        let ls: Vec<f64> = p[..d].iter().map(|v| v.exp()).collect();
        let s = p[d].exp();
        let noise = p[d + 1].exp();
        let m = p[d + 2];

        let inv_l2: Vec<f64> = ls.iter().map(|l| 1.0 / (l * l)).collect();
        let kf = DMatrix::from_fn(t, t, |a, b| {
            let r2: f64 = (0..d).map(|i| self.sqdiff[i][(a, b)] * inv_l2[i]).sum();
            s * (-0.5 * r2).exp()
        });
        let (chol, jitter) = factorize(&kf, noise, s).ok()?;
        let resid = DVector::from_iterator(t, self.y.iter().map(|v| v - m));
        let mut alpha = resid.clone();
        chol.solve_lower_triangular_mut(&mut alpha);
        let quad = alpha.norm_squared();
        chol.tr_solve_lower_triangular_mut(&mut alpha);
        let log_det: f64 = chol.diagonal().iter().map(|v| v.ln()).sum();
        let value = -0.5 * quad - log_det - 0.5 * t as f64 * (2.0 * std::f64::consts::PI).ln();

        // K⁻¹ = L⁻ᵀ L⁻¹
        let mut kinv = DMatrix::identity(t, t);
        chol.solve_lower_triangular_mut(&mut kinv);
        chol.tr_solve_lower_triangular_mut(&mut kinv);
        // W = ααᵀ - K⁻¹; ∂L/∂θ = ½ tr(W ∂K/∂θ).
        let mut w = &alpha * alpha.transpose();
        w -= &kinv;
        let wk = w.component_mul(&kf);

        let mut grad = Vec::with_capacity(d + 3);
        for i in 0..d {
            grad.push(0.5 * wk.component_mul(&self.sqdiff[i]).sum() * inv_l2[i]);
        }
        // Jitter scales with s, so it contributes to ∂K/∂log s.
        let trace_w = w.trace();
        grad.push(0.5 * (wk.sum() + jitter * s * trace_w));
        grad.push(0.5 * noise * trace_w);
        grad.push(alpha.sum());
        Some((value, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::kernel;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.gen()).collect()).collect()
    }

    fn toy_model(seed: u64, t: usize, noise: f64) -> GpModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_points(&mut rng, t, 2);
        let y = x
            .iter()
            .map(|p| (3.0 * p[0]).sin() + p[1] * p[1] - 0.5 * p[0] * p[1])
            .collect();
        let hp = Hyperparams::new(vec![0.35, 0.6], 1.4, noise, 0.2).unwrap();
        GpModel::condition(Dataset::new(x, y).unwrap(), hp).unwrap()
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(vec![], vec![]).is_err());
        assert!(Dataset::new(vec![vec![0.1]], vec![1.0, 2.0]).is_err());
        assert!(Dataset::new(vec![vec![1.5]], vec![1.0]).is_err());
        assert!(Dataset::new(vec![vec![0.5]], vec![f64::NAN]).is_err());
        let mut d = Dataset::new(vec![vec![0.1, 0.2]], vec![1.0]).unwrap();
        assert!(d.push(vec![0.3], 2.0).is_err());
        d.push(vec![0.3, 0.4], 3.0).unwrap();
        let st = d.standardization();
        assert_eq!(st.mean, 2.0);
        assert_relative_eq!(st.sd, 2f64.sqrt());
        assert!(!st.degenerate);
    }

    #[test]
    fn cholesky_reconstructs_gram() {
        let m = toy_model(1, 25, 1e-4);
        let l = m.cholesky_factor();
        let mut k = gram(m.data().inputs(), m.hyperparams());
        for i in 0..k.nrows() {
            k[(i, i)] += m.hyperparams().noise_var + m.jitter() * m.hyperparams().outputscale;
        }
        let err = (l * l.transpose() - &k).norm() / k.norm();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn prior_posteriors() {
        let hp = Hyperparams::new(vec![0.5, 2.0], 3.0, 0.1, 1.5).unwrap();
        let m = GpModel::prior(hp).unwrap();
        let p = m.posterior_f(&[0.2, 0.9]).unwrap();
        assert_eq!((p.mu, p.var), (1.5, 3.0));
        let d = m.posterior_deriv(&[0.2, 0.9]).unwrap();
        assert_eq!(d.mu_d, vec![0.0, 0.0]);
        assert_relative_eq!(d.var_d[0], 12.0);
        assert_relative_eq!(d.var_d[1], 0.75);
        assert_eq!(d.cross, vec![0.0, 0.0]);
    }

    #[test]
    fn noiseless_interpolation() {
        let m = toy_model(2, 12, 0.0);
        for (x, y) in m.data().inputs().iter().zip(m.data().outputs()) {
            let p = m.posterior_f(x).unwrap();
            assert!((p.mu - y).abs() < 1e-6);
            assert!(p.var <= 1e-6);
        }
    }

    #[test]
    fn posterior_f_matches_dense_inverse() {
        let m = toy_model(3, 15, 1e-3);
        let hp = m.hyperparams();
        let x = m.data().inputs();
        let t = x.len();
        let kd = DMatrix::from_fn(t, t, |a, b| {
            kernel(&x[a], &x[b], hp).unwrap() + if a == b { hp.noise_var } else { 0.0 }
        });
        let kinv = kd.try_inverse().unwrap();
        let resid = DVector::from_iterator(t, m.data().outputs().iter().map(|y| y - hp.mean_const));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let q: Vec<f64> = (0..2).map(|_| rng.gen()).collect();
            let kx = DVector::from_iterator(t, x.iter().map(|xj| kernel(&q, xj, hp).unwrap()));
            let mu = kx.dot(&(&kinv * &resid)) + hp.mean_const;
            let var = hp.outputscale - kx.dot(&(&kinv * &kx));
            let p = m.posterior_f(&q).unwrap();
            assert_relative_eq!(p.mu, mu, max_relative = 1e-8);
            assert_relative_eq!(p.var, var, max_relative = 1e-8);
        }
    }

    #[test]
    fn deriv_mean_matches_finite_difference() {
        let m = toy_model(4, 20, 1e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let h = 1e-5;
        for _ in 0..50 {
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(0.01..0.99)).collect();
            let d = m.posterior_deriv(&x).unwrap();
            assert_eq!(d.mu_d, m.mean_gradient(&x).unwrap());
            for i in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (m.posterior_f(&xp).unwrap().mu - m.posterior_f(&xm).unwrap().mu) / (2.0 * h);
                assert!((d.mu_d[i] - fd).abs() <= 1e-4 * fd.abs().max(1e-2), "{} vs {fd}", d.mu_d[i]);
            }
        }
    }

    #[test]
    fn cauchy_schwarz_on_cross_covariance() {
        let m = toy_model(5, 20, 1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let x: Vec<f64> = (0..2).map(|_| rng.gen()).collect();
            let f = m.posterior_f(&x).unwrap();
            let d = m.posterior_deriv(&x).unwrap();
            for i in 0..2 {
                assert!(d.var_d[i] >= 0.0);
                assert!(d.cross[i].powi(2) <= d.var_d[i] * (f.var + m.hyperparams().noise_var) * (1.0 + 1e-9) + 1e-12);
            }
        }
    }

    fn refit_deriv_var(m: &GpModel, x_star: &[f64], x_plus: &[f64], y_star: f64) -> Vec<f64> {
        let mut data = m.data().clone();
        data.push(x_star.to_vec(), y_star).unwrap();
        let mut hp = m.hyperparams().clone();
        hp.noise_var = m.effective_noise();
        GpModel::condition(data, hp).unwrap().posterior_deriv(x_plus).unwrap().var_d
    }

    #[test]
    fn local_lookahead_matches_refit() {
        let m = toy_model(6, 15, 1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..25 {
            let x: Vec<f64> = (0..2).map(|_| rng.gen()).collect();
            let la = m.lookahead_local(&x).unwrap();
            let d = m.posterior_deriv(&x).unwrap();
            assert_eq!(la.mu_plugin, d.mu_d);
            for y_star in [-3.0, 0.7, 12.0] {
                let refit = refit_deriv_var(&m, &x, &x, y_star);
                for i in 0..2 {
                    assert_relative_eq!(la.var_l[i], refit[i], max_relative = 1e-6);
                    assert!(la.var_l[i] <= d.var_d[i]);
                }
            }
        }
    }

    #[test]
    fn global_lookahead_matches_refit() {
        let m = toy_model(7, 15, 1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..25 {
            let xs: Vec<f64> = (0..2).map(|_| rng.gen()).collect();
            let xp: Vec<f64> = (0..2).map(|_| rng.gen()).collect();
            let la = m.lookahead_global(&xs, &xp).unwrap();
            let refit = refit_deriv_var(&m, &xs, &xp, 1.234);
            for i in 0..2 {
                assert_relative_eq!(la.var_l[i], refit[i], max_relative = 1e-6);
            }
            assert_eq!(m.lookahead_global(&xs, &xs).unwrap(), m.lookahead_local(&xs).unwrap());
        }
    }

    #[test]
    fn lookahead_independence_limit() {
        // Short lengthscales: data and candidate are effectively independent.
        let x = vec![vec![0.0, 0.0], vec![0.05, 0.02]];
        let hp = Hyperparams::new(vec![0.02, 0.02], 1.0, 1e-4, 0.0).unwrap();
        let m = GpModel::condition(Dataset::new(x, vec![1.0, -1.0]).unwrap(), hp).unwrap();
        let far = [0.9, 0.8];
        let la = m.lookahead_local(&far).unwrap();
        let d = m.posterior_deriv(&far).unwrap();
        for i in 0..2 {
            assert_relative_eq!(la.var_l[i], d.var_d[i], max_relative = 1e-12);
        }
        let g = m.lookahead_global(&[0.5, 0.5], &far).unwrap();
        for i in 0..2 {
            assert_relative_eq!(g.var_l[i], d.var_d[i], max_relative = 1e-12);
        }
    }

    #[test]
    fn lookahead_degenerate_denominator() {
        let hp = Hyperparams::new(vec![0.5], 1.0, 0.0, 0.0).unwrap();
        let mut m = GpModel::prior(hp).unwrap();
        // No data and zero noise: σ² + η² = s + floor, still positive.
        assert!(m.lookahead_local(&[0.3]).is_ok());
        m.standardization.sd = 0.0;
        m.hp.outputscale = f64::MIN_POSITIVE;
        m.hp.noise_var = 0.0;
        let mut terms = m.point_terms(&[0.3]).unwrap();
        terms.var = 0.0;
        assert!(matches!(m.lookahead_from(&terms, &terms), Err(Error::NumericalFailure(_))));
    }

    #[test]
    fn queries_do_not_refactorize() {
        let m = toy_model(8, 20, 1e-4);
        let before = factorization_count();
        for k in 0..200 {
            let x = [k as f64 / 200.0, 0.5];
            m.posterior_f(&x).unwrap();
            m.posterior_deriv(&x).unwrap();
            m.lookahead_local(&x).unwrap();
        }
        assert_eq!(factorization_count(), before);
    }

    #[test]
    fn lml_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random_points(&mut rng, 12, 2);
        let y: Vec<f64> = x.iter().map(|p| (4.0 * p[0]).cos() + p[1]).collect();
        let obj = LmlObjective::new(&x, &y);
        let p = [(0.4f64).ln(), (0.8f64).ln(), (1.3f64).ln(), (1e-2f64).ln(), 0.1];
        let (_, g) = obj.value_grad(&p).unwrap();
        let h = 1e-6;
        for i in 0..p.len() {
            let mut pp = p;
            let mut pm = p;
            pp[i] += h;
            pm[i] -= h;
            let fd = (obj.value_grad(&pp).unwrap().0 - obj.value_grad(&pm).unwrap().0) / (2.0 * h);
            assert_relative_eq!(g[i], fd, max_relative = 1e-5, epsilon = 1e-7);
        }
    }

    #[test]
    fn fit_recovers_lengthscales() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = random_points(&mut rng, 60, 2);
        let truth = Hyperparams::new(vec![0.3, 0.6], 1.0, 1e-4, 0.0).unwrap();
        let k = gram(&x, &truth) + DMatrix::identity(60, 60) * 1e-4;
        let l = k.cholesky().unwrap().unpack();
        let z = DVector::from_iterator(60, (0..60).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let y: Vec<f64> = (l * z).iter().copied().collect();
        let m = GpModel::fit(Dataset::new(x, y).unwrap(), 5).unwrap();
        for (fitted, true_l) in m.hyperparams().lengthscales.iter().zip(&truth.lengthscales) {
            assert!((fitted.ln() - true_l.ln()).abs() < 0.5, "{fitted} vs {true_l}");
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let m = toy_model(9, 10, 0.0);
        let a = GpModel::fit(m.data().clone(), 3).unwrap();
        let b = GpModel::fit(m.data().clone(), 3).unwrap();
        assert_eq!(a.hyperparams(), b.hyperparams());
    }

    #[test]
    fn constant_outputs_are_degenerate() {
        let data = Dataset::new(vec![vec![0.1], vec![0.5], vec![0.9]], vec![2.0; 3]).unwrap();
        let m = GpModel::fit(data, 0).unwrap();
        assert!(m.is_degenerate());
        assert!(m.hyperparams().noise_var > m.hyperparams().outputscale);
        let p = m.posterior_f(&[0.3]).unwrap();
        assert!((p.mu - 2.0).abs() < 1e-9);
        assert!(m.posterior_deriv(&[0.3]).unwrap().mu_d[0].abs() < 1e-9);
    }

    #[test]
    fn fit_rejects_tiny_datasets() {
        let data = Dataset::new(vec![vec![0.1]], vec![2.0]).unwrap();
        assert!(matches!(GpModel::fit(data, 0), Err(Error::InvalidArgument(_))));
    }
}
