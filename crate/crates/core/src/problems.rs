//! Benchmark problems with analytic gradients.
//!
//! Constants live in `data/problems.json`, a versioned catalog shipped with
//! the crate. Problems are evaluated in their own box; the active-learning
//! loop works in the unit cube and maps through [`BenchProblem::to_box`].

use std::f64::consts::PI;
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CATALOG_JSON: &str = include_str!("../data/problems.json");

/// Step used for finite-difference gradients in normalized coordinates.
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorrisParams {
    pub first_order: f64,
    pub n_first: usize,
    pub second_order: f64,
    pub n_second: usize,
    pub third_order: f64,
    pub n_third: usize,
    pub fourth_order: f64,
    pub n_fourth: usize,
    /// 1-based indices of inputs passed through `1.1x/(x + 0.1)`.
    pub nonlinear_inputs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Family {
    /// `sin x₁ + a sin² x₂ + b x₃⁴ sin x₁`
    Ishigami { a: f64, b: f64 },
    /// Sobol' G function `Πᵢ (|4xᵢ - 2| + aᵢ)/(1 + aᵢ)`
    Gsobol { a: Vec<f64> },
    /// Morris screening function with deterministic minor coefficients
    /// `(-1)^i` and `(-1)^(i+j)`.
    Morris(MorrisParams),
    Branin,
    /// `(offset - Σₖ αₖ exp(-Σⱼ Aₖⱼ (xⱼ - Pₖⱼ)²)) / scale`
    Hartmann {
        alpha: Vec<f64>,
        a: Vec<Vec<f64>>,
        p: Vec<Vec<f64>>,
        offset: f64,
        scale: f64,
    },
    /// `(6x - 2)² sin(12x - 4)`
    Forrester,
    /// `Σᵢ cᵢ xᵢ`
    Linear { coeffs: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchProblem {
    pub name: String,
    pub bounds: Vec<(f64, f64)>,
    #[serde(default)]
    pub noise_sd: f64,
    #[serde(flatten)]
    pub family: Family,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Catalog {
    pub version: u32,
    #[serde(default)]
    pub notes: String,
    pub problems: Vec<BenchProblem>,
}

impl Catalog {
    pub fn from_json(text: &str) -> Result<Self> {
        let cat: Catalog = serde_json::from_str(text)?;
        for p in &cat.problems {
            p.validate()?;
        }
        Ok(cat)
    }

    /// The catalog shipped with the crate.
    pub fn builtin() -> &'static Catalog {
        static CATALOG: OnceLock<Catalog> = OnceLock::new();
        CATALOG.get_or_init(|| Catalog::from_json(CATALOG_JSON).expect("builtin catalog is valid"))
    }

    pub fn names(&self) -> Vec<String> {
        self.problems.iter().map(|p| p.name.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Result<BenchProblem> {
        self.problems
            .iter()
            .find(|p| p.name.eq_ignore_ascii_case(name))
            .cloned()
            .ok_or_else(|| Error::UnknownProblem {
                name: name.to_string(),
                valid: self.names(),
            })
    }
}

/// Looks up a problem in the builtin catalog.
pub fn make_problem(name: &str) -> Result<BenchProblem> {
    Catalog::builtin().get(name)
}

pub fn list_problems() -> Vec<String> {
    Catalog::builtin().names()
}

impl BenchProblem {
    pub fn new(name: impl Into<String>, bounds: Vec<(f64, f64)>, family: Family) -> Result<Self> {
        let p = BenchProblem {
            name: name.into(),
            bounds,
            noise_sd: 0.0,
            family,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_noise(mut self, noise_sd: f64) -> Result<Self> {
        if !(noise_sd.is_finite() && noise_sd >= 0.0) {
            return Err(Error::invalid(format!("noise sd must be >= 0, got {noise_sd}")));
        }
        self.noise_sd = noise_sd;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if self.bounds.is_empty() {
            return Err(Error::invalid(format!("{}: no dimensions", self.name)));
        }
        if let Some((lo, hi)) = self.bounds.iter().find(|(lo, hi)| !(hi > lo)) {
            return Err(Error::invalid(format!(
                "{}: box width must be > 0, got [{lo}, {hi}]",
                self.name
            )));
        }
        let d = self.dim();
        let expected = match &self.family {
            Family::Ishigami { .. } => Some(3),
            Family::Gsobol { a } => Some(a.len()),
            Family::Morris(m) => {
                let max_index = m.nonlinear_inputs.iter().copied().max().unwrap_or(0);
                if [m.n_first, m.n_second, m.n_third, m.n_fourth, max_index]
                    .iter()
                    .any(|&n| n > d)
                    || m.nonlinear_inputs.contains(&0)
                {
                    return Err(Error::invalid(format!("{}: Morris indices exceed d", self.name)));
                }
                None
            }
            Family::Branin => Some(2),
            Family::Hartmann { alpha, a, p, scale, .. } => {
                if a.len() != alpha.len()
                    || p.len() != alpha.len()
                    || a.iter().chain(p).any(|row| row.len() != d)
                    || *scale == 0.0
                {
                    return Err(Error::invalid(format!("{}: inconsistent Hartmann constants", self.name)));
                }
                None
            }
            Family::Forrester => Some(1),
            Family::Linear { coeffs } => Some(coeffs.len()),
        };
        if let Some(e) = expected {
            if e != d {
                return Err(Error::invalid(format!(
                    "{}: family expects {e} dimensions, box has {d}",
                    self.name
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.bounds.iter().map(|(lo, hi)| hi - lo).collect()
    }

    /// Affine map from the unit cube to the problem box.
    pub fn to_box(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(&self.bounds)
            .map(|(v, (lo, hi))| lo + v * (hi - lo))
            .collect()
    }

    pub fn has_analytic_gradient(&self) -> bool {
        true
    }

    /// Noise-free value at a point of the problem box.
    pub fn eval(&self, x: &[f64]) -> f64 {
        match &self.family {
            Family::Ishigami { a, b } => {
                x[0].sin() + a * x[1].sin().powi(2) + b * x[2].powi(4) * x[0].sin()
            }
            Family::Gsobol { a } => x
                .iter()
                .zip(a)
                .map(|(xi, ai)| ((4.0 * xi - 2.0).abs() + ai) / (1.0 + ai))
                .product(),
            Family::Morris(m) => morris_eval(m, &morris_w(m, x)),
            Family::Branin => {
                let (x1, x2) = (x[0], x[1]);
                let inner = x2 - 5.1 / (4.0 * PI * PI) * x1 * x1 + 5.0 / PI * x1 - 6.0;
                inner * inner + 10.0 * (1.0 - 1.0 / (8.0 * PI)) * x1.cos() + 10.0
            }
            Family::Hartmann { alpha, a, p, offset, scale } => {
                let s: f64 = alpha
                    .iter()
                    .zip(a.iter().zip(p))
                    .map(|(al, (ar, pr))| {
                        let e: f64 = x.iter().zip(ar.iter().zip(pr)).map(|(xj, (aj, pj))| aj * (xj - pj).powi(2)).sum();
                        al * (-e).exp()
                    })
                    .sum();
                (offset - s) / scale
            }
            Family::Forrester => (6.0 * x[0] - 2.0).powi(2) * (12.0 * x[0] - 4.0).sin(),
            Family::Linear { coeffs } => coeffs.iter().zip(x).map(|(c, v)| c * v).sum(),
        }
    }

    /// Analytic gradient at a point of the problem box.
    ///
    /// The G function's kink at `xᵢ = 0.5` uses the subgradient `0`.
    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        match &self.family {
            Family::Ishigami { a, b } => vec![
                x[0].cos() * (1.0 + b * x[2].powi(4)),
                2.0 * a * x[1].sin() * x[1].cos(),
                4.0 * b * x[2].powi(3) * x[0].sin(),
            ],
            Family::Gsobol { a } => {
                let factors: Vec<f64> = x
                    .iter()
                    .zip(a)
                    .map(|(xi, ai)| ((4.0 * xi - 2.0).abs() + ai) / (1.0 + ai))
                    .collect();
                (0..x.len())
                    .map(|i| {
                        let u = 4.0 * x[i] - 2.0;
                        let sign = if u > 0.0 {
                            1.0
                        } else if u < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        let others: f64 = factors
                            .iter()
                            .enumerate()
                            .filter(|(j, _)| *j != i)
                            .map(|(_, f)| f)
                            .product();
                        4.0 * sign / (1.0 + a[i]) * others
                    })
                    .collect()
            }
            Family::Morris(m) => {
                let w = morris_w(m, x);
                let dw = morris_dw(m, x);
                morris_grad_w(m, &w)
                    .into_iter()
                    .zip(dw)
                    .map(|(g, d)| g * d)
                    .collect()
            }
            Family::Branin => {
                let (x1, x2) = (x[0], x[1]);
                let c = 5.1 / (4.0 * PI * PI);
                let inner = x2 - c * x1 * x1 + 5.0 / PI * x1 - 6.0;
                vec![
                    2.0 * inner * (-2.0 * c * x1 + 5.0 / PI) - 10.0 * (1.0 - 1.0 / (8.0 * PI)) * x1.sin(),
                    2.0 * inner,
                ]
            }
            Family::Hartmann { alpha, a, p, scale, .. } => {
                let mut g = vec![0.0; x.len()];
                for (al, (ar, pr)) in alpha.iter().zip(a.iter().zip(p)) {
                    let e: f64 = x.iter().zip(ar.iter().zip(pr)).map(|(xj, (aj, pj))| aj * (xj - pj).powi(2)).sum();
                    let w = al * (-e).exp();
                    for j in 0..x.len() {
                        // d/dx (-w) = w · 2A(x - P)
                        g[j] += w * 2.0 * ar[j] * (x[j] - pr[j]) / scale;
                    }
                }
                g
            }
            Family::Forrester => {
                let u = 6.0 * x[0] - 2.0;
                let v = 12.0 * x[0] - 4.0;
                vec![12.0 * u * v.sin() + 12.0 * u * u * v.cos()]
            }
            Family::Linear { coeffs } => coeffs.clone(),
        }
    }

    /// Noise-free value at a unit-cube point.
    pub fn eval_normalized(&self, u: &[f64]) -> f64 {
        self.eval(&self.to_box(u))
    }

    /// Gradient with respect to unit-cube coordinates (chain rule through
    /// the box widths). Falls back to central differences with step
    /// [`FD_STEP`] when no analytic gradient exists.
    pub fn grad_normalized(&self, u: &[f64]) -> Vec<f64> {
        if self.has_analytic_gradient() {
            return self
                .grad(&self.to_box(u))
                .into_iter()
                .zip(self.widths())
                .map(|(g, w)| g * w)
                .collect();
        }
        self.fd_grad_normalized(u)
    }

    pub fn fd_grad_normalized(&self, u: &[f64]) -> Vec<f64> {
        let mut probe = u.to_vec();
        (0..u.len())
            .map(|i| {
                probe[i] = u[i] + FD_STEP;
                let up = self.eval_normalized(&probe);
                probe[i] = u[i] - FD_STEP;
                let down = self.eval_normalized(&probe);
                probe[i] = u[i];
                (up - down) / (2.0 * FD_STEP)
            })
            .collect()
    }

    /// One (possibly noisy) evaluation at a unit-cube point.
    pub fn observe<R: Rng + ?Sized>(&self, u: &[f64], rng: &mut R) -> Result<f64> {
        if u.len() != self.dim() {
            return Err(Error::invalid(format!(
                "{}: point has dimension {}, expected {}",
                self.name,
                u.len(),
                self.dim()
            )));
        }
        if u.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!("{}: point {u:?} outside the unit cube", self.name)));
        }
        let y = self.eval_normalized(u);
        if self.noise_sd > 0.0 {
            let noise = Normal::new(0.0, self.noise_sd).expect("validated noise sd");
            Ok(y + noise.sample(rng))
        } else {
            Ok(y)
        }
    }
}

fn morris_w(m: &MorrisParams, x: &[f64]) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            if m.nonlinear_inputs.contains(&(i + 1)) {
                2.0 * (1.1 * v / (v + 0.1) - 0.5)
            } else {
                2.0 * (v - 0.5)
            }
        })
        .collect()
}

fn morris_dw(m: &MorrisParams, x: &[f64]) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            if m.nonlinear_inputs.contains(&(i + 1)) {
                2.0 * 1.1 * 0.1 / (v + 0.1).powi(2)
            } else {
                2.0
            }
        })
        .collect()
}

fn sign_pow(k: usize) -> f64 {
    if k % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

fn morris_beta1(m: &MorrisParams, i: usize) -> f64 {
    if i < m.n_first {
        m.first_order
    } else {
        sign_pow(i + 1)
    }
}

fn morris_beta2(m: &MorrisParams, i: usize, j: usize) -> f64 {
    if i < m.n_second && j < m.n_second {
        m.second_order
    } else {
        sign_pow(i + j + 2)
    }
}

fn morris_eval(m: &MorrisParams, w: &[f64]) -> f64 {
    let d = w.len();
    let mut y = 0.0;
    for i in 0..d {
        y += morris_beta1(m, i) * w[i];
        for j in i + 1..d {
            y += morris_beta2(m, i, j) * w[i] * w[j];
        }
    }
    for i in 0..m.n_third {
        for j in i + 1..m.n_third {
            for l in j + 1..m.n_third {
                y += m.third_order * w[i] * w[j] * w[l];
            }
        }
    }
    for i in 0..m.n_fourth {
        for j in i + 1..m.n_fourth {
            for l in j + 1..m.n_fourth {
                for s in l + 1..m.n_fourth {
                    y += m.fourth_order * w[i] * w[j] * w[l] * w[s];
                }
            }
        }
    }
    y
}

fn morris_grad_w(m: &MorrisParams, w: &[f64]) -> Vec<f64> {
    let d = w.len();
    let mut g = vec![0.0; d];
    for i in 0..d {
        g[i] += morris_beta1(m, i);
        for j in i + 1..d {
            let b = morris_beta2(m, i, j);
            g[i] += b * w[j];
            g[j] += b * w[i];
        }
    }
    for i in 0..m.n_third {
        for j in i + 1..m.n_third {
            for l in j + 1..m.n_third {
                let b = m.third_order;
                g[i] += b * w[j] * w[l];
                g[j] += b * w[i] * w[l];
                g[l] += b * w[i] * w[j];
            }
        }
    }
    for i in 0..m.n_fourth {
        for j in i + 1..m.n_fourth {
            for l in j + 1..m.n_fourth {
                for s in l + 1..m.n_fourth {
                    let b = m.fourth_order;
                    g[i] += b * w[j] * w[l] * w[s];
                    g[j] += b * w[i] * w[l] * w[s];
                    g[l] += b * w[i] * w[j] * w[s];
                    g[s] += b * w[i] * w[j] * w[l];
                }
            }
        }
    }
    g
}
