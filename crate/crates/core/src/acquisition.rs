//! Acquisition functions.
//!
//! Local look-ahead acquisitions score a candidate by how much observing
//! `f` there would tighten the posterior of each partial derivative at the
//! same point. Global variants average that reduction over a fixed set of
//! reference nodes. Baselines: quasi-random selection, maximum `f`
//! variance and BALD on `f`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{GpModel, LookAhead, PointTerms};
use crate::special::{folded_moments, ncx2_var, sq_entropy, GaussParams};

/// Floor applied to variances before any log or ratio.
pub const VAR_FLOOR: f64 = 1e-12;

/// Default number of reference nodes for global acquisitions.
pub const DEFAULT_GLOBAL_NODES: usize = 128;

/// Per-dimension look-ahead utility shared by local and global variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Reduction {
    /// Derivative variance reduction.
    Dvr,
    /// Derivative information gain.
    Dig,
    /// Folded-normal (absolute derivative) variance reduction.
    DAbVr,
    /// Squared-derivative variance reduction.
    DSqVr,
    /// Squared-derivative information gain.
    DSqIg,
}

/// Serialized as its CLI name, e.g. `"dsq-ig"` or `"gdsqvr:64"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum AcquisitionKind {
    Qr,
    Var,
    FIg,
    Dv,
    DAbV,
    DSqV,
    Local(Reduction),
    Global { reduction: Reduction, nodes: usize },
}

const NAMES: &[(&str, AcquisitionKind)] = &[
    ("qr", AcquisitionKind::Qr),
    ("var", AcquisitionKind::Var),
    ("f-ig", AcquisitionKind::FIg),
    ("dv", AcquisitionKind::Dv),
    ("dvr", AcquisitionKind::Local(Reduction::Dvr)),
    ("d-ig", AcquisitionKind::Local(Reduction::Dig)),
    ("dabv", AcquisitionKind::DAbV),
    ("dabvr", AcquisitionKind::Local(Reduction::DAbVr)),
    ("dsqv", AcquisitionKind::DSqV),
    ("dsqvr", AcquisitionKind::Local(Reduction::DSqVr)),
    ("dsq-ig", AcquisitionKind::Local(Reduction::DSqIg)),
    ("gdvr", AcquisitionKind::Global { reduction: Reduction::Dvr, nodes: DEFAULT_GLOBAL_NODES }),
    ("gd-ig", AcquisitionKind::Global { reduction: Reduction::Dig, nodes: DEFAULT_GLOBAL_NODES }),
    ("gdabvr", AcquisitionKind::Global { reduction: Reduction::DAbVr, nodes: DEFAULT_GLOBAL_NODES }),
    ("gdsqvr", AcquisitionKind::Global { reduction: Reduction::DSqVr, nodes: DEFAULT_GLOBAL_NODES }),
    ("gdsq-ig", AcquisitionKind::Global { reduction: Reduction::DSqIg, nodes: DEFAULT_GLOBAL_NODES }),
];

impl AcquisitionKind {
    /// Every acquisition, with global variants at the default node count.
    pub fn all() -> Vec<AcquisitionKind> {
        NAMES.iter().map(|(_, k)| *k).collect()
    }

    pub fn names() -> Vec<String> {
        NAMES.iter().map(|(n, _)| n.to_string()).collect()
    }

    /// CLI name, without the node count.
    pub fn name(&self) -> &'static str {
        let key = match *self {
            AcquisitionKind::Global { reduction, .. } => AcquisitionKind::Global {
                reduction,
                nodes: DEFAULT_GLOBAL_NODES,
            },
            k => k,
        };
        NAMES
            .iter()
            .find(|(_, k)| *k == key)
            .map(|(n, _)| *n)
            .expect("every kind is named")
    }

    pub fn global_nodes(&self) -> Option<usize> {
        match self {
            AcquisitionKind::Global { nodes, .. } => Some(*nodes),
            _ => None,
        }
    }

    /// Replaces the node count of a global variant.
    pub fn with_nodes(self, m: usize) -> Result<Self> {
        match self {
            AcquisitionKind::Global { reduction, .. } => {
                if m == 0 {
                    return Err(Error::invalid("global acquisitions need at least one node"));
                }
                Ok(AcquisitionKind::Global { reduction, nodes: m })
            }
            _ => Err(Error::invalid(format!("{} takes no reference nodes", self.name()))),
        }
    }
}

impl fmt::Display for AcquisitionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.global_nodes() {
            Some(m) if m != DEFAULT_GLOBAL_NODES => write!(f, "{}:{m}", self.name()),
            _ => f.write_str(self.name()),
        }
    }
}

impl From<AcquisitionKind> for String {
    fn from(k: AcquisitionKind) -> String {
        k.to_string()
    }
}

impl TryFrom<String> for AcquisitionKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Parses `name` or `name:M` (global variants only), case-insensitively.
/// Underscores are accepted in place of hyphens.
impl FromStr for AcquisitionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase().replace('_', "-");
        let (name, nodes) = match lower.split_once(':') {
            Some((n, m)) => {
                let m: usize = m
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad node count in {s:?}")))?;
                (n.to_string(), Some(m))
            }
            None => (lower, None),
        };
        let kind = NAMES
            .iter()
            .find(|(n, _)| *n == name || n.replace('-', "") == name)
            .map(|(_, k)| *k)
            .ok_or_else(|| Error::UnknownAcquisition {
                name: s.to_string(),
                valid: AcquisitionKind::names(),
            })?;
        match nodes {
            Some(m) => kind.with_nodes(m),
            None => Ok(kind),
        }
    }
}

fn floored_sd(v: f64) -> f64 {
    v.max(VAR_FLOOR).sqrt()
}

/// Utility of shrinking one derivative's variance from `var_d` to `var_l`
/// with plug-in mean `mu`.
pub fn reduction_term(reduction: Reduction, mu: f64, var_d: f64, var_l: f64) -> f64 {
    let value = match reduction {
        Reduction::Dvr => var_d - var_l,
        Reduction::Dig => 0.5 * (var_d.max(VAR_FLOOR) / var_l.max(VAR_FLOOR)).ln(),
        Reduction::DAbVr => {
            let before = folded_moments(GaussParams { mu, sigma: floored_sd(var_d) }).var;
            let after = folded_moments(GaussParams { mu, sigma: floored_sd(var_l) }).var;
            before - after
        }
        Reduction::DSqVr => {
            let m2 = mu * mu;
            (4.0 * var_d * m2 + 2.0 * var_d * var_d) - (4.0 * var_l * m2 + 2.0 * var_l * var_l)
        }
        Reduction::DSqIg => {
            let (sd, sl) = (floored_sd(var_d), floored_sd(var_l));
            if sd == sl {
                0.0
            } else {
                // Both sigmas are positive and mu finite, so this cannot fail.
                sq_entropy(GaussParams { mu, sigma: sd }).unwrap_or(0.0)
                    - sq_entropy(GaussParams { mu, sigma: sl }).unwrap_or(0.0)
            }
        }
    };
    value.max(0.0)
}

fn reduction_sum(reduction: Reduction, la: &LookAhead, var_d: &[f64]) -> f64 {
    la.mu_plugin
        .iter()
        .zip(var_d)
        .zip(&la.var_l)
        .map(|((mu, vd), vl)| reduction_term(reduction, *mu, *vd, *vl))
        .sum()
}

/// Posterior variance of `f(x)`.
pub fn acq_var_f(model: &GpModel, x: &[f64]) -> Result<f64> {
    Ok(model.posterior_f(x)?.var)
}

/// BALD on `f`: `½ log(1 + σ²(x)/η²)` with the model's floored noise.
pub fn acq_ig_f(model: &GpModel, x: &[f64]) -> Result<f64> {
    let var = model.posterior_f(x)?.var;
    Ok(0.5 * (var / model.effective_noise()).ln_1p())
}

/// Sum of derivative posterior variances.
pub fn acq_dv(model: &GpModel, x: &[f64]) -> Result<f64> {
    Ok(model.posterior_deriv(x)?.var_d.iter().sum())
}

/// Sum of folded-normal variances of `|∂f/∂xᵢ|`.
pub fn acq_dabv(model: &GpModel, x: &[f64]) -> Result<f64> {
    let post = model.posterior_deriv(x)?;
    Ok(post
        .mu_d
        .iter()
        .zip(&post.var_d)
        .map(|(mu, v)| {
            if *v <= 0.0 {
                0.0
            } else {
                folded_moments(GaussParams { mu: *mu, sigma: v.sqrt() }).var
            }
        })
        .sum())
}

/// Sum of variances of `(∂f/∂xᵢ)²`.
pub fn acq_dsqv(model: &GpModel, x: &[f64]) -> Result<f64> {
    let post = model.posterior_deriv(x)?;
    Ok(post
        .mu_d
        .iter()
        .zip(&post.var_d)
        .map(|(mu, v)| ncx2_var(GaussParams { mu: *mu, sigma: v.sqrt() }))
        .sum())
}

/// Local look-ahead acquisition at `x`.
pub fn acq_local(reduction: Reduction, model: &GpModel, x: &[f64]) -> Result<f64> {
    let terms = model.point_terms(x)?;
    local_from_terms(reduction, model, &terms)
}

fn local_from_terms(reduction: Reduction, model: &GpModel, terms: &PointTerms) -> Result<f64> {
    let var_d = terms.deriv_posterior(model.hyperparams()).var_d;
    let la = model.lookahead_from(terms, terms)?;
    Ok(reduction_sum(reduction, &la, &var_d))
}

pub fn acq_dvr(model: &GpModel, x: &[f64]) -> Result<f64> {
    acq_local(Reduction::Dvr, model, x)
}

pub fn acq_dig(model: &GpModel, x: &[f64]) -> Result<f64> {
    acq_local(Reduction::Dig, model, x)
}

pub fn acq_dabvr(model: &GpModel, x: &[f64]) -> Result<f64> {
    acq_local(Reduction::DAbVr, model, x)
}

pub fn acq_dsqvr(model: &GpModel, x: &[f64]) -> Result<f64> {
    acq_local(Reduction::DSqVr, model, x)
}

pub fn acq_dsqig(model: &GpModel, x: &[f64]) -> Result<f64> {
    acq_local(Reduction::DSqIg, model, x)
}

/// Reference nodes with their whitened kernel terms, computed once per
/// model so that each candidate costs `O(t²dM)`.
pub struct GlobalNodes {
    terms: Vec<PointTerms>,
    var_d: Vec<Vec<f64>>,
}

impl GlobalNodes {
    pub fn new(model: &GpModel, nodes: &[Vec<f64>]) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::invalid("global acquisitions need at least one node"));
        }
        let terms = nodes
            .iter()
            .map(|n| model.point_terms(n))
            .collect::<Result<Vec<_>>>()?;
        let var_d = terms
            .iter()
            .map(|t| t.deriv_posterior(model.hyperparams()).var_d)
            .collect();
        Ok(GlobalNodes { terms, var_d })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    fn evaluate(&self, reduction: Reduction, model: &GpModel, star: &PointTerms) -> Result<f64> {
        let mut total = 0.0;
        for (plus, var_d) in self.terms.iter().zip(&self.var_d) {
            let la = model.lookahead_from(star, plus)?;
            total += reduction_sum(reduction, &la, var_d);
        }
        Ok(total / self.terms.len() as f64)
    }
}

/// Global look-ahead acquisition: the local utility at each node after a
/// hypothetical observation at `x_star`, averaged over the nodes.
pub fn acq_global(reduction: Reduction, model: &GpModel, x_star: &[f64], nodes: &[Vec<f64>]) -> Result<f64> {
    let ctx = GlobalNodes::new(model, nodes)?;
    let star = model.point_terms(x_star)?;
    ctx.evaluate(reduction, model, &star)
}

/// An acquisition bound to a model, ready for repeated evaluation.
pub struct Acquisition<'a> {
    kind: AcquisitionKind,
    model: &'a GpModel,
    nodes: Option<GlobalNodes>,
}

impl<'a> Acquisition<'a> {
    /// `nodes` must be given for global variants and is ignored otherwise.
    pub fn new(kind: AcquisitionKind, model: &'a GpModel, nodes: Option<&[Vec<f64>]>) -> Result<Self> {
        let nodes = match kind {
            AcquisitionKind::Qr => {
                return Err(Error::invalid("quasi-random selection has no acquisition value"))
            }
            AcquisitionKind::Global { .. } => {
                let n = nodes.ok_or_else(|| Error::invalid("global acquisition needs reference nodes"))?;
                Some(GlobalNodes::new(model, n)?)
            }
            _ => None,
        };
        Ok(Acquisition { kind, model, nodes })
    }

    pub fn kind(&self) -> AcquisitionKind {
        self.kind
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        let m = self.model;
        match self.kind {
            AcquisitionKind::Qr => unreachable!("rejected in Acquisition::new"),
            AcquisitionKind::Var => acq_var_f(m, x),
            AcquisitionKind::FIg => acq_ig_f(m, x),
            AcquisitionKind::Dv => acq_dv(m, x),
            AcquisitionKind::DAbV => acq_dabv(m, x),
            AcquisitionKind::DSqV => acq_dsqv(m, x),
            AcquisitionKind::Local(r) => acq_local(r, m, x),
            AcquisitionKind::Global { reduction, .. } => {
                let star = m.point_terms(x)?;
                self.nodes
                    .as_ref()
                    .expect("set in Acquisition::new")
                    .evaluate(reduction, m, &star)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::Dataset;
    use crate::kernel::Hyperparams;
    use crate::special::gauss_entropy;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model_2d(seed: u64, t: usize) -> GpModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..t).map(|_| vec![rng.gen(), rng.gen()]).collect();
        let y = x.iter().map(|p| (4.0 * p[0]).sin() + p[1] * p[1]).collect();
        let hp = Hyperparams::new(vec![0.3, 0.5], 1.3, 1e-4, 0.2).unwrap();
        GpModel::condition(Dataset::new(x, y).unwrap(), hp).unwrap()
    }

    fn prior_model(d: usize) -> GpModel {
        GpModel::prior(Hyperparams::new(vec![0.5; d], 2.0, 0.01, 0.0).unwrap()).unwrap()
    }

    fn random_points(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.gen()).collect()).collect()
    }

    #[test]
    fn names_round_trip() {
        assert_eq!(AcquisitionKind::all().len(), 16);
        for k in AcquisitionKind::all() {
            assert_eq!(k.to_string().parse::<AcquisitionKind>().unwrap(), k);
        }
        assert_eq!("DSQ_IG".parse::<AcquisitionKind>().unwrap(), AcquisitionKind::Local(Reduction::DSqIg));
        assert_eq!("dsqig".parse::<AcquisitionKind>().unwrap(), AcquisitionKind::Local(Reduction::DSqIg));
        let g: AcquisitionKind = "gdsqvr:64".parse().unwrap();
        assert_eq!(g.global_nodes(), Some(64));
        assert_eq!(g.to_string(), "gdsqvr:64");
        assert!("gdvr:0".parse::<AcquisitionKind>().is_err());
        assert!("dvr:10".parse::<AcquisitionKind>().is_err());
        assert_eq!(serde_json::to_string(&g).unwrap(), "\"gdsqvr:64\"");
        assert_eq!(serde_json::from_str::<AcquisitionKind>("\"dvr\"").unwrap(), AcquisitionKind::Local(Reduction::Dvr));
        assert!(matches!("ei".parse::<AcquisitionKind>(), Err(Error::UnknownAcquisition { .. })));
    }

    #[test]
    fn var_f_prior_and_data() {
        let p = prior_model(2);
        for x in random_points(1, 20, 2) {
            assert_eq!(acq_var_f(&p, &x).unwrap(), 2.0);
        }
        let m = model_2d(2, 15);
        let x0 = m.data().inputs()[3].clone();
        assert!(acq_var_f(&m, &x0).unwrap() < 1e-3);
    }

    #[test]
    fn var_f_argmax_in_largest_gap() {
        let hp = Hyperparams::new(vec![0.15], 1.0, 1e-6, 0.0).unwrap();
        let data = Dataset::new(vec![vec![0.05], vec![0.2], vec![0.35]], vec![0.1, -0.3, 0.4]).unwrap();
        let m = GpModel::condition(data, hp).unwrap();
        let (best, _) = (0..=1000)
            .map(|k| k as f64 / 1000.0)
            .map(|x| (x, acq_var_f(&m, &[x]).unwrap()))
            .fold((0.0, f64::MIN), |a, b| if b.1 > a.1 { b } else { a });
        assert!(best > 0.35);
    }

    #[test]
    fn ig_f_examples() {
        let m = model_2d(3, 10);
        let eta = m.effective_noise();
        let x = [0.4, 0.6];
        let var = acq_var_f(&m, &x).unwrap();
        assert_relative_eq!(acq_ig_f(&m, &x).unwrap(), 0.5 * (1.0 + var / eta).ln(), max_relative = 1e-12);
        // σ² = η² gives ½ log 2.
        let hp = Hyperparams::new(vec![0.5], 0.3, 0.3, 0.0).unwrap();
        let p = GpModel::prior(hp).unwrap();
        assert_relative_eq!(acq_ig_f(&p, &[0.2]).unwrap(), 0.5 * 2f64.ln(), max_relative = 1e-12);
        let mut prev = -1.0;
        let mut pairs: Vec<(f64, f64)> = random_points(4, 200, 2)
            .iter()
            .map(|x| (acq_var_f(&m, x).unwrap(), acq_ig_f(&m, x).unwrap()))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (_, ig) in pairs {
            assert!(ig >= prev);
            prev = ig;
        }
    }

    #[test]
    fn prior_derivative_variances() {
        let hp = Hyperparams::new(vec![0.5, 2.0], 3.0, 0.01, 0.0).unwrap();
        let p = GpModel::prior(hp).unwrap();
        let x = [0.3, 0.9];
        assert_relative_eq!(acq_dv(&p, &x).unwrap(), 3.0 / 0.25 + 3.0 / 4.0, max_relative = 1e-14);
        let half_normal = 1.0 - 2.0 / std::f64::consts::PI;
        assert_relative_eq!(acq_dabv(&p, &x).unwrap(), half_normal * (12.0 + 0.75), max_relative = 1e-12);
        assert_relative_eq!(acq_dsqv(&p, &x).unwrap(), 2.0 * (144.0 + 0.5625), max_relative = 1e-14);
    }

    #[test]
    fn dabv_without_folding() {
        // Steep line: |μ'| ≫ σ', so folding is negligible.
        let hp = Hyperparams::new(vec![2.0], 1.0, 1e-6, 0.0).unwrap();
        let x: Vec<Vec<f64>> = (0..8).map(|k| vec![k as f64 / 7.0]).collect();
        let y = x.iter().map(|p| 40.0 * p[0]).collect();
        let m = GpModel::condition(Dataset::new(x, y).unwrap(), hp).unwrap();
        let q = [0.55];
        assert_relative_eq!(acq_dabv(&m, &q).unwrap(), acq_dv(&m, &q).unwrap(), max_relative = 1e-6);
    }

    #[test]
    fn nonnegative_everywhere() {
        let m = model_2d(5, 12);
        let nodes = random_points(6, 16, 2);
        for x in random_points(7, 1000, 2) {
            for k in AcquisitionKind::all().into_iter().filter(|k| *k != AcquisitionKind::Qr) {
                let a = Acquisition::new(k, &m, Some(&nodes)).unwrap();
                let v = a.evaluate(&x).unwrap();
                assert!(v >= 0.0 && v.is_finite(), "{k}: {v}");
            }
        }
    }

    #[test]
    fn zero_cross_covariance_gives_zero() {
        // Far from data with short lengthscales, the f-derivative covariance vanishes.
        let hp = Hyperparams::new(vec![0.02, 0.02], 1.0, 1e-4, 0.0).unwrap();
        let data = Dataset::new(vec![vec![0.1, 0.1], vec![0.15, 0.1]], vec![0.3, -0.2]).unwrap();
        let m = GpModel::condition(data, hp).unwrap();
        let x = [0.9, 0.8];
        // At the prior, observing f(x) says nothing about ∂f(x) (zero covariance).
        for r in [Reduction::Dvr, Reduction::Dig, Reduction::DAbVr, Reduction::DSqVr, Reduction::DSqIg] {
            assert!(acq_local(r, &m, &x).unwrap() < 1e-12, "{r:?}");
        }
        let nodes = vec![vec![0.9, 0.8], vec![0.2, 0.7]];
        assert!(acq_global(Reduction::Dvr, &m, &[0.95, 0.95], &nodes).unwrap() < 1e-12);
    }

    #[test]
    fn dvr_matches_closed_form() {
        let m = model_2d(8, 10);
        for x in random_points(9, 30, 2) {
            let post = m.posterior_deriv(&x).unwrap();
            let denom = m.posterior_f(&x).unwrap().var + m.effective_noise();
            let closed: f64 = post.cross.iter().map(|c| c * c / denom).sum();
            assert_relative_eq!(acq_dvr(&m, &x).unwrap(), closed, max_relative = 1e-9, epsilon = 1e-14);
        }
    }

    #[test]
    fn dig_agrees_with_gauss_entropy() {
        let m = model_2d(10, 10);
        for x in random_points(11, 30, 2) {
            let post = m.posterior_deriv(&x).unwrap();
            let la = m.lookahead_local(&x).unwrap();
            let expect: f64 = post
                .var_d
                .iter()
                .zip(&la.var_l)
                .map(|(vd, vl)| gauss_entropy(*vd).unwrap() - gauss_entropy(*vl).unwrap())
                .sum();
            assert_relative_eq!(acq_dig(&m, &x).unwrap(), expect, max_relative = 1e-9, epsilon = 1e-12);
        }
    }

    #[test]
    fn dig_invariant_to_output_scale() {
        let base = model_2d(12, 10);
        let hp = base.hyperparams().clone();
        let c = 7.5;
        let y: Vec<f64> = base.data().outputs().iter().map(|v| c * (v - hp.mean_const) + hp.mean_const).collect();
        let hp2 = Hyperparams::new(hp.lengthscales.clone(), hp.outputscale * c * c, hp.noise_var * c * c, hp.mean_const).unwrap();
        let scaled = GpModel::condition(Dataset::new(base.data().inputs().to_vec(), y).unwrap(), hp2).unwrap();
        for x in random_points(13, 50, 2) {
            let a = acq_dig(&base, &x).unwrap();
            let b = acq_dig(&scaled, &x).unwrap();
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_mean_reductions() {
        // Outputs equal to the mean constant give a zero mean gradient but
        // nonzero look-ahead reductions.
        let hp = Hyperparams::new(vec![0.4; 3], 1.0, 1e-3, 0.5).unwrap();
        let xs = random_points(20, 6, 3);
        let m = GpModel::condition(Dataset::new(xs, vec![0.5; 6]).unwrap(), hp).unwrap();
        let x = [0.2, 0.5, 0.8];
        let post = m.posterior_deriv(&x).unwrap();
        let la = m.lookahead_local(&x).unwrap();
        assert!(post.mu_d.iter().all(|v| *v == 0.0));
        assert!(post.var_d.iter().zip(&la.var_l).all(|(vd, vl)| vd - vl > 1e-3));
        let mut dabvr = 0.0;
        let mut dsqvr = 0.0;
        let mut dsqig = 0.0;
        for (vd, vl) in post.var_d.iter().zip(&la.var_l) {
            dabvr += (1.0 - 2.0 / std::f64::consts::PI) * (vd - vl);
            dsqvr += 2.0 * (vd * vd - vl * vl);
            dsqig += (vd / vl).ln();
        }
        assert_relative_eq!(acq_dabvr(&m, &x).unwrap(), dabvr, max_relative = 1e-12);
        assert_relative_eq!(acq_dsqvr(&m, &x).unwrap(), dsqvr, max_relative = 1e-12);
        assert_relative_eq!(acq_dsqig(&m, &x).unwrap(), dsqig, max_relative = 1e-12);
    }

    #[test]
    fn dsqvr_componentwise_identity() {
        let m = model_2d(14, 12);
        for x in random_points(15, 30, 2) {
            let post = m.posterior_deriv(&x).unwrap();
            let la = m.lookahead_local(&x).unwrap();
            let expect: f64 = (0..2)
                .map(|i| {
                    ncx2_var(GaussParams { mu: post.mu_d[i], sigma: post.var_d[i].sqrt() })
                        - ncx2_var(GaussParams { mu: post.mu_d[i], sigma: la.var_l[i].sqrt() })
                })
                .sum();
            assert_relative_eq!(acq_dsqvr(&m, &x).unwrap(), expect, max_relative = 1e-9, epsilon = 1e-12);
        }
    }

    #[test]
    fn global_with_single_node_at_star_equals_local() {
        let m = model_2d(16, 10);
        for x in random_points(17, 20, 2) {
            for r in [Reduction::Dvr, Reduction::Dig, Reduction::DAbVr, Reduction::DSqVr, Reduction::DSqIg] {
                let g = acq_global(r, &m, &x, &[x.clone()]).unwrap();
                let l = acq_local(r, &m, &x).unwrap();
                assert_relative_eq!(g, l, max_relative = 1e-12, epsilon = 1e-15);
            }
        }
        assert!(acq_global(Reduction::Dvr, &m, &[0.5, 0.5], &[]).is_err());
    }

    #[test]
    fn global_far_from_nodes_is_negligible() {
        let hp = Hyperparams::new(vec![0.05, 0.05], 1.0, 1e-4, 0.0).unwrap();
        let data = Dataset::new(vec![vec![0.5, 0.5], vec![0.55, 0.5]], vec![0.0, 1.0]).unwrap();
        let m = GpModel::condition(data, hp).unwrap();
        let nodes = vec![vec![0.1, 0.1], vec![0.5, 0.5], vec![0.2, 0.9]];
        assert!(acq_global(Reduction::Dvr, &m, &[0.95, 0.95], &nodes).unwrap() < 1e-10);
    }

    #[test]
    fn acquisitions_are_deterministic() {
        let m = model_2d(18, 10);
        let nodes = random_points(19, 8, 2);
        let x = [0.31, 0.77];
        for k in AcquisitionKind::all().into_iter().filter(|k| *k != AcquisitionKind::Qr) {
            let a = Acquisition::new(k, &m, Some(&nodes)).unwrap();
            assert_eq!(a.evaluate(&x).unwrap().to_bits(), a.evaluate(&x).unwrap().to_bits());
        }
        assert!(Acquisition::new(AcquisitionKind::Qr, &m, None).is_err());
        let g = AcquisitionKind::Global { reduction: Reduction::Dvr, nodes: 8 };
        assert!(Acquisition::new(g, &m, None).is_err());
    }
}
