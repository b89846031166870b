//! DGSM estimation.
//!
//! For each input `i` the three measures are unit-cube averages of
//! `∂f/∂uᵢ`, `|∂f/∂uᵢ|` and `(∂f/∂uᵢ)²`. The surrogate estimate plugs in the
//! posterior mean gradient; ground truth uses the benchmark's own gradient.
//! Both are in normalized coordinates unless rescaled explicitly.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::GpModel;
use crate::problems::{BenchProblem, Catalog};
use crate::qmc::SobolStream;

/// Node count for surrogate estimates.
pub const DEFAULT_ESTIMATE_NODES: usize = 4096;
/// Node count for ground truth.
pub const DEFAULT_TRUTH_NODES: usize = 1 << 16;
/// Scramble seed of the ground-truth node set.
pub const TRUTH_SEED: u64 = 0x5EED_D65A;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgsmEstimate {
    pub raw: Vec<f64>,
    pub abs: Vec<f64>,
    pub sq: Vec<f64>,
    pub nodes_used: usize,
}

impl DgsmEstimate {
    /// Averages the three gradient transforms over rows of `grads`.
    pub fn from_gradients(grads: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = grads.first() else {
            return Err(Error::invalid("DGSM needs at least one node"));
        };
        let d = first.len();
        let mut raw = vec![0.0; d];
        let mut abs = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for g in grads {
            for i in 0..d {
                raw[i] += g[i];
                abs[i] += g[i].abs();
                sq[i] += g[i] * g[i];
            }
        }
        let n = grads.len() as f64;
        for v in raw.iter_mut().chain(abs.iter_mut()).chain(sq.iter_mut()) {
            *v /= n;
        }
        Ok(DgsmEstimate {
            raw,
            abs,
            sq,
            nodes_used: grads.len(),
        })
    }

    pub fn dim(&self) -> usize {
        self.raw.len()
    }

    /// Converts to the problem's original units, where `∂f/∂xᵢ = (∂f/∂uᵢ)/wᵢ`.
    pub fn rescaled(&self, widths: &[f64]) -> Result<Self> {
        if widths.len() != self.dim() {
            return Err(Error::invalid(format!(
                "{} widths for a {}-dimensional estimate",
                widths.len(),
                self.dim()
            )));
        }
        let scale = |v: &[f64], p: i32| v.iter().zip(widths).map(|(a, w)| a / w.powi(p)).collect();
        Ok(DgsmEstimate {
            raw: scale(&self.raw, 1),
            abs: scale(&self.abs, 1),
            sq: scale(&self.sq, 2),
            nodes_used: self.nodes_used,
        })
    }

    /// Checks `abs ≥ |raw|` and `sq ≥ raw²` up to rounding.
    pub fn satisfies_jensen(&self) -> bool {
        (0..self.dim()).all(|i| {
            let (r, a, s) = (self.raw[i], self.abs[i], self.sq[i]);
            a >= 0.0
                && s >= 0.0
                && a >= r.abs() * (1.0 - 1e-12)
                && s >= r * r * (1.0 - 1e-12)
        })
    }
}

fn check_nodes(m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::invalid("DGSM needs at least one node"));
    }
    Ok(())
}

/// Plug-in estimate from the posterior mean gradient at the next `m`
/// points of `stream`.
pub fn estimate_dgsm(model: &GpModel, m: usize, stream: &mut SobolStream) -> Result<DgsmEstimate> {
    check_nodes(m)?;
    if stream.dim() != model.dim() {
        return Err(Error::invalid(format!(
            "stream dimension {} does not match model dimension {}",
            stream.dim(),
            model.dim()
        )));
    }
    let nodes = stream.sobol_next(m)?;
    let grads = nodes
        .par_iter()
        .map(|u| model.mean_gradient(u))
        .collect::<Result<Vec<_>>>()?;
    DgsmEstimate::from_gradients(&grads)
}

/// QMC ground truth from the problem's gradient at `m` scrambled Sobol
/// nodes (seed [`TRUTH_SEED`]).
///
/// Component `i` at each node is paired with the same component at the
/// node reflected as `uᵢ ↦ 1 - uᵢ`. The reflected set is equally uniform,
/// so the estimator is unchanged in expectation, and a derivative that is
/// odd in its own input cancels to rounding error instead of QMC error.
pub fn ground_truth_dgsm(problem: &BenchProblem, m: usize) -> Result<DgsmEstimate> {
    check_nodes(m)?;
    let d = problem.dim();
    let nodes = SobolStream::scrambled(d, TRUTH_SEED)?.sobol_next(m)?;
    let pairs: Vec<[Vec<f64>; 2]> = nodes
        .par_iter()
        .map(|u| {
            let g = problem.grad_normalized(u);
            let mut probe = u.clone();
            let reflected = (0..d)
                .map(|i| {
                    probe[i] = 1.0 - u[i];
                    let gi = problem.grad_normalized(&probe)[i];
                    probe[i] = u[i];
                    gi
                })
                .collect();
            [g, reflected]
        })
        .collect();
    let grads: Vec<Vec<f64>> = pairs.into_iter().flatten().collect();
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NumericalFailure(format!("{}: non-finite gradient", problem.name)));
    }
    let mut est = DgsmEstimate::from_gradients(&grads)?;
    est.nodes_used = m;
    Ok(est)
}

/// Cached ground truth with the metadata needed to validate it on reload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub problem: BenchProblem,
    pub nodes: usize,
    pub generator: String,
    pub scramble_seed: u64,
    pub catalog_version: u32,
    pub dgsm: DgsmEstimate,
}

const GENERATOR: &str = "sobol-joe-kuo-6.21201-owen";

impl GroundTruthRecord {
    pub fn compute(problem: &BenchProblem, m: usize) -> Result<Self> {
        Ok(GroundTruthRecord {
            problem: problem.clone(),
            nodes: m,
            generator: GENERATOR.to_string(),
            scramble_seed: TRUTH_SEED,
            catalog_version: Catalog::builtin().version,
            dgsm: ground_truth_dgsm(problem, m)?,
        })
    }

    fn matches(&self, problem: &BenchProblem, m: usize) -> bool {
        self.problem == *problem
            && self.nodes == m
            && self.generator == GENERATOR
            && self.scramble_seed == TRUTH_SEED
            && self.catalog_version == Catalog::builtin().version
    }
}

/// Directory of ground-truth JSON documents, one per `(problem, M)`.
#[derive(Debug, Clone)]
pub struct GroundTruthCache {
    dir: PathBuf,
}

impl GroundTruthCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        GroundTruthCache { dir: dir.into() }
    }

    pub fn path_for(&self, problem: &BenchProblem, m: usize) -> PathBuf {
        self.dir.join(format!("{}-{m}.json", problem.name))
    }

    /// Returns the cached record if it is valid for this problem, otherwise
    /// computes and stores it.
    pub fn get(&self, problem: &BenchProblem, m: usize) -> Result<GroundTruthRecord> {
        let path = self.path_for(problem, m);
        if let Ok(text) = fs::read_to_string(&path) {
            match serde_json::from_str::<GroundTruthRecord>(&text) {
                Ok(rec) if rec.matches(problem, m) => return Ok(rec),
                Ok(_) => log::warn!("stale ground truth at {}; recomputing", path.display()),
                Err(e) => log::warn!("unreadable ground truth at {}: {e}; recomputing", path.display()),
            }
        }
        let rec = GroundTruthRecord::compute(problem, m)?;
        write_json_atomic(&path, &rec)?;
        Ok(rec)
    }
}

/// Writes pretty JSON to a sibling temp file and renames it into place.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
