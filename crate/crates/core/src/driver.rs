//! The active-learning loop, acquisition optimization, metrics and the
//! replicated experiment harness.
//!
//! Each replicate draws uniform random initial inputs, then repeatedly fits
//! the GP, maximizes the acquisition, observes the benchmark and appends
//! the result. DGSM metrics are computed after every fit.
//!
//! Output layout of [`run_experiment`] with an output directory:
//!
//! ```text
//! out_dir/config.json       the resolved ExperimentConfig
//! out_dir/records.csv       one row per (replicate, iteration)
//! out_dir/summary.json      per-iteration mean ± 2 SE of every metric
//! out_dir/groundtruth.json  the ground-truth DGSMs used for the metrics
//! ```
//!
//! `records.csv` columns are `replicate, iteration, x_0..x_{d-1}, y,
//! rmse_raw, rmse_abs, rmse_sq, ndcg_abs, ndcg_sq, wall_time_ms`. Iteration
//! 0 holds the metrics after initialization and leaves `x_*` and `y` empty.

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{Acquisition, AcquisitionKind};
use crate::dgsm::{
    estimate_dgsm, write_json_atomic, DgsmEstimate, GroundTruthCache, GroundTruthRecord,
    DEFAULT_ESTIMATE_NODES, DEFAULT_TRUTH_NODES,
};
use crate::error::{Error, Result};
use crate::gp::{Dataset, FitOptions, GpModel, HyperPrior};
use crate::kernel::Hyperparams;
use crate::optim::{fd_gradient, maximize_box, SpgOptions};
use crate::problems::{make_problem, BenchProblem};
use crate::qmc::{mix64, SobolStream};

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

/// Multi-start settings for the acquisition optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSettings {
    /// Scrambled Sobol candidates scored before refinement.
    pub candidates: usize,
    /// Best candidates refined by local ascent.
    pub refine: usize,
    pub max_iter: usize,
    /// Finite-difference step for the refinement gradient.
    pub fd_step: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            candidates: 512,
            refine: 8,
            max_iter: 50,
            fd_step: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitSettings {
    pub n_starts: usize,
    pub max_iter: usize,
    pub prior: HyperPrior,
}

impl Default for FitSettings {
    fn default() -> Self {
        let f = FitOptions::default();
        FitSettings {
            n_starts: f.n_starts,
            max_iter: f.max_iter,
            prior: f.prior,
        }
    }
}

impl FitSettings {
    fn options(&self) -> FitOptions {
        FitOptions {
            n_starts: self.n_starts,
            max_iter: self.max_iter,
            prior: self.prior,
            ..FitOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub problem: String,
    pub acquisition: AcquisitionKind,
    pub init_points: usize,
    /// Total evaluations including the initial design.
    pub budget: usize,
    pub replicates: usize,
    pub seed: u64,
    /// Nodes for the surrogate DGSM estimate.
    pub dgsm_nodes: usize,
    /// Nodes for the ground-truth DGSMs.
    pub truth_nodes: usize,
    pub noise_sd: f64,
    pub optimizer: OptimizerSettings,
    pub fit: FitSettings,
    /// When false, `wall_time_ms` is written as 0 so that records are
    /// byte-identical across runs.
    pub record_wall_time: bool,
    pub out_dir: Option<PathBuf>,
    /// Ground-truth cache directory; computed in memory when absent.
    pub cache_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            problem: "ishigami1".into(),
            acquisition: AcquisitionKind::Qr,
            init_points: 5,
            budget: 35,
            replicates: 50,
            seed: 0,
            dgsm_nodes: DEFAULT_ESTIMATE_NODES,
            truth_nodes: DEFAULT_TRUTH_NODES,
            noise_sd: 0.0,
            optimizer: OptimizerSettings::default(),
            fit: FitSettings::default(),
            record_wall_time: false,
            out_dir: None,
            cache_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if self.init_points < 2 {
            return fail(format!("init_points must be >= 2, got {}", self.init_points));
        }
        if self.budget < self.init_points {
            return fail(format!(
                "budget {} is smaller than init_points {}",
                self.budget, self.init_points
            ));
        }
        if self.replicates == 0 {
            return fail("replicates must be >= 1".into());
        }
        if self.dgsm_nodes == 0 || self.truth_nodes == 0 {
            return fail("DGSM node counts must be >= 1".into());
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return fail(format!("noise_sd must be >= 0, got {}", self.noise_sd));
        }
        let o = &self.optimizer;
        if o.candidates == 0 || o.refine == 0 || !(o.fd_step > 0.0) {
            return fail("optimizer needs candidates >= 1, refine >= 1 and fd_step > 0".into());
        }
        if self.fit.n_starts == 0 {
            return fail("fit needs at least one start".into());
        }
        if self.acquisition.global_nodes() == Some(0) {
            return fail("global acquisitions need at least one node".into());
        }
        Ok(())
    }

    pub fn iterations(&self) -> usize {
        self.budget - self.init_points
    }

    pub fn resolve_problem(&self) -> Result<BenchProblem> {
        make_problem(&self.problem)?.with_noise(self.noise_sd)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub replicate: usize,
    pub iteration: usize,
    /// Empty at iteration 0.
    pub x_selected: Vec<f64>,
    pub y_observed: Option<f64>,
    pub rmse_raw: f64,
    pub rmse_abs: f64,
    pub rmse_sq: f64,
    pub ndcg_abs: f64,
    pub ndcg_sq: f64,
    pub fit_hyperparams: Hyperparams,
    /// The fit failed and the previous hyperparameters were reused.
    pub fit_failed: bool,
    pub wall_time_ms: u64,
}

#[derive(Debug, Clone)]
pub struct ReplicateResult {
    pub records: Vec<IterationRecord>,
    pub observe_calls: usize,
    pub estimate: DgsmEstimate,
}

/// Seed for an independent sub-stream of `base`.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    mix64(base ^ mix64(tag.wrapping_add(0x9E37_79B9_7F4A_7C15)))
}

const TAG_INIT: u64 = 1;
const TAG_NOISE: u64 = 2;
const TAG_QR: u64 = 3;
const TAG_ESTIMATE: u64 = 4;
const TAG_FIT: u64 = 1 << 20;
const TAG_ACQ: u64 = 2 << 20;
const TAG_NODES: u64 = 3 << 20;

/// `√(mean((estimateᵢ - truthᵢ)²))`.
pub fn rmse(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(estimate, truth)?;
    let ss: f64 = estimate.iter().zip(truth).map(|(e, t)| (e - t).powi(2)).sum();
    Ok((ss / truth.len() as f64).sqrt())
}

/// Normalized discounted cumulative gain of the ordering induced by
/// `estimate` (descending, ties by index), with `truth` as the gains.
/// Returns 1 when every ordering is ideal.
pub fn ndcg(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(estimate, truth)?;
    let dcg = |order: &[usize]| -> f64 {
        order
            .iter()
            .enumerate()
            .map(|(j, &i)| truth[i] / ((j + 2) as f64).log2())
            .sum()
    };
    let ranked = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
        idx
    };
    let ideal = dcg(&ranked(truth));
    if ideal <= 0.0 {
        return Ok(1.0);
    }
    Ok((dcg(&ranked(estimate)) / ideal).clamp(0.0, 1.0))
}

fn check_pair(estimate: &[f64], truth: &[f64]) -> Result<()> {
    if estimate.len() != truth.len() || truth.is_empty() {
        return Err(Error::invalid(format!(
            "metric needs equal nonempty vectors, got {} and {}",
            estimate.len(),
            truth.len()
        )));
    }
    Ok(())
}

/// Maximizes the acquisition over the unit cube: scores
/// `settings.candidates` scrambled Sobol points, refines the best
/// `settings.refine` by projected gradient ascent with finite-difference
/// gradients, and returns the best point with its value.
///
/// `nodes` are the reference nodes of a global acquisition.
pub fn optimize_acquisition(
    model: &GpModel,
    kind: AcquisitionKind,
    seed: u64,
    settings: &OptimizerSettings,
    nodes: Option<&[Vec<f64>]>,
) -> Result<(Vec<f64>, f64)> {
    let acq = Acquisition::new(kind, model, nodes)?;
    let d = model.dim();
    let candidates = SobolStream::scrambled(d, seed)?.sobol_next(settings.candidates)?;
    let scores: Vec<f64> = candidates
        .par_iter()
        .map(|x| acq.evaluate(x).ok().filter(|v| v.is_finite()).unwrap_or(f64::NEG_INFINITY))
        .collect();
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| scores[i].is_finite()).collect();
    if order.is_empty() {
        return Err(Error::OptimizerFailure(format!(
            "{kind}: acquisition non-finite at all {} candidates",
            settings.candidates
        )));
    }
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(settings.refine);

    let lo = vec![0.0; d];
    let hi = vec![1.0; d];
    let spg = SpgOptions {
        max_iter: settings.max_iter,
        tol: 1e-9,
        ..SpgOptions::default()
    };
    let refined: Vec<(Vec<f64>, f64)> = order
        .par_iter()
        .map(|&i| {
            let start = (candidates[i].clone(), scores[i]);
            let value = |x: &[f64]| acq.evaluate(x).ok().filter(|v| v.is_finite());
            let mut obj = |x: &[f64]| {
                let v = value(x)?;
                let mut f = |p: &[f64]| value(p).unwrap_or(v);
                Some((v, fd_gradient(&mut f, x, &lo, &hi, settings.fd_step)))
            };
            match maximize_box(&mut obj, &start.0, &lo, &hi, &spg) {
                Some(r) if r.value > start.1 => (r.x, r.value),
                _ => start,
            }
        })
        .collect();
    // Strict comparison keeps the earliest (best-ranked) start on ties.
    let best = refined
        .into_iter()
        .reduce(|a, b| if b.1 > a.1 { b } else { a })
        .expect("at least one refined start");
    Ok((best.0.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(), best.1))
}

struct Fitted {
    model: GpModel,
    failed: bool,
}

fn fit_model(data: &Dataset, seed: u64, opts: &FitOptions, previous: Option<&Hyperparams>) -> Result<Fitted> {
    match GpModel::fit_with(data.clone(), seed, opts, previous) {
        Ok(model) => Ok(Fitted { model, failed: false }),
        Err(e) => {
            let Some(hp) = previous else { return Err(e) };
            log::warn!("hyperparameter fit failed ({e}); reusing previous hyperparameters");
            Ok(Fitted {
                model: GpModel::condition(data.clone(), hp.clone())?,
                failed: true,
            })
        }
    }
}

/// One replicate of the active-learning loop.
pub fn run_loop(
    config: &ExperimentConfig,
    problem: &BenchProblem,
    truth: &DgsmEstimate,
    replicate: usize,
    replicate_seed: u64,
) -> Result<ReplicateResult> {
    config.validate()?;
    let d = problem.dim();
    if truth.dim() != d {
        return Err(Error::invalid("ground truth dimension does not match the problem"));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(replicate_seed, TAG_INIT));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(replicate_seed, TAG_NOISE));
    let mut qr = SobolStream::scrambled(d, derive_seed(replicate_seed, TAG_QR))?;
    let estimate_seed = derive_seed(replicate_seed, TAG_ESTIMATE);
    let fit_opts = config.fit.options();
    let mut observe_calls = 0;

    let mut data = Dataset::empty(d);
    for _ in 0..config.init_points {
        let x: Vec<f64> = (0..d).map(|_| init_rng.gen::<f64>()).collect();
        let y = problem.observe(&x, &mut noise_rng)?;
        observe_calls += 1;
        data.push(x, y)?;
    }

    let metrics = |model: &GpModel| -> Result<(DgsmEstimate, [f64; 5])> {
        let mut stream = SobolStream::scrambled(d, estimate_seed)?;
        let est = estimate_dgsm(model, config.dgsm_nodes, &mut stream)?;
        let m = [
            rmse(&est.raw, &truth.raw)?,
            rmse(&est.abs, &truth.abs)?,
            rmse(&est.sq, &truth.sq)?,
            ndcg(&est.abs, &truth.abs)?,
            ndcg(&est.sq, &truth.sq)?,
        ];
        Ok((est, m))
    };
    let record = |iteration: usize, x: Vec<f64>, y: Option<f64>, fitted: &Fitted, m: [f64; 5], ms: u64| IterationRecord {
        replicate,
        iteration,
        x_selected: x,
        y_observed: y,
        rmse_raw: m[0],
        rmse_abs: m[1],
        rmse_sq: m[2],
        ndcg_abs: m[3],
        ndcg_sq: m[4],
        fit_hyperparams: fitted.model.hyperparams().clone(),
        fit_failed: fitted.failed,
        wall_time_ms: if config.record_wall_time { ms } else { 0 },
    };

    let start = Instant::now();
    let mut fitted = fit_model(&data, derive_seed(replicate_seed, TAG_FIT), &fit_opts, None)?;
    let (mut estimate, m) = metrics(&fitted.model)?;
    let mut records = vec![record(0, Vec::new(), None, &fitted, m, start.elapsed().as_millis() as u64)];

    for it in 1..=config.iterations() {
        let start = Instant::now();
        let it64 = it as u64;
        let x = match config.acquisition {
            AcquisitionKind::Qr => qr.next_point(),
            kind => {
                let nodes = match kind.global_nodes() {
                    Some(m) => Some(SobolStream::scrambled(d, derive_seed(replicate_seed, TAG_NODES + it64))?.sobol_next(m)?),
                    None => None,
                };
                let seed = derive_seed(replicate_seed, TAG_ACQ + it64);
                optimize_acquisition(&fitted.model, kind, seed, &config.optimizer, nodes.as_deref())?.0
            }
        };
        let y = problem.observe(&x, &mut noise_rng)?;
        observe_calls += 1;
        data.push(x.clone(), y)?;
        let previous = fitted.model.hyperparams().clone();
        fitted = fit_model(&data, derive_seed(replicate_seed, TAG_FIT + it64), &fit_opts, Some(&previous))?;
        let (est, m) = metrics(&fitted.model)?;
        estimate = est;
        records.push(record(it, x, Some(y), &fitted, m, start.elapsed().as_millis() as u64));
    }

    Ok(ReplicateResult {
        records,
        observe_calls,
        estimate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub mean: f64,
    /// Standard error of the mean; null with fewer than two replicates.
    pub se: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub median: f64,
}

impl MetricStats {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let se = (values.len() > 1).then(|| {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        });
        MetricStats {
            mean,
            se,
            lower: se.map(|s| mean - 2.0 * s),
            upper: se.map(|s| mean + 2.0 * s),
            median: median(values),
        }
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: usize,
    pub replicates: usize,
    pub rmse_raw: MetricStats,
    pub rmse_abs: MetricStats,
    pub rmse_sq: MetricStats,
    pub ndcg_abs: MetricStats,
    pub ndcg_sq: MetricStats,
    pub wall_time_ms: MetricStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub schema_version: u32,
    pub problem: String,
    pub acquisition: AcquisitionKind,
    pub replicates: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub failures: Vec<ReplicateFailure>,
    pub fit_failures: usize,
    pub iterations: Vec<IterationSummary>,
}

/// Aggregates records by iteration.
pub fn summarize(config: &ExperimentConfig, records: &[IterationRecord], failures: Vec<ReplicateFailure>) -> ExperimentSummary {
    let n_iter = records.iter().map(|r| r.iteration + 1).max().unwrap_or(0);
    let iterations = (0..n_iter)
        .map(|it| {
            let rows: Vec<&IterationRecord> = records.iter().filter(|r| r.iteration == it).collect();
            let stat = |f: fn(&IterationRecord) -> f64| {
                MetricStats::from_values(&rows.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            IterationSummary {
                iteration: it,
                replicates: rows.len(),
                rmse_raw: stat(|r| r.rmse_raw),
                rmse_abs: stat(|r| r.rmse_abs),
                rmse_sq: stat(|r| r.rmse_sq),
                ndcg_abs: stat(|r| r.ndcg_abs),
                ndcg_sq: stat(|r| r.ndcg_sq),
                wall_time_ms: stat(|r| r.wall_time_ms as f64),
            }
        })
        .collect();
    ExperimentSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        problem: config.problem.clone(),
        acquisition: config.acquisition,
        replicates: config.replicates,
        succeeded: config.replicates - failures.len(),
        failed: failures.len(),
        failures,
        fit_failures: records.iter().filter(|r| r.fit_failed).count(),
        iterations,
    }
}

/// Fixed CSV header for a `d`-dimensional problem.
pub fn csv_header(d: usize) -> Vec<String> {
    let mut h = vec!["replicate".to_string(), "iteration".to_string()];
    h.extend((0..d).map(|i| format!("x_{i}")));
    for c in ["y", "rmse_raw", "rmse_abs", "rmse_sq", "ndcg_abs", "ndcg_sq", "wall_time_ms"] {
        h.push(c.to_string());
    }
    h
}

/// Serializes records in the fixed column layout.
pub fn write_records_csv<W: std::io::Write>(out: W, d: usize, records: &[IterationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(csv_header(d))?;
    for r in records {
        let mut row = vec![r.replicate.to_string(), r.iteration.to_string()];
        if r.x_selected.is_empty() {
            row.extend(std::iter::repeat(String::new()).take(d));
        } else {
            row.extend(r.x_selected.iter().map(|v| v.to_string()));
        }
        row.push(r.y_observed.map(|v| v.to_string()).unwrap_or_default());
        for v in [r.rmse_raw, r.rmse_abs, r.rmse_sq, r.ndcg_abs, r.ndcg_sq] {
            row.push(v.to_string());
        }
        row.push(r.wall_time_ms.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("records.csv", e))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub summary: ExperimentSummary,
    pub records: Vec<IterationRecord>,
    /// `observe` calls per successful replicate.
    pub observe_calls: Vec<usize>,
    pub truth: GroundTruthRecord,
}

/// Ground truth for the configured problem, through the cache when one is
/// configured.
pub fn ground_truth(config: &ExperimentConfig, problem: &BenchProblem) -> Result<GroundTruthRecord> {
    // Noise does not affect the gradient, so truth is keyed on the noiseless problem.
    let clean = problem.clone().with_noise(0.0)?;
    match &config.cache_dir {
        Some(dir) => GroundTruthCache::new(dir).get(&clean, config.truth_nodes),
        None => GroundTruthRecord::compute(&clean, config.truth_nodes),
    }
}

/// Runs every replicate (in parallel) and writes outputs when
/// `config.out_dir` is set. Fails only if every replicate fails.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let problem = config.resolve_problem()?;
    let truth = ground_truth(config, &problem)?;

    let outcomes: Vec<Result<ReplicateResult>> = (0..config.replicates)
        .into_par_iter()
        .map(|r| run_loop(config, &problem, &truth.dgsm, r, derive_seed(config.seed, r as u64)))
        .collect();

    let mut records = Vec::new();
    let mut observe_calls = Vec::new();
    let mut failures = Vec::new();
    for (r, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(res) => {
                observe_calls.push(res.observe_calls);
                records.extend(res.records);
            }
            Err(e) => {
                log::error!("replicate {r} failed: {e}");
                failures.push(ReplicateFailure {
                    replicate: r,
                    error: e.to_string(),
                });
            }
        }
    }
    if failures.len() == config.replicates {
        return Err(Error::NumericalFailure(format!(
            "all {} replicates failed; first error: {}",
            config.replicates, failures[0].error
        )));
    }
    let summary = summarize(config, &records, failures);

    if let Some(dir) = &config.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json_atomic(&dir.join("config.json"), config)?;
        write_json_atomic(&dir.join("groundtruth.json"), &truth)?;
        let path = dir.join("records.csv");
        let tmp = dir.join("records.csv.tmp");
        let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        write_records_csv(std::io::BufWriter::new(file), problem.dim(), &records)?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        write_json_atomic(&dir.join("summary.json"), &summary)?;
    }

    Ok(ExperimentResult {
        summary,
        records,
        observe_calls,
        truth,
    })
}
