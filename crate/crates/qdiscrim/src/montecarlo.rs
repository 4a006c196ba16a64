//! Discrimination-trial orchestration: Qe(t) estimation by posterior
//! averaging and by error counting, first-passage times against the error
//! threshold, and wall-clock benchmarking of the two estimators.

use std::time::Instant;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::inference::{
    conditional_error, decide, posteriors, Decision, Hypothesis, HypothesisPair, PosteriorPair,
};
use crate::qmath::DensityState;
use crate::trajectory::{LoglikMode, Propagator, SimGrid, TrajectoryError};

/// Trials processed per parallel batch before the sequential fold.
const BATCH: usize = 128;

#[derive(Debug, Error)]
pub enum MonteCarloError {
    #[error("trial {index}: {source}")]
    Trial {
        index: usize,
        source: TrajectoryError,
    },
    #[error("beta = {0} outside (0, 1)")]
    BetaRange(f64),
    #[error("posterior estimator requires from_prior truth sampling")]
    FixedTruthForPosterior,
    #[error("no trials sampled under {0}; the counting estimate is undefined at that truth")]
    NoTrialsUnderTruth(Hypothesis),
    #[error("counting estimator needs at least 2 trials, got {0}")]
    TooFewTrials(usize),
    #[error("path length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty n_list for bench")]
    EmptyNList,
}

/// Which Qe estimator a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Posterior,
    Counting,
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Estimator::Posterior => write!(f, "posterior"),
            Estimator::Counting => write!(f, "counting"),
        }
    }
}

/// How the true hypothesis is drawn for each trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthSampling {
    FromPrior,
    FixedH0,
    FixedH1,
}

/// Full configuration of a discrimination experiment.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub pair: HypothesisPair,
    pub grid: SimGrid,
    pub rho0: DensityState,
    pub beta: f64,
    pub n_trials: usize,
    pub base_seed: u64,
    pub estimator: Estimator,
    pub truth_sampling: TruthSampling,
    pub loglik_mode: LoglikMode,
    /// Worker threads for trial parallelism; 0 means the rayon default.
    pub workers: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), MonteCarloError> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(MonteCarloError::BetaRange(self.beta));
        }
        Ok(())
    }
}

/// Everything recorded along one discrimination trial.
#[derive(Debug, Clone)]
pub struct TrialResult {
    pub true_hypothesis: Hypothesis,
    pub decision_path: Vec<Decision>,
    pub posterior_path: Vec<PosteriorPair>,
    pub conditional_error_path: Vec<f64>,
    pub loglik0_path: Vec<f64>,
    pub loglik1_path: Vec<f64>,
    pub bloch0_path: Vec<(f64, f64, f64)>,
    pub bloch1_path: Vec<(f64, f64, f64)>,
    pub final_decision: Decision,
    pub stop_time: Option<f64>,
    pub repair_count: u64,
}

/// Time-indexed average-error-probability estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct QeCurve {
    pub times: Vec<f64>,
    pub qe: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n_trials: usize,
    pub estimator: Estimator,
}

/// Final-time error tallies for the counting estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ErrorCounts {
    pub n_10: usize,
    pub n_01: usize,
    pub n_trials_0: usize,
    pub n_trials_1: usize,
}

/// One measured bench configuration.
#[derive(Debug, Clone, Copy)]
pub struct BenchRow {
    pub n_trials: usize,
    pub estimator: Estimator,
    pub first_passage_time: Option<f64>,
    pub wall_clock_seconds: f64,
    pub seed: u64,
}

/// Rows of wall-clock measurements, one per (N, estimator).
#[derive(Debug, Clone)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
}

fn trial_rng(base_seed: u64, trial_index: usize) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(base_seed);
    rng.set_stream(trial_index as u64);
    rng
}

fn sample_truth(cfg: &ExperimentConfig, rng: &mut ChaCha12Rng) -> Hypothesis {
    match cfg.truth_sampling {
        TruthSampling::FixedH0 => Hypothesis::H0,
        TruthSampling::FixedH1 => Hypothesis::H1,
        TruthSampling::FromPrior => {
            let u: f64 = rng.gen();
            if u < cfg.pair.prior0() {
                Hypothesis::H0
            } else {
                Hypothesis::H1
            }
        }
    }
}

fn bloch_of(mat: &DMatrix<Complex64>) -> (f64, f64, f64) {
    let x = (mat[(0, 1)] + mat[(1, 0)]).re;
    let y = (Complex64::i() * (mat[(0, 1)] - mat[(1, 0)])).re;
    let z = (mat[(0, 0)] - mat[(1, 1)]).re;
    (x, y, z)
}

/// Run one discrimination trial: simulate a record under the sampled truth,
/// run both likelihood filters on it, and record posteriors, decisions and
/// conditional errors at every grid point. Deterministic in
/// (base_seed, trial_index).
pub fn run_trial(cfg: &ExperimentConfig, trial_index: usize) -> Result<TrialResult, MonteCarloError> {
    cfg.validate()?;
    let mut rng = trial_rng(cfg.base_seed, trial_index);
    let truth = sample_truth(cfg, &mut rng);
    let true_model = match truth {
        Hypothesis::H0 => &cfg.pair.model0,
        Hypothesis::H1 => &cfg.pair.model1,
    };

    let n = cfg.grid.n_steps();
    let dt = cfg.grid.dt;
    let wrap = |source| MonteCarloError::Trial {
        index: trial_index,
        source,
    };

    let mut truth_prop = Propagator::new(true_model);
    let mut f0 = Propagator::new(&cfg.pair.model0);
    let mut f1 = Propagator::new(&cfg.pair.model1);
    let mut truth_mat = cfg.rho0.op.matrix().clone();
    let mut mat0 = cfg.rho0.op.matrix().clone();
    let mut mat1 = cfg.rho0.op.matrix().clone();
    let (eta0, eta1) = (cfg.pair.model0.eta(), cfg.pair.model1.eta());
    let (se0, se1) = (eta0.sqrt(), eta1.sqrt());
    let (mut l0, mut l1) = (0.0f64, 0.0f64);

    let mut posterior_path = Vec::with_capacity(n + 1);
    let mut decision_path = Vec::with_capacity(n + 1);
    let mut cond_path = Vec::with_capacity(n + 1);
    let mut l0_path = Vec::with_capacity(n + 1);
    let mut l1_path = Vec::with_capacity(n + 1);
    let mut b0_path = Vec::with_capacity(n + 1);
    let mut b1_path = Vec::with_capacity(n + 1);
    let mut stop_time = None;

    let mut record_point = |l0: f64,
                            l1: f64,
                            mat0: &DMatrix<Complex64>,
                            mat1: &DMatrix<Complex64>,
                            idx: usize,
                            stop_time: &mut Option<f64>| {
        let post = posteriors(l0, l1, &cfg.pair);
        let dec = decide(l0, l1, &cfg.pair);
        let ce = conditional_error(&post);
        if stop_time.is_none() && ce <= cfg.beta {
            *stop_time = Some(cfg.grid.time(idx));
        }
        posterior_path.push(post);
        decision_path.push(dec);
        cond_path.push(ce);
        l0_path.push(l0);
        l1_path.push(l1);
        if mat0.nrows() == 2 {
            b0_path.push(bloch_of(mat0));
            b1_path.push(bloch_of(mat1));
        }
    };

    record_point(l0, l1, &mat0, &mat1, 0, &mut stop_time);

    for i in 0..n {
        let dw = {
            let g: f64 = rng.sample(rand_distr::StandardNormal);
            g * dt.sqrt()
        };
        let (_, dy) = truth_prop
            .step_generate_in_place(&mut truth_mat, dt, dw)
            .map_err(wrap)?;

        let m0 = f0.step_filter_in_place(&mut mat0, dt, dy).map_err(wrap)?;
        let m1 = f1.step_filter_in_place(&mut mat1, dt, dy).map_err(wrap)?;
        match cfg.loglik_mode {
            LoglikMode::ItoCorrected => {
                l0 += se0 * m0 * dy - 0.5 * eta0 * m0 * m0 * dt;
                l1 += se1 * m1 * dy - 0.5 * eta1 * m1 * m1 * dt;
            }
            LoglikMode::DriftOnly => {
                l0 += se0 * m0 * dy;
                l1 += se1 * m1 * dy;
            }
        }
        record_point(l0, l1, &mat0, &mat1, i + 1, &mut stop_time);
    }

    let final_decision = *decision_path.last().expect("non-empty path");
    Ok(TrialResult {
        true_hypothesis: truth,
        decision_path,
        posterior_path,
        conditional_error_path: cond_path,
        loglik0_path: l0_path,
        loglik1_path: l1_path,
        bloch0_path: b0_path,
        bloch1_path: b1_path,
        final_decision,
        stop_time,
        repair_count: truth_prop.repair_count() + f0.repair_count() + f1.repair_count(),
    })
}

fn with_pool<T: Send>(
    workers: usize,
    f: impl FnOnce() -> T + Send,
) -> T {
    if workers == 0 {
        f()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("thread pool");
        pool.install(f)
    }
}

// Runs trials in index-ordered batches; the parallel part only computes
// per-trial outputs, the fold over trials is strictly sequential so the
// result is bit-identical for any worker count.
fn map_trials<T: Send>(
    cfg: &ExperimentConfig,
    per_trial: impl Fn(usize) -> Result<T, MonteCarloError> + Sync,
    mut fold: impl FnMut(usize, T) + Send,
) -> Result<(), MonteCarloError> {
    let n = cfg.n_trials;
    with_pool(cfg.workers, || {
        let mut start = 0;
        while start < n {
            let end = (start + BATCH).min(n);
            let batch: Vec<Result<T, MonteCarloError>> =
                (start..end).into_par_iter().map(&per_trial).collect();
            for (offset, item) in batch.into_iter().enumerate() {
                fold(start + offset, item?);
            }
            start = end;
        }
        Ok(())
    })
}

/// Pointwise mean and standard error over equal-length per-trial paths,
/// folded in fixed trial order.
pub fn aggregate(
    partials: &[Vec<f64>],
    estimator: Estimator,
    grid: SimGrid,
) -> Result<QeCurve, MonteCarloError> {
    let n = partials.len();
    assert!(n > 0, "aggregate requires at least one path");
    let len = partials[0].len();
    let mut sum = vec![0.0f64; len];
    let mut sumsq = vec![0.0f64; len];
    for path in partials {
        if path.len() != len {
            return Err(MonteCarloError::LengthMismatch(path.len(), len));
        }
        for (i, &v) in path.iter().enumerate() {
            sum[i] += v;
            sumsq[i] += v * v;
        }
    }
    Ok(curve_from_sums(&sum, &sumsq, n, estimator, grid))
}

fn curve_from_sums(
    sum: &[f64],
    sumsq: &[f64],
    n: usize,
    estimator: Estimator,
    grid: SimGrid,
) -> QeCurve {
    let nf = n as f64;
    let mut qe = Vec::with_capacity(sum.len());
    let mut stderr = Vec::with_capacity(sum.len());
    let mut times = Vec::with_capacity(sum.len());
    for i in 0..sum.len() {
        times.push(grid.time(i));
        let mean = sum[i] / nf;
        qe.push(mean);
        if n > 1 {
            let var = ((sumsq[i] - sum[i] * sum[i] / nf) / (nf - 1.0)).max(0.0);
            stderr.push((var / nf).sqrt());
        } else {
            stderr.push(0.0);
        }
    }
    QeCurve {
        times,
        qe,
        stderr,
        n_trials: n,
        estimator,
    }
}

/// Qe(t) as the trial average of min(p0(t), p1(t)). Requires from_prior
/// truth sampling; valid for a single trial (stderr reported as 0).
pub fn estimate_qe_posterior(cfg: &ExperimentConfig) -> Result<QeCurve, MonteCarloError> {
    cfg.validate()?;
    if cfg.truth_sampling != TruthSampling::FromPrior {
        return Err(MonteCarloError::FixedTruthForPosterior);
    }
    let len = cfg.grid.n_steps() + 1;
    let mut sum = vec![0.0f64; len];
    let mut sumsq = vec![0.0f64; len];
    map_trials(
        cfg,
        |i| run_trial(cfg, i).map(|t| t.conditional_error_path),
        |_, path| {
            for (i, v) in path.into_iter().enumerate() {
                sum[i] += v;
                sumsq[i] += v * v;
            }
        },
    )?;
    Ok(curve_from_sums(
        &sum,
        &sumsq,
        cfg.n_trials,
        Estimator::Posterior,
        cfg.grid,
    ))
}

/// Prior-weighted Qe from a pair of per-truth error counts.
pub fn qe_from_counts(
    n_10: usize,
    n_trials_0: usize,
    n_01: usize,
    n_trials_1: usize,
    prior0: f64,
    prior1: f64,
) -> f64 {
    prior0 * n_10 as f64 / n_trials_0 as f64 + prior1 * n_01 as f64 / n_trials_1 as f64
}

/// Qe(t) from per-truth error fractions of MAP decisions (posterior > 1/2),
/// assembled with prior weights and a binomial standard error.
pub fn estimate_qe_counting(
    cfg: &ExperimentConfig,
) -> Result<(QeCurve, ErrorCounts), MonteCarloError> {
    cfg.validate()?;
    if cfg.n_trials < 2 {
        return Err(MonteCarloError::TooFewTrials(cfg.n_trials));
    }
    let len = cfg.grid.n_steps() + 1;
    let mut wrong_h0 = vec![0usize; len];
    let mut wrong_h1 = vec![0usize; len];
    let mut n0 = 0usize;
    let mut n1 = 0usize;

    map_trials(
        cfg,
        |i| {
            run_trial(cfg, i).map(|t| {
                // MAP rule: accept the larger posterior, ties to H1.
                let wrong: Vec<bool> = t
                    .posterior_path
                    .iter()
                    .map(|p| {
                        let map = if p.p0 > p.p1 {
                            Hypothesis::H0
                        } else {
                            Hypothesis::H1
                        };
                        map != t.true_hypothesis
                    })
                    .collect();
                (t.true_hypothesis, wrong)
            })
        },
        |_, (truth, wrong)| {
            let tally = match truth {
                Hypothesis::H0 => {
                    n0 += 1;
                    &mut wrong_h0
                }
                Hypothesis::H1 => {
                    n1 += 1;
                    &mut wrong_h1
                }
            };
            for (i, w) in wrong.into_iter().enumerate() {
                if w {
                    tally[i] += 1;
                }
            }
        },
    )?;

    if n0 == 0 {
        return Err(MonteCarloError::NoTrialsUnderTruth(Hypothesis::H0));
    }
    if n1 == 0 {
        return Err(MonteCarloError::NoTrialsUnderTruth(Hypothesis::H1));
    }

    let (prior0, prior1) = (cfg.pair.prior0(), cfg.pair.prior1());
    let mut times = Vec::with_capacity(len);
    let mut qe = Vec::with_capacity(len);
    let mut stderr = Vec::with_capacity(len);
    for i in 0..len {
        times.push(cfg.grid.time(i));
        let p10 = wrong_h0[i] as f64 / n0 as f64;
        let p01 = wrong_h1[i] as f64 / n1 as f64;
        qe.push(prior0 * p10 + prior1 * p01);
        let var = prior0 * prior0 * p10 * (1.0 - p10) / n0 as f64
            + prior1 * prior1 * p01 * (1.0 - p01) / n1 as f64;
        stderr.push(var.sqrt());
    }

    Ok((
        QeCurve {
            times,
            qe,
            stderr,
            n_trials: cfg.n_trials,
            estimator: Estimator::Counting,
        },
        ErrorCounts {
            n_10: wrong_h0[len - 1],
            n_01: wrong_h1[len - 1],
            n_trials_0: n0,
            n_trials_1: n1,
        },
    ))
}

/// Smallest time with qe <= beta, or None. No look-ahead: the first grid
/// point at or below the threshold wins.
pub fn first_passage(curve: &QeCurve, beta: f64) -> Option<f64> {
    curve
        .times
        .iter()
        .zip(curve.qe.iter())
        .find(|(_, &q)| q <= beta)
        .map(|(&t, _)| t)
}

// ---------------------------------------------------------------------------
// Bench: sequential lockstep engines, one per trial, so wall-clock measures
// algorithmic cost only.

struct PosteriorTrialEngine {
    truth_prop: Propagator,
    truth_mat: DMatrix<Complex64>,
    f0: Propagator,
    f1: Propagator,
    mat0: DMatrix<Complex64>,
    mat1: DMatrix<Complex64>,
    l0: f64,
    l1: f64,
    rng: ChaCha12Rng,
}

struct CountingTrialEngine {
    truth: Hypothesis,
    truth_prop: Propagator,
    truth_mat: DMatrix<Complex64>,
    u0: Propagator,
    u1: Propagator,
    mat0: DMatrix<Complex64>,
    mat1: DMatrix<Complex64>,
    log_tr0: f64,
    log_tr1: f64,
    rng: ChaCha12Rng,
}

fn truth_model<'a>(cfg: &'a ExperimentConfig, truth: Hypothesis) -> &'a crate::trajectory::ModelSpec {
    match truth {
        Hypothesis::H0 => &cfg.pair.model0,
        Hypothesis::H1 => &cfg.pair.model1,
    }
}

/// Run the posterior pipeline trial-lockstep over the grid, optionally
/// stopping at the first Qe <= beta crossing.
fn run_posterior_lockstep(
    cfg: &ExperimentConfig,
    early_stop: bool,
) -> Result<QeCurve, MonteCarloError> {
    let n_steps = cfg.grid.n_steps();
    let dt = cfg.grid.dt;
    let n = cfg.n_trials;
    let mut engines = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = trial_rng(cfg.base_seed, i);
        let truth = sample_truth(cfg, &mut rng);
        let tm = truth_model(cfg, truth);
        engines.push(PosteriorTrialEngine {
            truth_prop: Propagator::new(tm),
            truth_mat: cfg.rho0.op.matrix().clone(),
            f0: Propagator::new(&cfg.pair.model0),
            f1: Propagator::new(&cfg.pair.model1),
            mat0: cfg.rho0.op.matrix().clone(),
            mat1: cfg.rho0.op.matrix().clone(),
            l0: 0.0,
            l1: 0.0,
            rng,
        });
    }
    let (eta0, eta1) = (cfg.pair.model0.eta(), cfg.pair.model1.eta());
    let (se0, se1) = (eta0.sqrt(), eta1.sqrt());

    let mut times = Vec::with_capacity(n_steps + 1);
    let mut qe = Vec::with_capacity(n_steps + 1);
    let mut stderr = Vec::with_capacity(n_steps + 1);
    let mut push_stat = |idx: usize, engines: &[PosteriorTrialEngine]| {
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for e in engines {
            let ce = conditional_error(&posteriors(e.l0, e.l1, &cfg.pair));
            sum += ce;
            sumsq += ce * ce;
        }
        let nf = n as f64;
        let mean = sum / nf;
        times.push(cfg.grid.time(idx));
        qe.push(mean);
        stderr.push(if n > 1 {
            let var = ((sumsq - sum * sum / nf) / (nf - 1.0)).max(0.0);
            (var / nf).sqrt()
        } else {
            0.0
        });
        mean
    };

    let mut latest = push_stat(0, &engines);
    for step in 0..n_steps {
        if early_stop && latest <= cfg.beta {
            break;
        }
        for (i, e) in engines.iter_mut().enumerate() {
            let g: f64 = e.rng.sample(rand_distr::StandardNormal);
            let dw = g * dt.sqrt();
            let (_, dy) = e
                .truth_prop
                .step_generate_in_place(&mut e.truth_mat, dt, dw)
                .map_err(|source| MonteCarloError::Trial { index: i, source })?;
            let m0 = e
                .f0
                .step_filter_in_place(&mut e.mat0, dt, dy)
                .map_err(|source| MonteCarloError::Trial { index: i, source })?;
            let m1 = e
                .f1
                .step_filter_in_place(&mut e.mat1, dt, dy)
                .map_err(|source| MonteCarloError::Trial { index: i, source })?;
            match cfg.loglik_mode {
                LoglikMode::ItoCorrected => {
                    e.l0 += se0 * m0 * dy - 0.5 * eta0 * m0 * m0 * dt;
                    e.l1 += se1 * m1 * dy - 0.5 * eta1 * m1 * m1 * dt;
                }
                LoglikMode::DriftOnly => {
                    e.l0 += se0 * m0 * dy;
                    e.l1 += se1 * m1 * dy;
                }
            }
        }
        latest = push_stat(step + 1, &engines);
    }

    Ok(QeCurve {
        times,
        qe,
        stderr,
        n_trials: n,
        estimator: Estimator::Posterior,
    })
}

/// Run the counting (MAP baseline) pipeline trial-lockstep: the per-trial
/// posteriors come from the unnormalized integration of each hypothesis,
/// with the likelihood carried as log Tr(rho_tilde).
///
/// The baseline estimates each error fraction from N experiments run under
/// that fixed truth, so a row labelled N integrates 2N records (N per
/// hypothesis); the posterior pipeline needs only N prior-sampled records
/// for the same label.
fn run_counting_lockstep(
    cfg: &ExperimentConfig,
    early_stop: bool,
) -> Result<QeCurve, MonteCarloError> {
    let n_steps = cfg.grid.n_steps();
    let dt = cfg.grid.dt;
    let n = cfg.n_trials;
    if n < 2 {
        return Err(MonteCarloError::TooFewTrials(n));
    }
    let mut engines = Vec::with_capacity(2 * n);
    for i in 0..2 * n {
        let truth = if i < n { Hypothesis::H0 } else { Hypothesis::H1 };
        let rng = trial_rng(cfg.base_seed, i);
        let tm = truth_model(cfg, truth);
        engines.push(CountingTrialEngine {
            truth,
            truth_prop: Propagator::new(tm),
            truth_mat: cfg.rho0.op.matrix().clone(),
            u0: Propagator::new(&cfg.pair.model0),
            u1: Propagator::new(&cfg.pair.model1),
            mat0: cfg.rho0.op.matrix().clone(),
            mat1: cfg.rho0.op.matrix().clone(),
            log_tr0: 0.0,
            log_tr1: 0.0,
            rng,
        });
    }
    let (n0, n1) = (n, n);
    let (prior0, prior1) = (cfg.pair.prior0(), cfg.pair.prior1());

    let mut times = Vec::with_capacity(n_steps + 1);
    let mut qe = Vec::with_capacity(n_steps + 1);
    let mut stderr = Vec::with_capacity(n_steps + 1);
    let mut push_stat = |idx: usize, engines: &[CountingTrialEngine]| {
        let mut w0 = 0usize;
        let mut w1 = 0usize;
        for e in engines {
            let p = posteriors(e.log_tr0, e.log_tr1, &cfg.pair);
            let map = if p.p0 > p.p1 {
                Hypothesis::H0
            } else {
                Hypothesis::H1
            };
            if map != e.truth {
                match e.truth {
                    Hypothesis::H0 => w0 += 1,
                    Hypothesis::H1 => w1 += 1,
                }
            }
        }
        let p10 = w0 as f64 / n0 as f64;
        let p01 = w1 as f64 / n1 as f64;
        let mean = prior0 * p10 + prior1 * p01;
        times.push(cfg.grid.time(idx));
        qe.push(mean);
        let var = prior0 * prior0 * p10 * (1.0 - p10) / n0 as f64
            + prior1 * prior1 * p01 * (1.0 - p01) / n1 as f64;
        stderr.push(var.sqrt());
        mean
    };

    let mut latest = push_stat(0, &engines);
    for step in 0..n_steps {
        if early_stop && latest <= cfg.beta {
            break;
        }
        for (i, e) in engines.iter_mut().enumerate() {
            let g: f64 = e.rng.sample(rand_distr::StandardNormal);
            let dw = g * dt.sqrt();
            let (_, dy) = e
                .truth_prop
                .step_generate_in_place(&mut e.truth_mat, dt, dw)
                .map_err(|source| MonteCarloError::Trial { index: i, source })?;
            e.u0
                .step_unnormalized_in_place(&mut e.mat0, &mut e.log_tr0, dt, dy)
                .map_err(|source| MonteCarloError::Trial { index: i, source })?;
            e.u1
                .step_unnormalized_in_place(&mut e.mat1, &mut e.log_tr1, dt, dy)
                .map_err(|source| MonteCarloError::Trial { index: i, source })?;
        }
        latest = push_stat(step + 1, &engines);
    }

    Ok(QeCurve {
        times,
        qe,
        stderr,
        n_trials: n,
        estimator: Estimator::Counting,
    })
}

/// Run one estimator pipeline sequentially (bench-style engines), returning
/// its Qe curve. With `early_stop` the grid is truncated at the first
/// Qe <= beta crossing, mirroring the first-passage stopping rule.
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    estimator: Estimator,
    early_stop: bool,
) -> Result<QeCurve, MonteCarloError> {
    cfg.validate()?;
    match estimator {
        Estimator::Posterior => run_posterior_lockstep(cfg, early_stop),
        Estimator::Counting => run_counting_lockstep(cfg, early_stop),
    }
}

/// Time both estimators over a list of trial counts. Each row is repeated
/// three times and the median wall-clock is kept; the counting estimator is
/// skipped at N = 1 where its error fractions are undefined.
pub fn bench(
    cfg: &ExperimentConfig,
    n_list: &[usize],
    early_stop: bool,
) -> Result<BenchTable, MonteCarloError> {
    cfg.validate()?;
    if n_list.is_empty() {
        return Err(MonteCarloError::EmptyNList);
    }
    const REPEATS: usize = 3;
    let mut rows = Vec::new();
    for &n in n_list {
        for estimator in [Estimator::Posterior, Estimator::Counting] {
            if estimator == Estimator::Counting && n < 2 {
                continue;
            }
            let mut run_cfg = cfg.clone();
            run_cfg.n_trials = n;
            run_cfg.estimator = estimator;
            let mut elapsed = Vec::with_capacity(REPEATS);
            let mut fp = None;
            for _ in 0..REPEATS {
                let start = Instant::now();
                let curve = run_pipeline(&run_cfg, estimator, early_stop)?;
                elapsed.push(start.elapsed().as_secs_f64());
                fp = first_passage(&curve, cfg.beta);
            }
            elapsed.sort_by(|a, b| a.partial_cmp(b).unwrap());
            rows.push(BenchRow {
                n_trials: n,
                estimator,
                first_passage_time: fp,
                wall_clock_seconds: elapsed[REPEATS / 2],
                seed: cfg.base_seed,
            });
        }
    }
    Ok(BenchTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::CostMatrix;
    use crate::qmath::{bloch_to_density, build_hamiltonian, pauli, Axis, BlochVector,
        DissipatorOrdering};
    use crate::trajectory::{DissipatorScaling, ModelSpec};

    fn model(omega: f64) -> ModelSpec {
        ModelSpec::new(
            build_hamiltonian(omega, 1.43).unwrap(),
            pauli(Axis::Z),
            0.5,
            DissipatorScaling::EtaScaled,
            DissipatorOrdering::FFdag,
        )
        .unwrap()
    }

    fn cfg(omega0: f64, omega1: f64, n_trials: usize, t_max: f64) -> ExperimentConfig {
        ExperimentConfig {
            pair: HypothesisPair::new(
                model(omega0),
                model(omega1),
                0.5,
                0.5,
                CostMatrix::zero_one(),
            )
            .unwrap(),
            grid: SimGrid::new(1e-3, t_max).unwrap(),
            rho0: bloch_to_density(BlochVector::new(0.0, 0.0, 1.0).unwrap()).unwrap(),
            beta: 0.01,
            n_trials,
            base_seed: 42,
            estimator: Estimator::Posterior,
            truth_sampling: TruthSampling::FromPrior,
            loglik_mode: LoglikMode::ItoCorrected,
            workers: 0,
        }
    }

    #[test]
    fn identical_models_pin_posteriors_at_priors() {
        let c = cfg(1.0, 1.0, 1, 0.2);
        let t = run_trial(&c, 0).unwrap();
        for p in &t.posterior_path {
            assert_eq!(p.p0, 0.5);
            assert_eq!(p.p1, 0.5);
        }
        for ce in &t.conditional_error_path {
            assert_eq!(*ce, 0.5);
        }
    }

    #[test]
    fn run_trial_is_deterministic() {
        let c = cfg(1.0, 2.0, 1, 0.3);
        let a = run_trial(&c, 3).unwrap();
        let b = run_trial(&c, 3).unwrap();
        assert_eq!(a.true_hypothesis, b.true_hypothesis);
        assert_eq!(a.conditional_error_path, b.conditional_error_path);
        assert_eq!(a.loglik0_path, b.loglik0_path);
        assert_eq!(a.final_decision, b.final_decision);
    }

    #[test]
    fn distinct_trials_get_distinct_noise() {
        let c = cfg(1.0, 2.0, 2, 0.3);
        let a = run_trial(&c, 0).unwrap();
        let b = run_trial(&c, 1).unwrap();
        assert_ne!(a.loglik0_path, b.loglik0_path);
    }

    #[test]
    fn decision_path_consistent_with_threshold_rule() {
        let c = cfg(1.0, 2.0, 1, 0.3);
        let t = run_trial(&c, 5).unwrap();
        for d in &t.decision_path {
            let expect = if d.log_ratio > d.log_threshold {
                Hypothesis::H0
            } else {
                Hypothesis::H1
            };
            assert_eq!(d.accepted, expect);
        }
    }

    #[test]
    fn qe_starts_at_min_prior() {
        let c = cfg(1.0, 2.0, 4, 0.1);
        let curve = estimate_qe_posterior(&c).unwrap();
        assert_eq!(curve.qe[0], 0.5);
        assert_eq!(curve.times[0], 0.0);
    }

    #[test]
    fn posterior_estimator_rejects_fixed_truth() {
        let mut c = cfg(1.0, 2.0, 2, 0.1);
        c.truth_sampling = TruthSampling::FixedH0;
        assert!(matches!(
            estimate_qe_posterior(&c),
            Err(MonteCarloError::FixedTruthForPosterior)
        ));
    }

    #[test]
    fn counting_needs_two_trials() {
        let c = cfg(1.0, 2.0, 1, 0.1);
        assert!(matches!(
            estimate_qe_counting(&c),
            Err(MonteCarloError::TooFewTrials(1))
        ));
    }

    #[test]
    fn qe_from_counts_example() {
        let qe = qe_from_counts(3, 100, 5, 100, 0.5, 0.5);
        assert!((qe - 0.04).abs() < 1e-15);
    }

    #[test]
    fn first_passage_rules() {
        let curve = QeCurve {
            times: vec![0.0, 1.0, 2.0, 3.0],
            qe: vec![0.5, 0.2, 0.009, 0.02],
            stderr: vec![0.0; 4],
            n_trials: 1,
            estimator: Estimator::Posterior,
        };
        assert_eq!(first_passage(&curve, 0.01), Some(2.0));
        assert_eq!(first_passage(&curve, 0.001), None);
        assert_eq!(first_passage(&curve, 0.5), Some(0.0));
    }

    #[test]
    fn aggregate_single_and_pair() {
        let grid = SimGrid::new(1.0, 3.0).unwrap();
        let one = aggregate(&[vec![0.5, 0.4, 0.3, 0.2]], Estimator::Posterior, grid).unwrap();
        assert_eq!(one.qe, vec![0.5, 0.4, 0.3, 0.2]);
        assert_eq!(one.stderr, vec![0.0; 4]);

        let two = aggregate(
            &[vec![0.2; 4], vec![0.4; 4]],
            Estimator::Posterior,
            grid,
        )
        .unwrap();
        for q in &two.qe {
            assert!((q - 0.3).abs() < 1e-15);
        }

        assert!(aggregate(
            &[vec![0.2; 4], vec![0.4; 3]],
            Estimator::Posterior,
            grid
        )
        .is_err());
    }

    #[test]
    fn workers_do_not_change_bits() {
        let mut c = cfg(1.0, 2.0, 6, 0.2);
        c.workers = 1;
        let seq = estimate_qe_posterior(&c).unwrap();
        c.workers = 4;
        let par = estimate_qe_posterior(&c).unwrap();
        assert_eq!(seq.qe, par.qe);
        assert_eq!(seq.stderr, par.stderr);
    }

    #[test]
    fn lockstep_matches_batch_estimator() {
        let c = cfg(1.0, 2.0, 4, 0.2);
        let batch = estimate_qe_posterior(&c).unwrap();
        let lock = run_pipeline(&c, Estimator::Posterior, false).unwrap();
        assert_eq!(batch.qe, lock.qe);
    }

    #[test]
    fn beta_validated() {
        let mut c = cfg(1.0, 2.0, 1, 0.1);
        c.beta = 1.5;
        assert!(matches!(
            run_trial(&c, 0),
            Err(MonteCarloError::BetaRange(_))
        ));
    }

    #[test]
    fn bench_structure() {
        let c = cfg(1.0, 2.0, 1, 0.05);
        let table = bench(&c, &[1, 2], true).unwrap();
        // N=1: posterior only; N=2: both estimators.
        assert_eq!(table.rows.len(), 3);
        assert_eq!(table.rows[0].n_trials, 1);
        assert_eq!(table.rows[0].estimator, Estimator::Posterior);
        assert!(table.rows.iter().all(|r| r.wall_clock_seconds > 0.0));
        assert!(bench(&c, &[], false).is_err());
    }
}
