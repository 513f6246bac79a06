//! Reproducible experiment drivers.
//!
//! Three studies, each deterministic in its base seed and emitting flat
//! per-trial rows ready for CSV serialization:
//!
//! * **Recovery phase transition** ([`run_phase_experiment`]): how many
//!   general constraints does exact sparse recovery need on a p×q matrix?
//!   Sweeps the constraint count; each trial draws fresh weights, encodes,
//!   plants a sparse error, and checks whether ℓ1 minimization returns it.
//! * **Output-layer code** ([`run_output_layer_experiment`]): one wide,
//!   short matrix (a classifier head) under a fixed constraint set with a
//!   row-sum check; sweeps the number of planted memory errors and runs the
//!   full detect-then-correct pipeline on a probe inference with datapath
//!   noise riding on top.
//! * **Protected-network sweep** ([`run_mnist_experiment`]): corrupted
//!   vs. corrected test accuracy of an encoded classifier as the total
//!   error count grows, with fault draws paired across the two modes.
//!
//! Trial seeds are `base_seed + trial_index`, so any row can be reproduced
//! in isolation. Within a sweep, points share their per-trial draws (the
//! random streams are consumed prefix-wise), which pairs the comparison
//! across sweep values instead of re-rolling luck at each one.

use rayon::prelude::*;
use thiserror::Error;

use crate::codec::{self, CodecError, ConstraintSet, ConstraintSpec, RowConstraintKind};
use crate::dataio::Dataset;
use crate::decoder::{self, DecodeError, DETECT_TOL};
use crate::faultsim::{inject_datapath, inject_memory, DatapathFaultSpec, FaultError, MemoryFaultSpec};
use crate::lpsolve::{SolveOptions, SolveStatus};
use crate::network::{
    evaluate_with, AccuracyStats, EvalMode, FaultPlan, MLPModel, NetError, ProtectedOptions,
};
use crate::numkernel::{Matrix, NumError, Vector};
use crate::rng::{streams, Stream};

#[derive(Debug, Error)]
pub enum ExpError {
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Fault(#[from] FaultError),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Parse an inclusive `start:stop:step` sweep (`"70:420:70"`), or a single
/// value. The stop is included when the step lands on it exactly.
pub fn parse_sweep(s: &str) -> Result<Vec<usize>, ExpError> {
    let bad = |msg: &str| ExpError::InvalidConfig(format!("sweep '{s}': {msg}"));
    let parts: Vec<&str> = s.split(':').collect();
    let nums: Vec<usize> = parts
        .iter()
        .map(|p| p.trim().parse::<usize>().map_err(|_| bad("values must be nonnegative integers")))
        .collect::<Result<_, _>>()?;
    match nums.as_slice() {
        [v] => Ok(vec![*v]),
        [start, stop, step] => {
            if *step == 0 {
                return Err(bad("step must be positive"));
            }
            if stop < start {
                return Err(bad("stop is below start"));
            }
            Ok((*start..=*stop).step_by(*step).collect())
        }
        _ => Err(bad("expected VALUE or START:STOP:STEP")),
    }
}

/// Sparse-recovery phase-transition sweep configuration.
#[derive(Clone, Debug)]
pub struct PhaseConfig {
    pub rows: usize,
    pub cols: usize,
    /// General-constraint counts to sweep.
    pub constraint_counts: Vec<usize>,
    /// Planted memory-error count per trial.
    pub sparsity: usize,
    /// Standard deviation of planted error values.
    pub sigma: f64,
    pub trials: usize,
    pub seed: u64,
    /// Recovery counts as success when `||e_hat - E||_2` is at or below
    /// this.
    pub success_tol: f64,
    pub solve: SolveOptions,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        PhaseConfig {
            rows: 200,
            cols: 199,
            constraint_counts: (1..=10).map(|i| i * 100).collect(),
            sparsity: 100,
            sigma: 1.0,
            trials: 100,
            seed: 1,
            success_tol: 1e-5,
            solve: SolveOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseTrialRow {
    pub num_constraints: usize,
    pub trial: usize,
    pub success: bool,
    pub recovery_error: f64,
    pub status: SolveStatus,
}

/// One trial: random weights, encode under `k` general constraints, plant a
/// sparse error, recover by ℓ1, compare.
fn phase_trial(cfg: &PhaseConfig, k: usize, trial: usize) -> Result<PhaseTrialRow, ExpError> {
    let seed = cfg.seed + trial as u64;
    let mut ws = Stream::new(seed, streams::WEIGHT_INIT);
    let mut h0 = Matrix::zeros(cfg.rows, cfg.cols);
    ws.fill_normal(h0.as_mut_slice());
    let spec = ConstraintSpec {
        seed,
        num_general: k,
        row_constraints: vec![],
        group_size: None,
        shape: (cfg.rows, cfg.cols),
    };
    let cs = ConstraintSet::from_spec(spec)?;
    let coded = codec::encode(&h0, &cs)?;
    let fault = MemoryFaultSpec {
        num_errors: cfg.sparsity,
        sigma: cfg.sigma,
        seed,
        group_size: None,
    };
    let (h_tilde, record) = inject_memory(&coded.weights, &fault)?;
    let (e_hat, statuses) = decoder::correct_memory(&h_tilde, &cs, &cfg.solve)?;
    let recovery_error = e_hat.sub(&record.error)?.frobenius_norm();
    Ok(PhaseTrialRow {
        num_constraints: k,
        trial,
        success: recovery_error <= cfg.success_tol,
        recovery_error,
        status: statuses[0],
    })
}

/// Run the full sweep. Rows come back ordered by sweep point, then trial;
/// `on_row` fires as trials finish (any order) for progress reporting.
pub fn run_phase_experiment<F>(
    cfg: &PhaseConfig,
    on_row: F,
) -> Result<Vec<PhaseTrialRow>, ExpError>
where
    F: Fn(&PhaseTrialRow) + Sync,
{
    if cfg.constraint_counts.is_empty() || cfg.trials == 0 {
        return Err(ExpError::InvalidConfig("empty sweep or zero trials".into()));
    }
    let tasks: Vec<(usize, usize)> = cfg
        .constraint_counts
        .iter()
        .flat_map(|&k| (0..cfg.trials).map(move |t| (k, t)))
        .collect();
    tasks
        .into_par_iter()
        .map(|(k, t)| {
            let row = phase_trial(cfg, k, t)?;
            on_row(&row);
            Ok(row)
        })
        .collect()
}

/// Success rate per sweep point, in sweep order.
pub fn phase_success_rates(rows: &[PhaseTrialRow]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, usize, usize)> = Vec::new(); // (k, successes, total)
    for row in rows {
        match out.iter_mut().find(|(k, _, _)| *k == row.num_constraints) {
            Some((_, s, n)) => {
                *s += row.success as usize;
                *n += 1;
            }
            None => out.push((row.num_constraints, row.success as usize, 1)),
        }
    }
    out.into_iter().map(|(k, s, n)| (k, s as f64 / n as f64)).collect()
}

pub fn phase_csv(rows: &[PhaseTrialRow]) -> (Vec<&'static str>, Vec<Vec<String>>) {
    let header = vec!["num_constraints", "trial", "success", "recovery_error"];
    let body = rows
        .iter()
        .map(|r| {
            vec![
                r.num_constraints.to_string(),
                r.trial.to_string(),
                (r.success as u8).to_string(),
                format!("{:e}", r.recovery_error),
            ]
        })
        .collect();
    (header, body)
}

/// Output-layer code study configuration.
#[derive(Clone, Debug)]
pub struct OutputLayerConfig {
    pub rows: usize,
    pub cols: usize,
    pub num_general: usize,
    /// Planted memory-error counts to sweep.
    pub error_counts: Vec<usize>,
    pub sigma_mem: f64,
    pub datapath_errors: usize,
    pub sigma_dp: f64,
    pub trials: usize,
    pub seed: u64,
    pub success_tol: f64,
    pub solve: SolveOptions,
}

impl Default for OutputLayerConfig {
    fn default() -> Self {
        OutputLayerConfig {
            rows: 10,
            cols: 512,
            num_general: 500,
            error_counts: (1..=7).map(|i| i * 30).collect(),
            sigma_mem: 2.0,
            datapath_errors: 2,
            sigma_dp: 0.01,
            trials: 100,
            seed: 1,
            success_tol: 1e-5,
            solve: SolveOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputLayerTrialRow {
    pub num_errors: usize,
    pub trial: usize,
    pub success: bool,
    pub recovery_error: f64,
    pub status: SolveStatus,
}

/// Fixed encoded matrix; per trial, plant errors, run one probe inference
/// through detection and correction, and judge memory-error recovery.
pub fn run_output_layer_experiment<F>(
    cfg: &OutputLayerConfig,
    on_row: F,
) -> Result<Vec<OutputLayerTrialRow>, ExpError>
where
    F: Fn(&OutputLayerTrialRow) + Sync,
{
    if cfg.error_counts.is_empty() || cfg.trials == 0 {
        return Err(ExpError::InvalidConfig("empty sweep or zero trials".into()));
    }
    let spec = ConstraintSpec {
        seed: cfg.seed,
        num_general: cfg.num_general,
        row_constraints: vec![RowConstraintKind::AllOnes],
        group_size: None,
        shape: (cfg.rows, cfg.cols),
    };
    let cs = ConstraintSet::from_spec(spec)?;
    let mut ws = Stream::new(cfg.seed, streams::WEIGHT_INIT);
    let mut h0 = Matrix::zeros(cfg.rows, cfg.cols);
    ws.fill_normal(h0.as_mut_slice());
    let coded = codec::encode(&h0, &cs)?;
    let h = &coded.weights;

    let tasks: Vec<(usize, usize)> = cfg
        .error_counts
        .iter()
        .flat_map(|&c| (0..cfg.trials).map(move |t| (c, t)))
        .collect();
    tasks
        .into_par_iter()
        .map(|(count, trial)| {
            let seed = cfg.seed + trial as u64;
            let mem = MemoryFaultSpec {
                num_errors: count,
                sigma: cfg.sigma_mem,
                seed,
                group_size: None,
            };
            let (h_tilde, record) = inject_memory(h, &mem)?;
            let mut xs = Stream::new(seed, streams::EXPERIMENT);
            let x = Vector::from_fn(cfg.cols, |_| xs.normal());
            let y0 = h_tilde.matvec(&x)?;
            let dp = DatapathFaultSpec {
                num_errors: cfg.datapath_errors,
                sigma: cfg.sigma_dp,
                seed,
            };
            let (y, _) = inject_datapath(&y0, &dp)?;
            let res = decoder::correct_layer(&y, &h_tilde, &x, &cs, &cfg.solve, DETECT_TOL)?;
            let recovery_error = res.e_hat.sub(&record.error)?.frobenius_norm();
            let row = OutputLayerTrialRow {
                num_errors: count,
                trial,
                success: recovery_error <= cfg.success_tol,
                recovery_error,
                status: res.statuses.first().copied().unwrap_or(SolveStatus::Optimal),
            };
            on_row(&row);
            Ok(row)
        })
        .collect()
}

pub fn output_layer_success_rates(rows: &[OutputLayerTrialRow]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, usize, usize)> = Vec::new();
    for row in rows {
        match out.iter_mut().find(|(c, _, _)| *c == row.num_errors) {
            Some((_, s, n)) => {
                *s += row.success as usize;
                *n += 1;
            }
            None => out.push((row.num_errors, row.success as usize, 1)),
        }
    }
    out.into_iter().map(|(c, s, n)| (c, s as f64 / n as f64)).collect()
}

pub fn output_layer_csv(rows: &[OutputLayerTrialRow]) -> (Vec<&'static str>, Vec<Vec<String>>) {
    let header = vec!["num_errors", "trial", "success", "recovery_error"];
    let body = rows
        .iter()
        .map(|r| {
            vec![
                r.num_errors.to_string(),
                r.trial.to_string(),
                (r.success as u8).to_string(),
                format!("{:e}", r.recovery_error),
            ]
        })
        .collect();
    (header, body)
}

/// Corrupted-vs-corrected accuracy sweep configuration.
#[derive(Clone, Debug)]
pub struct MnistExpConfig {
    /// Total memory errors per encoded layer, swept.
    pub error_counts: Vec<usize>,
    pub trials: usize,
    pub sigma_mem: f64,
    /// Datapath errors per inference.
    pub datapath_errors: usize,
    pub sigma_dp: f64,
    pub seed: u64,
    pub opts: ProtectedOptions,
}

impl Default for MnistExpConfig {
    fn default() -> Self {
        MnistExpConfig {
            error_counts: (1..=6).map(|i| i * 70).collect(),
            trials: 10,
            sigma_mem: 2.0,
            datapath_errors: 2,
            sigma_dp: 0.01,
            seed: 1,
            opts: ProtectedOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MnistExpRow {
    pub total_errors: usize,
    pub trial: usize,
    pub mode: EvalMode,
    pub accuracy: f64,
}

pub fn mode_label(mode: EvalMode) -> &'static str {
    match mode {
        EvalMode::Clean => "clean",
        EvalMode::Corrupted => "corrupted",
        EvalMode::Corrected => "corrected",
    }
}

/// Evaluate an encoded model under each error count, corrupted and
/// corrected, with fault draws paired between the two modes. Rows are
/// ordered by error count, corrupted before corrected, trials ascending.
/// `on_point` fires after each (error count, mode) evaluation.
pub fn run_mnist_experiment<F>(
    model: &MLPModel,
    test: &Dataset,
    cfg: &MnistExpConfig,
    mut on_point: F,
) -> Result<Vec<MnistExpRow>, ExpError>
where
    F: FnMut(usize, EvalMode, &AccuracyStats),
{
    if cfg.error_counts.is_empty() || cfg.trials == 0 {
        return Err(ExpError::InvalidConfig("empty sweep or zero trials".into()));
    }
    let mut rows = Vec::new();
    for &total in &cfg.error_counts {
        let plan = FaultPlan {
            memory: Some(MemoryFaultSpec {
                num_errors: total,
                sigma: cfg.sigma_mem,
                seed: cfg.seed,
                group_size: None,
            }),
            datapath: Some(DatapathFaultSpec {
                num_errors: cfg.datapath_errors,
                sigma: cfg.sigma_dp,
                seed: cfg.seed,
            }),
        };
        for mode in [EvalMode::Corrupted, EvalMode::Corrected] {
            let stats = evaluate_with(model, test, mode, &plan, cfg.trials, &cfg.opts)?;
            for (t, &acc) in stats.per_trial.iter().enumerate() {
                rows.push(MnistExpRow { total_errors: total, trial: t, mode, accuracy: acc });
            }
            on_point(total, mode, &stats);
        }
    }
    Ok(rows)
}

pub fn mnist_csv(rows: &[MnistExpRow]) -> (Vec<&'static str>, Vec<Vec<String>>) {
    let header = vec!["total_errors", "trial", "mode", "accuracy"];
    let body = rows
        .iter()
        .map(|r| {
            vec![
                r.total_errors.to_string(),
                r.trial.to_string(),
                mode_label(r.mode).to_string(),
                format!("{}", r.accuracy),
            ]
        })
        .collect();
    (header, body)
}
