//! Crash campaigns: uniform crash-point sampling, restart, outcome
//! classification, per-region recomputability and NVM write accounting.

use std::fmt::Write as _;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plan::PersistencePlan;
use crate::simcache::{CacheConfig, SimError, SimMachine};
use crate::workloads::{
    self, AcceptanceResult, CheckpointRequest, DataObjectRegistry, Golden, KernelSpec, RegionInfo,
    RunOptions, RunOutcome, WorkloadError,
};

/// Response of a kernel to one crash and restart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Outcome {
    /// Correct result without extra iterations.
    S1,
    /// Correct result after at least one extra iteration.
    S2,
    /// Restart was interrupted (fault or unusable data).
    S3,
    /// Verification failed, including at the iteration cap.
    S4,
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("invalid campaign: {0}")]
    InvalidCampaign(String),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("thread pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrashRecord {
    pub test_id: usize,
    pub crash_op_index: u64,
    pub region_id: usize,
    pub iteration: u64,
    /// Inconsistent rate per candidate object at the crash instant.
    pub rates: Vec<f64>,
    pub outcome: Outcome,
    pub extra_iterations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignResult {
    pub kernel: String,
    pub seed: u64,
    pub n_tests: usize,
    pub object_names: Vec<String>,
    pub regions: Vec<RegionInfo>,
    pub registry: DataObjectRegistry,
    pub records: Vec<CrashRecord>,
    /// Fraction of S1 among all tests.
    #[serde(rename = "Y")]
    pub y: f64,
    /// Fraction of S1 among tests landing in each region; `None` when no
    /// test landed there.
    pub c_k: Vec<Option<f64>>,
    pub landings: Vec<usize>,
    pub outcome_fractions: [f64; 4],
    /// Running Y after every tenth of the tests.
    pub y_history: Vec<f64>,
    pub converged: bool,
    pub plan_applied: bool,
    pub golden_total_ops: u64,
    pub baseline_iterations: u64,
}

impl CampaignResult {
    /// Landing frequencies, an estimate of each region's time share.
    pub fn landing_fractions(&self) -> Vec<f64> {
        self.landings
            .iter()
            .map(|&l| l as f64 / self.n_tests as f64)
            .collect()
    }

    /// c_k with `None` replaced by the campaign mean Y.
    pub fn c_k_or_mean(&self) -> Vec<f64> {
        self.c_k.iter().map(|c| c.unwrap_or(self.y)).collect()
    }

    pub fn outcome_count(&self, o: Outcome) -> usize {
        self.records.iter().filter(|r| r.outcome == o).count()
    }

    /// Campaign CSV, one row per test in `test_id` order.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("test_id,crash_op_index,region_id,iteration,outcome,extra_iterations");
        for name in &self.object_names {
            let _ = write!(out, ",icr_{name}");
        }
        out.push('\n');
        for r in &self.records {
            let _ = write!(
                out,
                "{},{},{},{},{},{}",
                r.test_id,
                r.crash_op_index,
                r.region_id,
                r.iteration,
                r.outcome,
                r.extra_iterations
            );
            for rate in &r.rates {
                let _ = write!(out, ",{rate:.6}");
            }
            out.push('\n');
        }
        out
    }

    pub fn summary(&self) -> CampaignSummary {
        let [s1, s2, s3, s4] = self.outcome_fractions;
        CampaignSummary {
            kernel: self.kernel.clone(),
            seed: self.seed,
            n_tests: self.n_tests,
            y: self.y,
            c_k: self.c_k.clone(),
            landings: self.landings.clone(),
            s1,
            s2,
            s3,
            s4,
            converged: self.converged,
            y_history: self.y_history.clone(),
            plan_applied: self.plan_applied,
            golden_total_ops: self.golden_total_ops,
            baseline_iterations: self.baseline_iterations,
            regions: self.regions.clone(),
            registry: self.registry.clone(),
            notes: vec![
                "c_k is null for regions without landings; planning uses Y for them".into(),
                "c_k counts only S1 outcomes; S2 is reported separately".into(),
            ],
        }
    }
}

impl CampaignResult {
    /// Rebuilds a campaign from its summary and CSV files.
    pub fn from_parts(summary: CampaignSummary, csv: &str) -> Result<Self, CampaignError> {
        let bad = |msg: String| CampaignError::InvalidCampaign(msg);
        let mut lines = csv.lines();
        let header = lines
            .next()
            .ok_or_else(|| bad("empty campaign CSV".into()))?;
        let object_names: Vec<String> = header
            .split(',')
            .skip(6)
            .map(|h| {
                h.strip_prefix("icr_")
                    .map(str::to_string)
                    .ok_or_else(|| bad(format!("bad column {h}")))
            })
            .collect::<Result<_, _>>()?;
        let mut records = Vec::new();
        for (row, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 + object_names.len() {
                return Err(bad(format!(
                    "row {}: expected {} fields",
                    row + 1,
                    6 + object_names.len()
                )));
            }
            let num = |i: usize| {
                f[i].parse::<u64>()
                    .map_err(|e| bad(format!("row {}: {e}", row + 1)))
            };
            let outcome = match f[4] {
                "S1" => Outcome::S1,
                "S2" => Outcome::S2,
                "S3" => Outcome::S3,
                "S4" => Outcome::S4,
                o => return Err(bad(format!("row {}: unknown outcome {o}", row + 1))),
            };
            let rates = f[6..]
                .iter()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| bad(format!("row {}: {e}", row + 1)))
                })
                .collect::<Result<_, _>>()?;
            records.push(CrashRecord {
                test_id: num(0)? as usize,
                crash_op_index: num(1)?,
                region_id: num(2)? as usize,
                iteration: num(3)?,
                outcome,
                extra_iterations: num(5)?,
                rates,
            });
        }
        if records.len() != summary.n_tests {
            return Err(bad(format!(
                "summary lists {} tests, CSV has {}",
                summary.n_tests,
                records.len()
            )));
        }
        if object_names != summary.registry.candidate_names() {
            return Err(bad("CSV columns do not match the summary's registry".into()));
        }
        if records.iter().any(|r| r.region_id >= summary.regions.len()) {
            return Err(bad("record refers to an unknown region".into()));
        }
        Ok(CampaignResult {
            kernel: summary.kernel,
            seed: summary.seed,
            n_tests: summary.n_tests,
            object_names,
            regions: summary.regions,
            registry: summary.registry,
            records,
            y: summary.y,
            c_k: summary.c_k,
            landings: summary.landings,
            outcome_fractions: [summary.s1, summary.s2, summary.s3, summary.s4],
            y_history: summary.y_history,
            converged: summary.converged,
            plan_applied: summary.plan_applied,
            golden_total_ops: summary.golden_total_ops,
            baseline_iterations: summary.baseline_iterations,
        })
    }
}

/// Summary document emitted next to the campaign CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub kernel: String,
    pub seed: u64,
    pub n_tests: usize,
    #[serde(rename = "Y")]
    pub y: f64,
    pub c_k: Vec<Option<f64>>,
    pub landings: Vec<usize>,
    #[serde(rename = "S1")]
    pub s1: f64,
    #[serde(rename = "S2")]
    pub s2: f64,
    #[serde(rename = "S3")]
    pub s3: f64,
    #[serde(rename = "S4")]
    pub s4: f64,
    pub converged: bool,
    pub y_history: Vec<f64>,
    pub plan_applied: bool,
    pub golden_total_ops: u64,
    pub baseline_iterations: u64,
    pub regions: Vec<RegionInfo>,
    pub registry: DataObjectRegistry,
    #[serde(default)]
    pub notes: Vec<String>,
}

/// `n` independent draws, uniform over `[0, total_ops)`.
pub fn sample_crash_points(total_ops: u64, n: usize, seed: u64) -> Vec<u64> {
    assert!(total_ops >= 1, "crash window is empty");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0..total_ops)).collect()
}

/// Maps a restart result to its outcome class.
pub fn classify_outcome(
    result: &Result<AcceptanceResult, WorkloadError>,
    baseline_iterations: u64,
) -> Outcome {
    match result {
        Ok(a) if a.passed && a.iterations_used <= baseline_iterations => Outcome::S1,
        Ok(a) if a.passed => Outcome::S2,
        Ok(_) => Outcome::S4,
        Err(WorkloadError::KernelDiverged { .. }) => Outcome::S4,
        Err(_) => Outcome::S3,
    }
}

/// True when the spread of the trailing `window` values is within `epsilon`.
pub fn campaign_converged(history: &[f64], window: usize, epsilon: f64) -> bool {
    assert!(!history.is_empty(), "history must be non-empty");
    let start = history.len().saturating_sub(window.max(1));
    let tail = &history[start..];
    let max = tail.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = tail.iter().copied().fold(f64::INFINITY, f64::min);
    max - min <= epsilon
}

#[derive(Debug, Clone)]
pub struct CampaignConfig {
    pub cache: CacheConfig,
    pub n_tests: usize,
    pub seed: u64,
    /// Worker threads; `None` uses the global pool.
    pub jobs: Option<usize>,
}

impl CampaignConfig {
    pub fn new(n_tests: usize, seed: u64) -> Self {
        Self {
            cache: CacheConfig::desk(),
            n_tests,
            seed,
            jobs: None,
        }
    }
}

const HISTORY_POINTS: usize = 10;
const HISTORY_WINDOW: usize = 5;
const CONVERGENCE_EPSILON: f64 = 0.05;

/// Runs a full campaign: golden run (with the plan, so the crash window
/// includes its flushes), sampling, and one crash/restart per point.
pub fn run_campaign(
    spec: &KernelSpec,
    plan: Option<&PersistencePlan>,
    cfg: &CampaignConfig,
) -> Result<CampaignResult, CampaignError> {
    if cfg.n_tests == 0 {
        return Err(CampaignError::InvalidCampaign(
            "n_tests must be at least 1".into(),
        ));
    }
    let golden = workloads::golden_run(spec, plan)?;
    let points = sample_crash_points(golden.total_ops, cfg.n_tests, cfg.seed);
    info!(
        "campaign {}: {} tests over {} ops, plan={}",
        spec.kernel,
        cfg.n_tests,
        golden.total_ops,
        plan.is_some()
    );
    run_campaign_at(spec, &golden, plan, cfg, &points)
}

/// Runs one crash test per given crash point.
pub fn run_campaign_at(
    spec: &KernelSpec,
    golden: &Golden,
    plan: Option<&PersistencePlan>,
    cfg: &CampaignConfig,
    points: &[u64],
) -> Result<CampaignResult, CampaignError> {
    if points.is_empty() {
        return Err(CampaignError::InvalidCampaign("no crash points".into()));
    }
    cfg.cache.validate()?;
    let run_all = || -> Result<Vec<CrashRecord>, CampaignError> {
        points
            .par_iter()
            .enumerate()
            .map(|(id, &op)| crash_test(spec, golden, plan, &cfg.cache, id, op))
            .collect()
    };
    let mut records = match cfg.jobs {
        Some(jobs) => rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| CampaignError::Pool(e.to_string()))?
            .install(run_all)?,
        None => run_all()?,
    };
    records.sort_by_key(|r| r.test_id);
    Ok(aggregate(spec, golden, plan.is_some(), cfg.seed, records))
}

fn crash_test(
    spec: &KernelSpec,
    golden: &Golden,
    plan: Option<&PersistencePlan>,
    cache: &CacheConfig,
    test_id: usize,
    op: u64,
) -> Result<CrashRecord, CampaignError> {
    let machine = SimMachine::new(cache.clone())?;
    let info = match workloads::run_kernel(spec, machine, plan, Some(op))? {
        RunOutcome::Crashed(info) => info,
        RunOutcome::Completed { .. } => {
            return Err(CampaignError::InvalidCampaign(format!(
                "crash point {op} lies beyond the crash window"
            )))
        }
    };
    let fresh = SimMachine::new(cache.clone())?;
    let result = workloads::restart_kernel(spec, golden, &info.snapshot, fresh);
    let outcome = classify_outcome(&result, golden.baseline_iterations);
    let extra_iterations = match &result {
        Ok(a) => a.iterations_used.saturating_sub(golden.baseline_iterations),
        Err(_) => 0,
    };
    debug!(
        "test {test_id}: op {op} region {} -> {outcome}",
        info.region_id
    );
    Ok(CrashRecord {
        test_id,
        crash_op_index: op,
        region_id: info.region_id,
        iteration: info.iteration,
        rates: info.rates.into_iter().map(|(_, r)| r).collect(),
        outcome,
        extra_iterations,
    })
}

fn aggregate(
    spec: &KernelSpec,
    golden: &Golden,
    plan_applied: bool,
    seed: u64,
    records: Vec<CrashRecord>,
) -> CampaignResult {
    let n = records.len();
    let n_regions = golden.regions.len();
    let mut landings = vec![0usize; n_regions];
    let mut successes = vec![0usize; n_regions];
    let mut counts = [0usize; 4];
    for r in &records {
        landings[r.region_id] += 1;
        counts[r.outcome as usize] += 1;
        if r.outcome == Outcome::S1 {
            successes[r.region_id] += 1;
        }
    }
    let y = counts[0] as f64 / n as f64;
    let c_k = landings
        .iter()
        .zip(&successes)
        .map(|(&l, &s)| (l > 0).then(|| s as f64 / l as f64))
        .collect();

    let step = n.div_ceil(HISTORY_POINTS).max(1);
    let mut y_history = Vec::new();
    let mut s1 = 0usize;
    for (i, r) in records.iter().enumerate() {
        s1 += usize::from(r.outcome == Outcome::S1);
        if (i + 1) % step == 0 || i + 1 == n {
            y_history.push(s1 as f64 / (i + 1) as f64);
        }
    }
    let converged = campaign_converged(&y_history, HISTORY_WINDOW, CONVERGENCE_EPSILON);
    let regions = golden
        .regions
        .iter()
        .map(|r| RegionInfo {
            id: r.id,
            name: r.name.clone(),
            kind: r.kind,
        })
        .collect();

    CampaignResult {
        kernel: spec.kernel.to_string(),
        seed,
        n_tests: n,
        object_names: golden.registry.candidate_names(),
        regions,
        registry: golden.registry.clone(),
        records,
        y,
        c_k,
        landings,
        outcome_fractions: counts.map(|c| c as f64 / n as f64),
        y_history,
        converged,
        plan_applied,
        golden_total_ops: golden.total_ops,
        baseline_iterations: golden.baseline_iterations,
    }
}

/// NVM write totals for persistence versus a single checkpoint.
///
/// All "extra" figures are differences against a crash-free run without
/// persistence, with every run's dirty lines drained at the end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WriteComparison {
    pub baseline_writes: u64,
    pub easycrash_writes: i64,
    pub easycrash_flush_writes: u64,
    pub persistence_ops: u64,
    pub max_writes_per_persistence: u64,
    pub chk_critical_writes: i64,
    pub chk_all_candidates_writes: i64,
    pub llc_lines: u64,
    pub checkpoint_iteration: u64,
}

pub fn compare_writes(
    spec: &KernelSpec,
    plan: &PersistencePlan,
    cache: &CacheConfig,
) -> Result<WriteComparison, CampaignError> {
    let run = |opts: RunOptions<'_>| -> Result<workloads::RunStats, CampaignError> {
        match workloads::run_kernel_with(spec, SimMachine::new(cache.clone())?, &opts)? {
            RunOutcome::Completed { stats, .. } => Ok(stats),
            RunOutcome::Crashed(_) => unreachable!("no crash point requested"),
        }
    };
    let base = run(RunOptions::default())?;
    let with_plan = run(RunOptions {
        plan: Some(plan),
        ..Default::default()
    })?;
    let iterations = base.iteration_start_ops.len() as u64;
    let at_iteration = iterations / 2 + 1;
    let checkpoint = |objects: Vec<String>| {
        run(RunOptions {
            checkpoint: Some(CheckpointRequest {
                at_iteration,
                objects,
            }),
            ..Default::default()
        })
    };
    let chk_critical = checkpoint(plan.critical_objects.clone())?;
    let chk_all = checkpoint(workloads::registry(spec)?.candidate_names())?;
    let extra = |s: &workloads::RunStats| s.nvm_writes as i64 - base.nvm_writes as i64;
    Ok(WriteComparison {
        baseline_writes: base.nvm_writes,
        easycrash_writes: extra(&with_plan),
        easycrash_flush_writes: with_plan.flush_writes,
        persistence_ops: with_plan.persistence_ops,
        max_writes_per_persistence: with_plan.max_writes_per_persistence,
        chk_critical_writes: extra(&chk_critical),
        chk_all_candidates_writes: extra(&chk_all),
        llc_lines: cache.llc_lines(),
        checkpoint_iteration: at_iteration,
    })
}
