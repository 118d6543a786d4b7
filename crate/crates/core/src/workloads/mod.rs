//! Restartable iterative kernels that do every data access through a
//! [`SimMachine`].
//!
//! Each kernel registers its data objects and code regions, runs an init
//! phase followed by a main loop (the crash window), and can resume that loop
//! from a crash snapshot. Dynamic operation counts stand in for time.

mod cg;
mod jacobi;
mod kmeans;
mod runner;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plan::PersistencePlan;
use crate::simcache::{Addr, CacheConfig, MemoryImage, SimError, SimMachine};

pub(crate) use runner::{Runner, Stop};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelName {
    Jacobi2d,
    Cgsolve,
    Kmeans,
}

impl std::fmt::Display for KernelName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KernelName::Jacobi2d => "jacobi2d",
            KernelName::Cgsolve => "cgsolve",
            KernelName::Kmeans => "kmeans",
        })
    }
}

/// Problem definition for one kernel.
///
/// `size` is the grid edge for `jacobi2d` and `cgsolve` and the point count
/// for `kmeans`. `tolerance` is the relative residual target for the solvers
/// and the relative objective-change threshold for `kmeans`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kernel: KernelName,
    pub size: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl KernelSpec {
    pub fn jacobi2d() -> Self {
        Self {
            kernel: KernelName::Jacobi2d,
            size: 18,
            tolerance: 1e-6,
            seed: 7,
        }
    }

    pub fn cgsolve() -> Self {
        Self {
            kernel: KernelName::Cgsolve,
            size: 16,
            tolerance: 1e-8,
            seed: 7,
        }
    }

    pub fn kmeans() -> Self {
        Self {
            kernel: KernelName::Kmeans,
            size: 384,
            tolerance: 1e-9,
            seed: 7,
        }
    }

    pub fn default_for(kernel: KernelName) -> Self {
        match kernel {
            KernelName::Jacobi2d => Self::jacobi2d(),
            KernelName::Cgsolve => Self::cgsolve(),
            KernelName::Kmeans => Self::kmeans(),
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let min = match self.kernel {
            KernelName::Jacobi2d | KernelName::Cgsolve => 4,
            KernelName::Kmeans => kmeans::CLUSTERS * 2,
        };
        if self.size < min {
            return Err(WorkloadError::InvalidSpec(format!(
                "{} needs size >= {min}, got {}",
                self.kernel, self.size
            )));
        }
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return Err(WorkloadError::InvalidSpec(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, WorkloadError> {
        let spec: KernelSpec =
            serde_json::from_str(text).map_err(|e| WorkloadError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RegionKind {
    /// A first-level inner loop of the main loop.
    Loop,
    /// Straight-line code between two adjacent first-level inner loops.
    Straight,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionInfo {
    pub id: usize,
    pub name: String,
    pub kind: RegionKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataObject {
    pub name: String,
    pub base: Addr,
    pub len: u64,
    pub read_only: bool,
}

impl DataObject {
    /// Alive across the main loop and written by it.
    pub fn is_candidate(&self) -> bool {
        !self.read_only
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataObjectRegistry {
    pub objects: Vec<DataObject>,
    pub iterator_addr: Addr,
}

impl DataObjectRegistry {
    pub fn candidates(&self) -> impl Iterator<Item = &DataObject> {
        self.objects.iter().filter(|o| o.is_candidate())
    }

    pub fn candidate_names(&self) -> Vec<String> {
        self.candidates().map(|o| o.name.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&DataObject> {
        self.objects.iter().find(|o| o.name == name)
    }

    /// Total bytes of all candidate objects.
    pub fn candidate_bytes(&self) -> u64 {
        self.candidates().map(|o| o.len).sum()
    }
}

/// Line-aligned bump allocator for kernel objects.
pub(crate) struct Layout {
    next: Addr,
    objects: Vec<DataObject>,
}

impl Layout {
    const ALIGN: u64 = 256;

    pub(crate) fn new() -> Self {
        Self {
            next: 0x1_0000,
            objects: Vec::new(),
        }
    }

    pub(crate) fn alloc(&mut self, name: &str, len: u64, read_only: bool) -> Addr {
        let base = self.next;
        self.next = (base + len).div_ceil(Self::ALIGN) * Self::ALIGN;
        self.objects.push(DataObject {
            name: name.to_string(),
            base,
            len,
            read_only,
        });
        base
    }

    /// Scratch space outside the registry (checkpoint destinations).
    pub(crate) fn scratch_base(&self) -> Addr {
        self.next + Self::ALIGN
    }

    pub(crate) fn finish(self) -> (DataObjectRegistry, Addr) {
        let scratch = self.scratch_base() + Self::ALIGN;
        let iterator_addr = self.next;
        (
            DataObjectRegistry {
                objects: self.objects,
                iterator_addr,
            },
            scratch,
        )
    }
}

/// Result of a kernel's own verification predicate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceResult {
    pub passed: bool,
    pub iterations_used: u64,
    /// Final relative residual (solvers) or objective (`kmeans`).
    pub metric: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkloadError {
    #[error("kernel diverged at iteration {iteration} (metric {metric})")]
    KernelDiverged { iteration: u64, metric: f64 },
    #[error("restart fault: {0}")]
    RestartFault(String),
    #[error("invalid kernel spec: {0}")]
    InvalidSpec(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("golden run did not converge within {0} iterations")]
    NoConvergence(u64),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Per-region dynamic statistics from one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub id: usize,
    pub name: String,
    pub kind: RegionKind,
    pub ops: u64,
    pub visits: u64,
    pub trip_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    /// Operations inside the crash window.
    pub total_ops: u64,
    pub regions: Vec<RegionStats>,
    pub iteration_start_ops: Vec<u64>,
    /// Memory writes after the run, including a final drain of dirty lines.
    pub nvm_writes: u64,
    /// Memory writes caused directly by persistence flushes.
    pub flush_writes: u64,
    pub persistence_ops: u64,
    pub max_writes_per_persistence: u64,
    pub checkpoint_writes: u64,
}

#[derive(Debug)]
pub struct CrashInfo {
    pub op_index: u64,
    pub region_id: usize,
    pub iteration: u64,
    /// Inconsistent rate per candidate object, registry order.
    pub rates: Vec<(String, f64)>,
    pub snapshot: MemoryImage,
}

#[derive(Debug)]
pub enum RunOutcome {
    Completed {
        acceptance: AcceptanceResult,
        stats: RunStats,
    },
    Crashed(CrashInfo),
}

/// One-off checkpoint taken during a crash-free run, for write accounting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointRequest {
    pub at_iteration: u64,
    pub objects: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    pub plan: Option<&'a PersistencePlan>,
    pub crash_at: Option<u64>,
    pub checkpoint: Option<CheckpointRequest>,
}

/// Reference data from a crash-free run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Golden {
    pub spec: KernelSpec,
    pub baseline_iterations: u64,
    pub total_ops: u64,
    pub regions: Vec<RegionStats>,
    /// Fraction of main-loop operations spent in each region.
    pub a_k: Vec<f64>,
    pub iteration_start_ops: Vec<u64>,
    pub registry: DataObjectRegistry,
    pub metric: f64,
}

impl Golden {
    pub fn region_kinds(&self) -> Vec<(usize, RegionKind)> {
        self.regions.iter().map(|r| (r.id, r.kind)).collect()
    }
}

pub(crate) struct Step {
    pub converged: bool,
    pub metric: f64,
    pub diverged: bool,
}

pub(crate) trait Kernel: Send + Sync {
    fn registry(&self) -> &DataObjectRegistry;
    fn regions(&self) -> &[RegionInfo];
    fn scratch_base(&self) -> Addr;
    /// Writes the initial value of every object.
    fn init(&self, rt: &mut Runner) -> Result<(), Stop>;
    /// Executes one main-loop iteration.
    fn iterate(&self, rt: &mut Runner) -> Result<Step, Stop>;
    /// Independent check of the final state against the kernel's fidelity
    /// threshold. `reference` is the golden metric, when known.
    fn verify(&self, rt: &mut Runner, reference: Option<f64>) -> Result<(bool, f64), Stop>;
}

pub(crate) fn build(spec: &KernelSpec) -> Result<Box<dyn Kernel>, WorkloadError> {
    spec.validate()?;
    Ok(match spec.kernel {
        KernelName::Jacobi2d => Box::new(jacobi::Jacobi2d::new(spec)),
        KernelName::Cgsolve => Box::new(cg::CgSolve::new(spec)),
        KernelName::Kmeans => Box::new(kmeans::KMeans::new(spec)),
    })
}

/// Iteration cap for crash-free runs.
const GOLDEN_CAP: u64 = 100_000;

pub fn registry(spec: &KernelSpec) -> Result<DataObjectRegistry, WorkloadError> {
    Ok(build(spec)?.registry().clone())
}

pub fn regions(spec: &KernelSpec) -> Result<Vec<RegionInfo>, WorkloadError> {
    Ok(build(spec)?.regions().to_vec())
}

/// Crash-free reference run on the default hierarchy. Operation counts do not
/// depend on cache geometry.
pub fn golden_run(
    spec: &KernelSpec,
    plan: Option<&PersistencePlan>,
) -> Result<Golden, WorkloadError> {
    let machine = SimMachine::new(CacheConfig::desk())?;
    let opts = RunOptions {
        plan,
        ..Default::default()
    };
    match run_kernel_with(spec, machine, &opts)? {
        RunOutcome::Completed { acceptance, stats } => {
            let total = stats.total_ops.max(1) as f64;
            Ok(Golden {
                spec: spec.clone(),
                baseline_iterations: acceptance.iterations_used,
                total_ops: stats.total_ops,
                a_k: stats.regions.iter().map(|r| r.ops as f64 / total).collect(),
                regions: stats.regions,
                iteration_start_ops: stats.iteration_start_ops,
                registry: registry(spec)?,
                metric: acceptance.metric,
            })
        }
        RunOutcome::Crashed(_) => unreachable!("no crash point requested"),
    }
}

pub fn run_kernel(
    spec: &KernelSpec,
    machine: SimMachine,
    plan: Option<&PersistencePlan>,
    crash_at: Option<u64>,
) -> Result<RunOutcome, WorkloadError> {
    run_kernel_with(
        spec,
        machine,
        &RunOptions {
            plan,
            crash_at,
            checkpoint: None,
        },
    )
}

pub fn run_kernel_with(
    spec: &KernelSpec,
    machine: SimMachine,
    opts: &RunOptions<'_>,
) -> Result<RunOutcome, WorkloadError> {
    let kernel = build(spec)?;
    let mut rt = Runner::new(machine, kernel.as_ref(), opts.plan)?;
    if let Some(req) = &opts.checkpoint {
        rt.set_checkpoint(kernel.as_ref(), req)?;
    }
    rt.crash_at = opts.crash_at;

    stop_to_error(kernel.init(&mut rt), 0)?;
    rt.machine_mut().writeback_all(true);

    let result = main_loop(kernel.as_ref(), &mut rt, 1, GOLDEN_CAP);
    let (iterations, converged, metric) = match result {
        Ok(v) => v,
        Err(Stop::Crash) => {
            let info = rt.crash(kernel.registry());
            return Ok(RunOutcome::Crashed(info));
        }
        Err(other) => return Err(stop_into_error(other, rt.iteration)),
    };
    if !converged {
        return Err(WorkloadError::NoConvergence(GOLDEN_CAP));
    }
    let (passed, vmetric) = stop_to_error(kernel.verify(&mut rt, None), iterations)?;
    let stats = rt.finish();
    Ok(RunOutcome::Completed {
        acceptance: AcceptanceResult {
            passed,
            iterations_used: iterations,
            metric: if vmetric.is_nan() { metric } else { vmetric },
        },
        stats,
    })
}

/// Rebuilds the kernel on a fresh machine from a crash snapshot and runs the
/// main loop to completion or to twice the baseline iteration count.
pub fn restart_kernel(
    spec: &KernelSpec,
    golden: &Golden,
    snapshot: &MemoryImage,
    machine: SimMachine,
) -> Result<AcceptanceResult, WorkloadError> {
    let kernel = build(spec)?;
    let mut rt = Runner::new(machine, kernel.as_ref(), None)?;
    stop_to_error(kernel.init(&mut rt), 0)?;
    let registry = kernel.registry();
    let m = rt.machine_mut();
    m.writeback_all(true);
    for obj in registry.candidates() {
        m.load_from_image(snapshot, obj.base, obj.len);
    }
    m.load_from_image(snapshot, registry.iterator_addr, 8);

    let cap = 2 * golden.baseline_iterations;
    let start = match m.memory().read_u64(registry.iterator_addr) {
        Ok(it) if (1..=cap).contains(&it) => it,
        Ok(it) => {
            return Err(WorkloadError::RestartFault(format!(
                "iterator {it} out of range"
            )))
        }
        Err(e) => return Err(WorkloadError::RestartFault(e.to_string())),
    };

    let (iterations, converged, metric) = match main_loop(kernel.as_ref(), &mut rt, start, cap) {
        Ok(v) => v,
        Err(Stop::Sim(e)) => return Err(WorkloadError::RestartFault(e.to_string())),
        Err(other) => return Err(stop_into_error(other, rt.iteration)),
    };
    if !converged {
        return Ok(AcceptanceResult {
            passed: false,
            iterations_used: iterations,
            metric,
        });
    }
    let (passed, vmetric) = match kernel.verify(&mut rt, Some(golden.metric)) {
        Ok(v) => v,
        Err(Stop::Sim(e)) => return Err(WorkloadError::RestartFault(e.to_string())),
        Err(other) => return Err(stop_into_error(other, iterations)),
    };
    Ok(AcceptanceResult {
        passed,
        iterations_used: iterations,
        metric: if vmetric.is_nan() { metric } else { vmetric },
    })
}

/// Runs iterations `start..=cap`, persisting the next iteration number after
/// each one. Returns `(last iteration, converged, metric)`.
fn main_loop(
    kernel: &dyn Kernel,
    rt: &mut Runner,
    start: u64,
    cap: u64,
) -> Result<(u64, bool, f64), Stop> {
    rt.in_window = true;
    let mut it = start;
    let mut metric = f64::NAN;
    loop {
        rt.begin_iteration(it);
        rt.maybe_checkpoint()?;
        let step = kernel.iterate(rt)?;
        rt.persist_iterator(it + 1)?;
        metric = if step.metric.is_nan() {
            metric
        } else {
            step.metric
        };
        if step.diverged {
            return Err(Stop::Diverged {
                iteration: it,
                metric: step.metric,
            });
        }
        if step.converged {
            rt.in_window = false;
            return Ok((it, true, metric));
        }
        if it >= cap {
            rt.in_window = false;
            return Ok((it, false, metric));
        }
        it += 1;
    }
}

fn stop_into_error(stop: Stop, iteration: u64) -> WorkloadError {
    match stop {
        Stop::Sim(e) => WorkloadError::Sim(e),
        Stop::Diverged { iteration, metric } => WorkloadError::KernelDiverged { iteration, metric },
        Stop::Fault(msg) => WorkloadError::RestartFault(msg),
        Stop::Crash => {
            WorkloadError::RestartFault(format!("unexpected crash at iteration {iteration}"))
        }
    }
}

fn stop_to_error<T>(r: Result<T, Stop>, iteration: u64) -> Result<T, WorkloadError> {
    r.map_err(|s| stop_into_error(s, iteration))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        for k in [
            KernelName::Jacobi2d,
            KernelName::Cgsolve,
            KernelName::Kmeans,
        ] {
            assert!(KernelSpec::default_for(k).validate().is_ok());
        }
        let mut s = KernelSpec::kmeans();
        s.size = 7;
        assert!(matches!(s.validate(), Err(WorkloadError::InvalidSpec(_))));
        let mut s = KernelSpec::jacobi2d();
        s.tolerance = 0.0;
        assert!(s.validate().is_err());
        assert!(KernelSpec::from_json(
            r#"{"kernel":"jacobi2d","size":2,"tolerance":1e-6,"seed":1}"#
        )
        .is_err());
        let s = KernelSpec::from_json(r#"{"kernel":"cgsolve","size":8,"tolerance":1e-8,"seed":3}"#)
            .unwrap();
        assert_eq!(s.kernel, KernelName::Cgsolve);
    }

    #[test]
    fn layout_is_aligned_and_disjoint() {
        let mut l = Layout::new();
        let a = l.alloc("a", 100, false);
        let b = l.alloc("b", 8, true);
        let (reg, scratch) = l.finish();
        assert_eq!(a % Layout::ALIGN, 0);
        assert_eq!(b, a + Layout::ALIGN);
        assert!(reg.iterator_addr >= b + 8);
        assert!(scratch > reg.iterator_addr + 8);
        assert_eq!(reg.candidate_names(), vec!["a".to_string()]);
        assert_eq!(reg.candidate_bytes(), 100);
    }

    #[test]
    fn unknown_plan_object_is_rejected() {
        let spec = KernelSpec::jacobi2d();
        let kinds: Vec<_> = regions(&spec)
            .unwrap()
            .iter()
            .map(|r| (r.id, r.kind))
            .collect();
        let plan = PersistencePlan::everywhere(&["nope".to_string()], &kinds);
        let m = SimMachine::new(CacheConfig::desk()).unwrap();
        assert!(matches!(
            run_kernel(&spec, m, Some(&plan), None),
            Err(WorkloadError::InvalidPlan(_))
        ));
    }

    #[test]
    fn crash_at_zero_snapshots_initial_state() {
        let spec = KernelSpec::kmeans();
        let m = SimMachine::new(CacheConfig::desk()).unwrap();
        match run_kernel(&spec, m, None, Some(0)).unwrap() {
            RunOutcome::Crashed(info) => {
                assert_eq!(info.op_index, 0);
                assert_eq!(info.iteration, 1);
                assert!(info.rates.iter().all(|(_, r)| *r == 0.0));
            }
            RunOutcome::Completed { .. } => panic!("expected a crash"),
        }
    }
}
