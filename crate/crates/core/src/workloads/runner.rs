use crate::plan::{Frequency, PersistencePlan};
use crate::simcache::{Addr, FlushKind, SimError, SimMachine};

use super::{
    CheckpointRequest, CrashInfo, DataObjectRegistry, Kernel, RegionKind, RegionStats, RunStats,
    WorkloadError,
};

/// Early exit from a kernel body.
#[derive(Debug)]
pub(crate) enum Stop {
    Crash,
    Sim(SimError),
    Diverged {
        iteration: u64,
        metric: f64,
    },
    /// Data read from memory is unusable (e.g. an out-of-range index).
    Fault(String),
}

impl From<SimError> for Stop {
    fn from(e: SimError) -> Self {
        Stop::Sim(e)
    }
}

struct Checkpoint {
    at_iteration: u64,
    sources: Vec<(Addr, u64)>,
    dest: Addr,
    done: bool,
}

/// Executes kernel operations on a machine while tracking the crash window,
/// region markers and planned persistence.
pub(crate) struct Runner {
    m: SimMachine,
    pub in_window: bool,
    pub crash_at: Option<u64>,
    pub iteration: u64,
    ops: u64,
    region: usize,
    inner: u64,
    names: Vec<String>,
    kinds: Vec<RegionKind>,
    region_ops: Vec<u64>,
    visits: Vec<u64>,
    trips: Vec<u64>,
    iteration_starts: Vec<u64>,
    freqs: Vec<Frequency>,
    critical: Vec<(Addr, u64)>,
    iterator_addr: Addr,
    flush_writes: u64,
    persistence_ops: u64,
    max_persist_writes: u64,
    checkpoint: Option<Checkpoint>,
    checkpoint_writes: u64,
}

impl Runner {
    pub(crate) fn new(
        m: SimMachine,
        kernel: &dyn Kernel,
        plan: Option<&PersistencePlan>,
    ) -> Result<Self, WorkloadError> {
        let regions = kernel.regions();
        let registry = kernel.registry();
        let n = regions.len();
        let mut critical = Vec::new();
        let mut freqs = vec![Frequency::Never; n];
        if let Some(plan) = plan {
            for name in &plan.critical_objects {
                let obj = registry.get(name).ok_or_else(|| {
                    WorkloadError::InvalidPlan(format!("unknown data object '{name}'"))
                })?;
                critical.push((obj.base, obj.len));
            }
            for choice in &plan.regions {
                if choice.region_id >= n {
                    return Err(WorkloadError::InvalidPlan(format!(
                        "unknown region {}",
                        choice.region_id
                    )));
                }
                freqs[choice.region_id] = choice.frequency;
            }
        }
        Ok(Self {
            m,
            in_window: false,
            crash_at: None,
            iteration: 0,
            ops: 0,
            region: 0,
            inner: 0,
            names: regions.iter().map(|r| r.name.clone()).collect(),
            kinds: regions.iter().map(|r| r.kind).collect(),
            region_ops: vec![0; n],
            visits: vec![0; n],
            trips: vec![0; n],
            iteration_starts: Vec::new(),
            freqs,
            critical,
            iterator_addr: registry.iterator_addr,
            flush_writes: 0,
            persistence_ops: 0,
            max_persist_writes: 0,
            checkpoint: None,
            checkpoint_writes: 0,
        })
    }

    pub(crate) fn set_checkpoint(
        &mut self,
        kernel: &dyn Kernel,
        req: &CheckpointRequest,
    ) -> Result<(), WorkloadError> {
        let registry = kernel.registry();
        let sources = req
            .objects
            .iter()
            .map(|name| {
                registry.get(name).map(|o| (o.base, o.len)).ok_or_else(|| {
                    WorkloadError::InvalidPlan(format!("unknown data object '{name}'"))
                })
            })
            .collect::<Result<_, _>>()?;
        self.checkpoint = Some(Checkpoint {
            at_iteration: req.at_iteration,
            sources,
            dest: kernel.scratch_base(),
            done: false,
        });
        Ok(())
    }

    pub(crate) fn machine_mut(&mut self) -> &mut SimMachine {
        &mut self.m
    }

    #[inline]
    fn step(&mut self) -> Result<(), Stop> {
        if self.in_window {
            if self.crash_at == Some(self.ops) {
                return Err(Stop::Crash);
            }
            self.ops += 1;
            self.region_ops[self.region] += 1;
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn rd(&mut self, addr: Addr) -> Result<f64, Stop> {
        self.step()?;
        Ok(self.m.read_f64(addr)?)
    }

    #[inline]
    pub(crate) fn wr(&mut self, addr: Addr, v: f64) -> Result<(), Stop> {
        self.step()?;
        Ok(self.m.write_f64(addr, v)?)
    }

    #[inline]
    pub(crate) fn rd_u64(&mut self, addr: Addr) -> Result<u64, Stop> {
        self.step()?;
        Ok(self.m.read_u64(addr)?)
    }

    #[inline]
    pub(crate) fn wr_u64(&mut self, addr: Addr, v: u64) -> Result<(), Stop> {
        self.step()?;
        Ok(self.m.write_u64(addr, v)?)
    }

    /// Marks the start of a visit to `region`.
    pub(crate) fn enter(&mut self, region: usize) {
        self.region = region;
        self.inner = 0;
        if self.in_window {
            self.visits[region] += 1;
        }
    }

    /// Marks the end of one inner-loop iteration of the current region.
    /// `Every(x)` persists after iterations 0, x, 2x, ... of each visit.
    pub(crate) fn inner_end(&mut self) -> Result<(), Stop> {
        let done = self.inner;
        self.inner += 1;
        if self.in_window {
            self.trips[self.region] += 1;
        }
        if let Frequency::Every(x) = self.freqs[self.region] {
            if self.kinds[self.region] == RegionKind::Loop && done.is_multiple_of(x as u64) {
                self.persist()?;
            }
        }
        Ok(())
    }

    /// Marks the end of the current region's visit.
    pub(crate) fn exit(&mut self) -> Result<(), Stop> {
        let persist = match self.freqs[self.region] {
            Frequency::EveryVisit => true,
            Frequency::Every(_) => self.kinds[self.region] == RegionKind::Straight,
            Frequency::Never => false,
        };
        if persist {
            self.persist()?;
        }
        Ok(())
    }

    /// One persistence operation: flush every line of every critical object.
    fn persist(&mut self) -> Result<(), Stop> {
        if self.critical.is_empty() {
            return Ok(());
        }
        let ls = self.m.line_size() as u64;
        let mut writes = 0;
        for i in 0..self.critical.len() {
            let (base, len) = self.critical[i];
            let first = base / ls;
            let last = (base + len - 1) / ls;
            for line in first..=last {
                self.step()?;
                writes += self.m.flush_line(line * ls, FlushKind::FlushOpt);
            }
        }
        self.flush_writes += writes;
        self.persistence_ops += 1;
        self.max_persist_writes = self.max_persist_writes.max(writes);
        Ok(())
    }

    pub(crate) fn begin_iteration(&mut self, it: u64) {
        self.iteration = it;
        self.iteration_starts.push(self.ops);
    }

    /// Stores and writes back the number of the next iteration to run. The
    /// store and its write-back form one atomic operation.
    pub(crate) fn persist_iterator(&mut self, next: u64) -> Result<(), Stop> {
        self.step()?;
        self.m.write_u64(self.iterator_addr, next)?;
        self.m
            .flush_line(self.iterator_addr, FlushKind::WritebackNoInv);
        Ok(())
    }

    /// Copies the checkpoint set to a scratch buffer and flushes the copy, if
    /// a checkpoint is due this iteration. Not part of the crash window.
    pub(crate) fn maybe_checkpoint(&mut self) -> Result<(), Stop> {
        let Some(chk) = self.checkpoint.as_mut() else {
            return Ok(());
        };
        if chk.done || chk.at_iteration != self.iteration {
            return Ok(());
        }
        chk.done = true;
        let sources = chk.sources.clone();
        let dest = chk.dest;
        let before = self.m.nvm_write_count();
        let mut off = 0;
        for (base, len) in sources {
            let mut buf = [0u8; 8];
            let mut i = 0;
            while i < len {
                let n = (len - i).min(8) as usize;
                self.m.read_into(base + i, &mut buf[..n])?;
                self.m.write(dest + off + i, &buf[..n])?;
                i += n as u64;
            }
            off += len;
        }
        self.m.flush_range(dest, off, FlushKind::FlushOpt);
        self.checkpoint_writes += self.m.nvm_write_count() - before;
        Ok(())
    }

    pub(crate) fn crash(self, registry: &DataObjectRegistry) -> CrashInfo {
        let rates = registry
            .candidates()
            .map(|o| (o.name.clone(), self.m.inconsistent_rate(o.base, o.len)))
            .collect();
        CrashInfo {
            op_index: self.ops,
            region_id: self.region,
            iteration: self.iteration,
            rates,
            snapshot: self.m.crash_snapshot(),
        }
    }

    pub(crate) fn finish(mut self) -> RunStats {
        self.m.writeback_all(false);
        let regions = (0..self.names.len())
            .map(|i| RegionStats {
                id: i,
                name: self.names[i].clone(),
                kind: self.kinds[i],
                ops: self.region_ops[i],
                visits: self.visits[i],
                trip_count: self.trips[i],
            })
            .collect();
        RunStats {
            total_ops: self.ops,
            regions,
            iteration_start_ops: self.iteration_starts,
            nvm_writes: self.m.nvm_write_count(),
            flush_writes: self.flush_writes,
            persistence_ops: self.persistence_ops,
            max_writes_per_persistence: self.max_persist_writes,
            checkpoint_writes: self.checkpoint_writes,
        }
    }
}
