//! Crash-recomputability laboratory for iterative kernels on non-volatile
//! main memory.
//!
//! - [`simcache`]: value-tracking cache hierarchy over an NVM image.
//! - [`workloads`]: restartable kernels running through the simulator.
//! - [`crashlab`]: crash campaigns, outcome classes and write accounting.
//! - [`planner`]: critical-object selection and region/frequency planning.
//! - [`effmodel`]: checkpoint/restart system-efficiency model.

pub mod crashlab;
pub mod effmodel;
pub mod plan;
pub mod planner;
pub mod simcache;
pub mod workloads;

pub use plan::{Frequency, PersistencePlan, RegionChoice};
pub use simcache::{CacheConfig, FlushKind, LevelConfig, MemoryImage, SimError, SimMachine};
