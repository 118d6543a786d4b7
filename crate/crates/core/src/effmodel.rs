//! System-efficiency model for checkpoint/restart with and without crash
//! recomputation.
//!
//! Total machine time is fixed; the number of checkpoint intervals is solved
//! from the time budget after subtracting failure costs. Without
//! recomputation every failure rolls back to the last checkpoint. With
//! recomputation a fraction `R` of failures resume from NVM instead, paying
//! only the restart cost `T_r'`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TEN_YEARS_S: f64 = 315_360_000.0;
pub const HOUR_S: f64 = 3600.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EffError {
    #[error("recomputability of 1 makes the failure interval unbounded")]
    PerfectRecomputability,
    #[error("invalid efficiency parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyParams {
    pub mtbf: f64,
    pub t_chk: f64,
    pub t_r: f64,
    pub t_sync: f64,
    pub total_time: f64,
    /// Fraction of failures that recompute from NVM.
    pub r: f64,
    /// Runtime overhead of persistence as a fraction of compute.
    pub t_s: f64,
    /// Restart time when recomputing from NVM.
    pub t_r_prime: f64,
    pub nodes: u64,
}

impl EfficiencyParams {
    /// Defaults: `T_r = T_chk`, `T_sync = T_chk / 2`, ten years of system
    /// time, 100k nodes, and `T_r'` for 64 GB of non-read-only data read at
    /// 100 GB/s.
    pub fn new(mtbf: f64, t_chk: f64) -> Self {
        Self {
            mtbf,
            t_chk,
            t_r: t_chk,
            t_sync: 0.5 * t_chk,
            total_time: TEN_YEARS_S,
            r: 0.0,
            t_s: 0.0,
            t_r_prime: t_r_prime_estimate(64e9, 100e9),
            nodes: 100_000,
        }
    }

    pub fn with_recompute(mut self, r: f64, t_s: f64) -> Self {
        self.r = r;
        self.t_s = t_s;
        self
    }

    pub fn validate(&self) -> Result<(), EffError> {
        let positive = [("MTBF", self.mtbf), ("total_time", self.total_time)];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(EffError::InvalidParams(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        let non_negative = [
            ("T_chk", self.t_chk),
            ("T_r", self.t_r),
            ("T_sync", self.t_sync),
            ("T_r'", self.t_r_prime),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(EffError::InvalidParams(format!(
                    "{name} must be >= 0, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.r) {
            return Err(EffError::InvalidParams(format!(
                "R must lie in [0, 1], got {}",
                self.r
            )));
        }
        if !(0.0..1.0).contains(&self.t_s) {
            return Err(EffError::InvalidParams(format!(
                "t_s must lie in [0, 1), got {}",
                self.t_s
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyResult {
    /// Checkpoint interval.
    pub t: f64,
    /// Number of checkpoint intervals.
    pub n: f64,
    /// Failures over the whole run.
    pub m: f64,
    /// Failures that roll back to a checkpoint.
    pub m_rollback: f64,
    /// Failures that recompute from NVM.
    pub m_recompute: f64,
    /// Computation lost per rollback.
    pub t_vain: f64,
    pub useful_time: f64,
    pub efficiency: f64,
    /// Failure costs exceed the total time; efficiency is clamped to 0.
    pub thrashing: bool,
}

/// Young's checkpoint interval `sqrt(2 T_chk MTBF)`.
pub fn young_interval(t_chk: f64, mtbf: f64) -> f64 {
    (2.0 * t_chk * mtbf).sqrt()
}

/// Effective MTBF seen by checkpointing when a fraction `r` of failures
/// recompute instead of rolling back.
pub fn mtbf_with_easycrash(mtbf: f64, r: f64) -> Result<f64, EffError> {
    if r >= 1.0 {
        return Err(EffError::PerfectRecomputability);
    }
    Ok(mtbf / (1.0 - r))
}

pub fn t_r_prime_estimate(non_readonly_bytes: f64, nvm_bandwidth_bytes_per_s: f64) -> f64 {
    assert!(
        nvm_bandwidth_bytes_per_s > 0.0,
        "bandwidth must be positive"
    );
    non_readonly_bytes / nvm_bandwidth_bytes_per_s
}

/// MTBF of a system with `nodes` nodes, scaled inversely from a reference.
pub fn mtbf_scaled(base_mtbf: f64, base_nodes: u64, nodes: u64) -> f64 {
    base_mtbf * base_nodes as f64 / nodes as f64
}

fn solve(t: f64, lost: f64, t_chk: f64, total: f64, drain: f64) -> (f64, f64, f64, bool) {
    let n = (total - lost) / (t + t_chk);
    if n <= 0.0 || !n.is_finite() {
        return (0.0, 0.0, 0.0, true);
    }
    let useful = n * t * (1.0 - drain);
    (n, useful, (useful / total).clamp(0.0, 1.0), false)
}

/// Plain checkpoint/restart.
pub fn baseline_efficiency(p: &EfficiencyParams) -> EfficiencyResult {
    let t = young_interval(p.t_chk, p.mtbf);
    let m = p.total_time / p.mtbf;
    let t_vain = t / 2.0;
    let lost = m * (t_vain + p.t_r + p.t_sync);
    let (n, useful_time, efficiency, thrashing) = solve(t, lost, p.t_chk, p.total_time, 0.0);
    EfficiencyResult {
        t,
        n,
        m,
        m_rollback: m,
        m_recompute: 0.0,
        t_vain,
        useful_time,
        efficiency,
        thrashing,
    }
}

/// Checkpoint/restart where a fraction `R` of failures recompute from NVM.
pub fn easycrash_efficiency(p: &EfficiencyParams) -> Result<EfficiencyResult, EffError> {
    let t = young_interval(p.t_chk, mtbf_with_easycrash(p.mtbf, p.r)?);
    let m = p.total_time / p.mtbf;
    let m_rollback = m * (1.0 - p.r);
    let m_recompute = m * p.r;
    let t_vain = t / 2.0;
    let lost = m_rollback * (t_vain + p.t_r + p.t_sync) + m_recompute * (p.t_r_prime + p.t_sync);
    let (n, useful_time, efficiency, thrashing) = solve(t, lost, p.t_chk, p.total_time, p.t_s);
    Ok(EfficiencyResult {
        t,
        n,
        m,
        m_rollback,
        m_recompute,
        t_vain,
        useful_time,
        efficiency,
        thrashing,
    })
}

/// Relative efficiency gain `(eff' - eff) / eff`.
pub fn improvement(p: &EfficiencyParams) -> Result<f64, EffError> {
    let base = baseline_efficiency(p).efficiency;
    let ec = easycrash_efficiency(p)?.efficiency;
    Ok((ec - base) / base)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tau {
    pub tau: f64,
    /// False when no `R < 1` beats plain checkpointing; `tau` is then 1.
    pub feasible: bool,
}

pub const TAU_TOLERANCE: f64 = 1e-6;

/// Smallest recomputability at which recomputation matches plain
/// checkpointing, by bisection. `p.r` is ignored.
pub fn derive_tau(p: &EfficiencyParams) -> Tau {
    let base = baseline_efficiency(p).efficiency;
    let gap = |r: f64| {
        let q = EfficiencyParams { r, ..*p };
        easycrash_efficiency(&q).expect("r < 1").efficiency - base
    };
    if gap(0.0) >= 0.0 {
        return Tau {
            tau: 0.0,
            feasible: true,
        };
    }
    let mut hi = 1.0 - 1e-12;
    if gap(hi) < 0.0 {
        return Tau {
            tau: 1.0,
            feasible: false,
        };
    }
    let mut lo = 0.0;
    while hi - lo > TAU_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if gap(mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Tau {
        tau: hi,
        feasible: true,
    }
}

/// One row of an efficiency sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "T_chk")]
    pub t_chk: f64,
    #[serde(rename = "MTBF")]
    pub mtbf: f64,
    pub nodes: u64,
    #[serde(rename = "R")]
    pub r: f64,
    pub t_s: f64,
    pub eff_baseline: f64,
    pub eff_easycrash: f64,
    pub improvement: f64,
    pub tau: f64,
}

pub const SWEEP_T_CHK: [f64; 3] = [32.0, 320.0, 3200.0];
pub const SWEEP_NODES: [u64; 3] = [100_000, 200_000, 400_000];
pub const BASE_NODES: u64 = 100_000;
pub const BASE_MTBF: f64 = 12.0 * HOUR_S;

/// Sweeps `T_chk` and node count around `template` (whose `mtbf` is the
/// MTBF at [`BASE_NODES`]).
pub fn sweep(
    template: &EfficiencyParams,
    t_chks: &[f64],
    nodes: &[u64],
) -> Result<Vec<SweepRow>, EffError> {
    let mut rows = Vec::new();
    for &n in nodes {
        for &t_chk in t_chks {
            let p = EfficiencyParams {
                mtbf: mtbf_scaled(template.mtbf, BASE_NODES, n),
                t_chk,
                t_r: t_chk,
                t_sync: 0.5 * t_chk,
                nodes: n,
                ..*template
            };
            p.validate()?;
            let base = baseline_efficiency(&p).efficiency;
            let ec = easycrash_efficiency(&p)?.efficiency;
            rows.push(SweepRow {
                t_chk,
                mtbf: p.mtbf,
                nodes: n,
                r: p.r,
                t_s: p.t_s,
                eff_baseline: base,
                eff_easycrash: ec,
                improvement: (ec - base) / base,
                tau: derive_tau(&p).tau,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out =
        String::from("T_chk,MTBF,nodes,R,t_s,eff_baseline,eff_easycrash,improvement,tau\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.t_chk,
            r.mtbf,
            r.nodes,
            r.r,
            r.t_s,
            r.eff_baseline,
            r.eff_easycrash,
            r.improvement,
            r.tau
        ));
    }
    out
}
