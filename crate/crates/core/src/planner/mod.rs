//! Persistence planning: which data objects are critical, and which code
//! regions should flush them how often, within a runtime budget.
//!
//! The workflow has four steps:
//! 1. a crash campaign without persistence ([`crate::crashlab::run_campaign`]);
//! 2. rank correlation between per-object inconsistent rates and success
//!    ([`select_objects`]);
//! 3. a campaign persisting the selected objects everywhere to bound each
//!    region's recomputability ([`measure_c_max`]), then a multiple-choice
//!    knapsack over region/frequency options ([`select_regions`]);
//! 4. a campaign with the resulting plan to measure the realized gain.

mod knapsack;
mod spearman;

pub use knapsack::{solve_mckp, Item, Selection};
pub use spearman::{average_ranks, pearson, spearman, t_approx_p_value};

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crashlab::{self, CampaignConfig, CampaignError, CampaignResult, Outcome};
use crate::plan::{Frequency, ObjectCorrelation, PersistencePlan, RegionChoice};
use crate::workloads::{Golden, KernelSpec, RegionKind, RegionStats};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlannerError {
    #[error("vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 3 samples, got {0}")]
    TooFewSamples(usize),
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("inputs do not belong together: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Cost of flushing one cache line.
    pub flush_cost_per_line: f64,
    /// Cost of one simulated operation.
    pub op_cost: f64,
    /// Safety factor on the flush estimate.
    pub doubling_factor: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            flush_cost_per_line: 1.0,
            op_cost: 1.0,
            doubling_factor: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    /// Runtime overhead budget as a fraction of total cost.
    pub t_s: f64,
    pub p_threshold: f64,
    pub cost: CostModel,
    /// Candidate persistence periods for loop regions.
    pub frequencies: Vec<u32>,
    /// Knapsack weight resolution as a fraction of total cost.
    pub grid: f64,
    pub line_size: u64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            t_s: 0.03,
            p_threshold: 0.01,
            cost: CostModel::default(),
            frequencies: vec![1, 2, 4, 8, 16],
            grid: 1e-4,
            line_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub objects: Vec<ObjectCorrelation>,
    /// All tests had the same outcome, so no correlation can be measured.
    pub degenerate: bool,
}

impl CorrelationReport {
    pub fn selected(&self) -> Vec<String> {
        self.objects
            .iter()
            .filter(|o| o.selected)
            .map(|o| o.name.clone())
            .collect()
    }
}

/// Correlates each candidate's inconsistent rate with test success (S1 = 1)
/// and selects objects with a significant negative correlation.
pub fn select_objects(
    campaign: &CampaignResult,
    p_threshold: f64,
) -> Result<CorrelationReport, PlannerError> {
    if campaign.records.len() < 3 {
        return Err(PlannerError::TooFewSamples(campaign.records.len()));
    }
    let y: Vec<f64> = campaign
        .records
        .iter()
        .map(|r| f64::from(u8::from(r.outcome == Outcome::S1)))
        .collect();
    let degenerate = y.iter().all(|&v| v == y[0]);
    if degenerate {
        warn!(
            "campaign for {} is degenerate (all outcomes identical); no object selected",
            campaign.kernel
        );
    }
    let mut objects = Vec::with_capacity(campaign.object_names.len());
    for (j, name) in campaign.object_names.iter().enumerate() {
        let x: Vec<f64> = campaign.records.iter().map(|r| r.rates[j]).collect();
        let (rho, p_value) = spearman(&x, &y)?;
        objects.push(ObjectCorrelation {
            name: name.clone(),
            rho,
            p_value,
            selected: !degenerate && rho < 0.0 && p_value < p_threshold,
        });
    }
    Ok(CorrelationReport {
        objects,
        degenerate,
    })
}

/// Linear interpolation between `c_k` (never persist) and `c_k_max`
/// (persist every iteration) for persisting every `x` iterations.
pub fn interpolate_c(c_k: f64, c_k_max: f64, x: f64) -> f64 {
    if x.is_infinite() {
        return c_k;
    }
    (c_k_max - c_k) / x + c_k
}

/// Estimated recomputability of a region under `freq`.
pub fn c_for_frequency(c_k: f64, c_k_max: f64, freq: Frequency) -> f64 {
    match freq {
        Frequency::Never => c_k,
        Frequency::EveryVisit => c_k_max,
        Frequency::Every(x) => interpolate_c(c_k, c_k_max, x as f64),
    }
}

/// Number of persistence operations a region performs under `freq` over a
/// run with the given statistics.
pub fn persistence_ops(region: &RegionStats, freq: Frequency) -> u64 {
    match freq {
        Frequency::Never => 0,
        Frequency::EveryVisit => region.visits,
        Frequency::Every(x) => match region.kind {
            RegionKind::Straight => region.visits,
            RegionKind::Loop if region.visits == 0 => 0,
            RegionKind::Loop => {
                region.visits * (region.trip_count / region.visits).div_ceil(x as u64)
            }
        },
    }
}

/// Fraction of total cost spent flushing, assuming every line of the
/// critical objects is resident and dirty at every persistence operation.
pub fn estimate_loss(lines: u64, persistence_ops: u64, cost: &CostModel, total_cost: f64) -> f64 {
    assert!(total_cost > 0.0, "total cost must be positive");
    cost.doubling_factor * cost.flush_cost_per_line * lines as f64 * persistence_ops as f64
        / total_cost
}

/// Cache lines spanned by objects `(base, len)`.
pub fn lines_spanned(objects: &[(u64, u64)], line_size: u64) -> u64 {
    objects
        .iter()
        .filter(|(_, len)| *len > 0)
        .map(|&(base, len)| (base + len - 1) / line_size - base / line_size + 1)
        .sum()
}

/// Recomputability after persistence, with each region's time share
/// stretched by its loss and renormalized.
pub fn predict_y_prime(a: &[f64], c_prime: &[f64], loss: &[f64]) -> f64 {
    let total: f64 = a.iter().zip(loss).map(|(a, l)| a + l).sum();
    a.iter()
        .zip(c_prime)
        .zip(loss)
        .map(|((a, c), l)| (a + l) / total * c)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionOption {
    pub region_id: usize,
    pub kind: RegionKind,
    pub frequency: Frequency,
    /// Loss as a fraction of total cost.
    pub loss: f64,
    /// Loss on the knapsack grid.
    pub weight: u32,
    pub c_prime: f64,
    pub value: f64,
}

/// Options per region, `Never` first.
pub fn region_options(
    golden: &Golden,
    lines: u64,
    c: &[f64],
    c_max: &[f64],
    cfg: &PlannerConfig,
) -> Vec<Vec<RegionOption>> {
    let total_cost = golden.total_ops as f64 * cfg.cost.op_cost;
    golden
        .regions
        .iter()
        .map(|region| {
            let k = region.id;
            let mut freqs = vec![Frequency::Never];
            match region.kind {
                RegionKind::Straight => freqs.push(Frequency::EveryVisit),
                RegionKind::Loop => {
                    freqs.extend(cfg.frequencies.iter().map(|&x| Frequency::Every(x)))
                }
            }
            freqs
                .into_iter()
                .filter_map(|frequency| {
                    let ops = persistence_ops(region, frequency);
                    if !frequency.is_never() && ops == 0 {
                        return None;
                    }
                    let loss = if ops == 0 {
                        0.0
                    } else {
                        estimate_loss(lines, ops, &cfg.cost, total_cost)
                    };
                    let c_prime = c_for_frequency(c[k], c_max[k], frequency);
                    Some(RegionOption {
                        region_id: k,
                        kind: region.kind,
                        frequency,
                        loss,
                        weight: (loss / cfg.grid - 1e-9).ceil().max(0.0) as u32,
                        c_prime,
                        value: golden.a_k[k] * (c_prime - c[k]),
                    })
                })
                .collect()
        })
        .collect()
}

/// Chooses one option per region maximizing the recomputability gain with
/// total loss strictly below `t_s`. The plan is feasible when the predicted
/// recomputability exceeds `tau`.
pub fn select_regions(
    options: &[Vec<RegionOption>],
    a: &[f64],
    c: &[f64],
    t_s: f64,
    tau: f64,
    grid: f64,
) -> PersistencePlan {
    let capacity = ((t_s / grid).round() as u32).saturating_sub(1);
    let groups: Vec<Vec<Item>> = options
        .iter()
        .map(|opts| {
            opts.iter()
                .map(|o| Item {
                    weight: o.weight,
                    value: o.value,
                })
                .collect()
        })
        .collect();
    let selection =
        solve_mckp(&groups, capacity).expect("every region offers a zero-weight option");
    let chosen: Vec<&RegionOption> = options
        .iter()
        .zip(&selection.choice)
        .map(|(opts, &i)| &opts[i])
        .collect();
    let mut c_prime = c.to_vec();
    let mut loss = vec![0.0; c.len()];
    for o in &chosen {
        c_prime[o.region_id] = o.c_prime;
        loss[o.region_id] = o.loss;
    }
    let y_prime = predict_y_prime(a, &c_prime, &loss);
    let predicted_loss: f64 = loss.iter().sum();
    PersistencePlan {
        critical_objects: Vec::new(),
        regions: chosen
            .iter()
            .map(|o| RegionChoice {
                region_id: o.region_id,
                kind: o.kind,
                frequency: o.frequency,
            })
            .collect(),
        predicted_y_prime: y_prime,
        predicted_loss,
        feasible: predicted_loss < t_s && y_prime > tau,
        correlations: Vec::new(),
        notes: vec![format!(
            "losses quantized to {grid} of total cost (knapsack weight {} of capacity {capacity}); tau = {tau:.6}",
            selection.weight
        )],
    }
}

/// Per-region recomputability with `None` replaced by `fallback`.
fn fill(c: &[Option<f64>], fallback: f64) -> Vec<f64> {
    c.iter().map(|v| v.unwrap_or(fallback)).collect()
}

/// `c_k^max` per region from a campaign persisting everywhere. Regions
/// without landings use that campaign's mean; values are kept `>= c_k`.
pub fn c_max_from(cmax_campaign: &CampaignResult, c: &[f64]) -> Vec<f64> {
    fill(&cmax_campaign.c_k, cmax_campaign.y)
        .into_iter()
        .zip(c)
        .map(|(m, &ck)| m.max(ck))
        .collect()
}

pub struct CMaxMeasurement {
    pub c_k: Vec<Option<f64>>,
    pub c_k_max: Vec<Option<f64>>,
    pub baseline: CampaignResult,
    pub everywhere: CampaignResult,
}

/// Runs the baseline campaign and the campaign persisting `critical` at
/// every region and every inner iteration.
pub fn measure_c_max(
    spec: &KernelSpec,
    golden: &Golden,
    critical: &[String],
    cfg: &CampaignConfig,
) -> Result<CMaxMeasurement, CampaignError> {
    let baseline = crashlab::run_campaign(spec, None, cfg)?;
    let plan = PersistencePlan::everywhere(critical, &golden.region_kinds());
    let everywhere = crashlab::run_campaign(spec, Some(&plan), cfg)?;
    Ok(CMaxMeasurement {
        c_k: baseline.c_k.clone(),
        c_k_max: everywhere.c_k.clone(),
        baseline,
        everywhere,
    })
}

/// Builds the final plan from the baseline and everywhere campaigns.
pub fn plan_from_campaigns(
    golden: &Golden,
    baseline: &CampaignResult,
    everywhere: &CampaignResult,
    report: &CorrelationReport,
    cfg: &PlannerConfig,
    tau: f64,
) -> Result<PersistencePlan, PlannerError> {
    let n = golden.regions.len();
    if baseline.c_k.len() != n || everywhere.c_k.len() != n {
        return Err(PlannerError::Mismatch(format!(
            "golden run has {n} regions, campaigns have {} and {}",
            baseline.c_k.len(),
            everywhere.c_k.len()
        )));
    }
    let critical = report.selected();
    let c = baseline.c_k_or_mean();
    let mut plan = if critical.is_empty() {
        let options: Vec<Vec<RegionOption>> = region_options(golden, 0, &c, &c, cfg)
            .into_iter()
            .map(|o| o.into_iter().take(1).collect())
            .collect();
        let mut p = select_regions(&options, &golden.a_k, &c, cfg.t_s, tau, cfg.grid);
        p.notes
            .push("no critical data object selected; nothing to persist".into());
        p
    } else {
        let ranges: Vec<(u64, u64)> = critical
            .iter()
            .filter_map(|name| golden.registry.get(name).map(|o| (o.base, o.len)))
            .collect();
        let lines = lines_spanned(&ranges, cfg.line_size);
        let c_max = c_max_from(everywhere, &c);
        let options = region_options(golden, lines, &c, &c_max, cfg);
        select_regions(&options, &golden.a_k, &c, cfg.t_s, tau, cfg.grid)
    };
    if baseline.c_k.iter().any(Option::is_none) {
        plan.notes
            .push("regions without crash landings use the campaign mean Y as c_k".into());
    }
    if report.degenerate {
        plan.notes
            .push("degenerate campaign: all outcomes identical".into());
    }
    plan.critical_objects = critical;
    plan.correlations = report.objects.clone();
    Ok(plan)
}

/// Everything produced by one pass of the workflow.
pub struct PipelineResult {
    pub report: CorrelationReport,
    pub baseline: CampaignResult,
    pub everywhere: Option<CampaignResult>,
    pub plan: PersistencePlan,
}

/// Steps 1 to 3 of the workflow: campaign, object selection, `c_k^max`
/// measurement and region selection.
pub fn run_pipeline(
    spec: &KernelSpec,
    campaign: &CampaignConfig,
    cfg: &PlannerConfig,
    tau: f64,
) -> Result<PipelineResult, PipelineError> {
    let golden = crate::workloads::golden_run(spec, None).map_err(CampaignError::from)?;
    let baseline = crashlab::run_campaign(spec, None, campaign)?;
    let report = select_objects(&baseline, cfg.p_threshold)?;
    let critical = report.selected();
    let everywhere = if critical.is_empty() {
        None
    } else {
        let plan = PersistencePlan::everywhere(&critical, &golden.region_kinds());
        Some(crashlab::run_campaign(spec, Some(&plan), campaign)?)
    };
    let plan = plan_from_campaigns(
        &golden,
        &baseline,
        everywhere.as_ref().unwrap_or(&baseline),
        &report,
        cfg,
        tau,
    )?;
    Ok(PipelineResult {
        report,
        baseline,
        everywhere,
        plan,
    })
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Campaign(#[from] CampaignError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_endpoints() {
        assert_eq!(interpolate_c(0.2, 0.8, 1.0), 0.8);
        assert_eq!(interpolate_c(0.2, 0.8, f64::INFINITY), 0.2);
        assert!((interpolate_c(0.2, 0.8, 4.0) - 0.35).abs() < 1e-15);
        assert_eq!(c_for_frequency(0.2, 0.8, Frequency::Never), 0.2);
        assert_eq!(c_for_frequency(0.2, 0.8, Frequency::EveryVisit), 0.8);
    }

    #[test]
    fn loss_arithmetic() {
        let cost = CostModel {
            flush_cost_per_line: 50.0,
            op_cost: 1.0,
            doubling_factor: 2.0,
        };
        assert!((estimate_loss(100, 1000, &cost, 1e9) - 0.01).abs() < 1e-15);
        assert_eq!(estimate_loss(100, 0, &cost, 1e9), 0.0);
        let full = estimate_loss(10, 40, &cost, 1e6);
        assert!((estimate_loss(10, 20, &cost, 1e6) - full / 2.0).abs() < 1e-15);
    }

    #[test]
    fn persistence_op_counts() {
        let r = RegionStats {
            id: 0,
            name: "l".into(),
            kind: RegionKind::Loop,
            ops: 100,
            visits: 10,
            trip_count: 180,
        };
        assert_eq!(persistence_ops(&r, Frequency::Never), 0);
        assert_eq!(persistence_ops(&r, Frequency::Every(1)), 180);
        assert_eq!(persistence_ops(&r, Frequency::Every(2)), 90);
        assert_eq!(persistence_ops(&r, Frequency::Every(4)), 50);
        assert_eq!(persistence_ops(&r, Frequency::Every(16)), 20);
        assert_eq!(persistence_ops(&r, Frequency::Every(32)), 10);
        assert_eq!(persistence_ops(&r, Frequency::EveryVisit), 10);
    }

    #[test]
    fn y_prime_cases() {
        assert_eq!(predict_y_prime(&[0.5, 0.5], &[1.0, 0.0], &[0.0, 0.0]), 0.5);
        assert_eq!(predict_y_prime(&[0.5, 0.5], &[1.0, 1.0], &[0.0, 0.0]), 1.0);
        assert!((predict_y_prime(&[1.0], &[0.7], &[0.01]) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn spans() {
        assert_eq!(
            lines_spanned(&[(0, 128), (64, 1), (60, 8), (0, 0)], 64),
            2 + 1 + 2
        );
    }

    fn opt(
        region_id: usize,
        frequency: Frequency,
        loss: f64,
        c_prime: f64,
        value: f64,
    ) -> RegionOption {
        RegionOption {
            region_id,
            kind: RegionKind::Loop,
            frequency,
            loss,
            weight: (loss / 1e-4 - 1e-9).ceil() as u32,
            c_prime,
            value,
        }
    }

    #[test]
    fn budget_excludes_everything() {
        let options = vec![
            vec![
                opt(0, Frequency::Never, 0.0, 0.5, 0.0),
                opt(0, Frequency::Every(1), 0.05, 1.0, 0.25),
            ],
            vec![
                opt(1, Frequency::Never, 0.0, 0.5, 0.0),
                opt(1, Frequency::Every(1), 0.04, 1.0, 0.25),
            ],
        ];
        let plan = select_regions(&options, &[0.5, 0.5], &[0.5, 0.5], 0.03, 0.4, 1e-4);
        assert!(plan.regions.iter().all(|r| r.frequency == Frequency::Never));
        assert_eq!(plan.predicted_y_prime, 0.5);
        assert!(plan.feasible);
        let plan = select_regions(&options, &[0.5, 0.5], &[0.5, 0.5], 0.03, 0.6, 1e-4);
        assert!(!plan.feasible);
    }

    #[test]
    fn budget_is_strict() {
        // Exactly t_s is not allowed.
        let options = vec![vec![
            opt(0, Frequency::Never, 0.0, 0.5, 0.0),
            opt(0, Frequency::Every(1), 0.03, 1.0, 0.5),
        ]];
        let plan = select_regions(&options, &[1.0], &[0.5], 0.03, 0.0, 1e-4);
        assert_eq!(plan.regions[0].frequency, Frequency::Never);
        let options = vec![vec![
            opt(0, Frequency::Never, 0.0, 0.5, 0.0),
            opt(0, Frequency::Every(1), 0.0299, 1.0, 0.5),
        ]];
        let plan = select_regions(&options, &[1.0], &[0.5], 0.03, 0.0, 1e-4);
        assert_eq!(plan.regions[0].frequency, Frequency::Every(1));
        assert!(plan.predicted_loss < 0.03);
    }
}
