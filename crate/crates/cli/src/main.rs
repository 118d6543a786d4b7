mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};
use nvrecompute::crashlab::{run_campaign, CampaignConfig, CampaignResult, CampaignSummary};
use nvrecompute::effmodel::{derive_tau, sweep, sweep_csv, SWEEP_NODES, SWEEP_T_CHK};
use nvrecompute::planner::{plan_from_campaigns, select_objects};
use nvrecompute::workloads::{golden_run, Golden};
use nvrecompute::PersistencePlan;
use thiserror::Error;

use config::{read, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stale input: {0}")]
    Stale(String),
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Stale(_) => 3,
            CliError::Degenerate(_) => 4,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "nvrecompute",
    version,
    about = "Crash campaigns and persistence planning on a simulated NVM cache hierarchy"
)]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured number of crash tests.
    #[arg(long = "n-tests", global = true)]
    n_tests: Option<usize>,
    /// Worker threads for campaigns.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory for this command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Crash-free reference run; writes golden.json.
    Golden,
    /// Crash-test campaign; writes campaign.csv and summary.json.
    Campaign {
        /// Persistence plan to apply.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Reference run (default: golden.json in the configured run root).
        #[arg(long)]
        golden: Option<PathBuf>,
    },
    /// Object and region selection. With only --baseline, writes
    /// cmax_plan.json; with --cmax as well, writes plan.json.
    Plan {
        /// Directory of the campaign without persistence.
        #[arg(long)]
        baseline: PathBuf,
        /// Directory of the campaign run with cmax_plan.json.
        #[arg(long)]
        cmax: Option<PathBuf>,
        #[arg(long)]
        golden: Option<PathBuf>,
    },
    /// Efficiency sweep; writes efficiency.csv.
    Efficiency {
        /// Recomputability to evaluate.
        #[arg(long, conflicts_with = "plan")]
        r: Option<f64>,
        /// Use the predicted recomputability of this plan.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(n) = cli.n_tests {
        if n == 0 {
            return Err(CliError::Config("--n-tests must be at least 1".into()));
        }
        cfg.n_tests = n;
    }
    if cli.jobs == Some(0) {
        return Err(CliError::Config("--jobs must be at least 1".into()));
    }
    let out = cli.out.clone().unwrap_or_else(|| cfg.out.clone());
    let golden_default = cfg.out.join("golden.json");
    match cli.command {
        Command::Golden => cmd_golden(&cfg, &out),
        Command::Campaign { plan, golden } => cmd_campaign(
            &cfg,
            &out,
            golden.as_deref().unwrap_or(&golden_default),
            plan.as_deref(),
            cli.jobs,
        ),
        Command::Plan {
            baseline,
            cmax,
            golden,
        } => cmd_plan(
            &cfg,
            &out,
            golden.as_deref().unwrap_or(&golden_default),
            &baseline,
            cmax.as_deref(),
        ),
        Command::Efficiency { r, plan } => cmd_efficiency(&cfg, &out, r, plan.as_deref()),
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Failed(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

fn cmd_golden(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let g = golden_run(&cfg.spec, None).map_err(failed)?;
    info!(
        "{}: {} iterations, {} ops",
        cfg.spec.kernel, g.baseline_iterations, g.total_ops
    );
    write(out, "golden.json", &to_json(&g))
}

/// Loads the stored reference run and checks it against a fresh one.
fn load_golden(cfg: &RunConfig, path: &Path) -> Result<Golden, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Stale(format!("{}: {e} (run `golden` first)", path.display())))?;
    let stored: Golden = serde_json::from_str(&text)
        .map_err(|e| CliError::Stale(format!("{}: {e}", path.display())))?;
    if stored.spec != cfg.spec {
        return Err(CliError::Stale(format!(
            "{} was produced for a different kernel spec",
            path.display()
        )));
    }
    let fresh = golden_run(&cfg.spec, None).map_err(failed)?;
    if fresh.total_ops != stored.total_ops
        || fresh.baseline_iterations != stored.baseline_iterations
    {
        return Err(CliError::Stale(format!(
            "{}: op count {} does not match current build ({})",
            path.display(),
            stored.total_ops,
            fresh.total_ops
        )));
    }
    Ok(fresh)
}

fn load_plan(path: &Path) -> Result<PersistencePlan, CliError> {
    serde_json::from_str(&read(path)?)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn cmd_campaign(
    cfg: &RunConfig,
    out: &Path,
    golden: &Path,
    plan: Option<&Path>,
    jobs: Option<usize>,
) -> Result<(), CliError> {
    load_golden(cfg, golden)?;
    let plan = plan.map(load_plan).transpose()?;
    let campaign = CampaignConfig {
        cache: cfg.cache.clone(),
        n_tests: cfg.n_tests,
        seed: cfg.seed,
        jobs,
    };
    let result = run_campaign(&cfg.spec, plan.as_ref(), &campaign).map_err(|e| match e {
        nvrecompute::crashlab::CampaignError::Workload(
            w @ nvrecompute::workloads::WorkloadError::InvalidPlan(_),
        ) => CliError::Config(w.to_string()),
        other => failed(other),
    })?;
    info!(
        "{}: Y = {:.4} over {} tests (converged: {})",
        result.kernel, result.y, result.n_tests, result.converged
    );
    if !result.converged {
        warn!("Y has not settled; consider more tests");
    }
    write(out, "campaign.csv", &result.to_csv())?;
    write(out, "summary.json", &to_json(&result.summary()))
}

fn load_campaign(dir: &Path) -> Result<CampaignResult, CliError> {
    let summary_path = dir.join("summary.json");
    let summary: CampaignSummary = serde_json::from_str(&read(&summary_path)?)
        .map_err(|e| CliError::Config(format!("{}: {e}", summary_path.display())))?;
    let csv = read(&dir.join("campaign.csv"))?;
    CampaignResult::from_parts(summary, &csv)
        .map_err(|e| CliError::Stale(format!("{}: {e}", dir.display())))
}

fn cmd_plan(
    cfg: &RunConfig,
    out: &Path,
    golden: &Path,
    baseline_dir: &Path,
    cmax_dir: Option<&Path>,
) -> Result<(), CliError> {
    let g = load_golden(cfg, golden)?;
    let baseline = load_campaign(baseline_dir)?;
    if baseline.plan_applied {
        return Err(CliError::Stale(format!(
            "{} was run with a plan; the baseline campaign must have none",
            baseline_dir.display()
        )));
    }
    if baseline.kernel != cfg.spec.kernel.to_string() || baseline.golden_total_ops != g.total_ops {
        return Err(CliError::Stale(format!(
            "{} does not belong to the current reference run",
            baseline_dir.display()
        )));
    }
    let report = select_objects(&baseline, cfg.planner.p_threshold).map_err(failed)?;
    if report.degenerate {
        let outcome = baseline
            .records
            .first()
            .map(|r| r.outcome.to_string())
            .unwrap_or_default();
        return Err(CliError::Degenerate(format!(
            "all {} tests in {} ended in {outcome}; rank correlation is undefined",
            baseline.n_tests,
            baseline_dir.display()
        )));
    }
    for o in &report.objects {
        info!(
            "{:<12} rho {:+.4} p {:.3e}{}",
            o.name,
            o.rho,
            o.p_value,
            if o.selected { "  selected" } else { "" }
        );
    }

    let Some(cmax_dir) = cmax_dir else {
        let mut plan = PersistencePlan::everywhere(&report.selected(), &g.region_kinds());
        plan.correlations = report.objects.clone();
        plan.predicted_y_prime = baseline.y;
        plan.notes
            .push("measurement plan: selected objects at every region and inner iteration".into());
        return write(out, "cmax_plan.json", &to_json(&plan));
    };

    let cmax = load_campaign(cmax_dir)?;
    if !cmax.plan_applied && !report.selected().is_empty() {
        return Err(CliError::Stale(format!(
            "{} was run without cmax_plan.json",
            cmax_dir.display()
        )));
    }
    if cmax.kernel != baseline.kernel || cmax.regions != baseline.regions {
        return Err(CliError::Stale(format!(
            "{} and {} come from different kernels",
            baseline_dir.display(),
            cmax_dir.display()
        )));
    }
    let tau = derive_tau(&cfg.efficiency_params(0.0)?);
    let mut plan = plan_from_campaigns(&g, &baseline, &cmax, &report, &cfg.planner, tau.tau)
        .map_err(failed)?;
    if !tau.feasible {
        plan.notes.push(
            "no recomputability below 1 beats plain checkpointing at these parameters".into(),
        );
    }
    info!(
        "predicted Y' {:.4}, loss {:.4} (tau {:.4}, feasible: {})",
        plan.predicted_y_prime, plan.predicted_loss, tau.tau, plan.feasible
    );
    write(out, "plan.json", &to_json(&plan))
}

fn cmd_efficiency(
    cfg: &RunConfig,
    out: &Path,
    r: Option<f64>,
    plan: Option<&Path>,
) -> Result<(), CliError> {
    let r = match (r, plan) {
        (Some(r), _) => r,
        (None, Some(p)) => load_plan(p)?.predicted_y_prime,
        (None, None) => cfg.efficiency.r,
    };
    if !(0.0..1.0).contains(&r) {
        return Err(CliError::Config(format!("R must lie in [0, 1), got {r}")));
    }
    let template = cfg.efficiency_params(r)?;
    let rows = sweep(&template, &SWEEP_T_CHK, &SWEEP_NODES)
        .map_err(|e| CliError::Config(e.to_string()))?;
    write(out, "efficiency.csv", &sweep_csv(&rows))
}
