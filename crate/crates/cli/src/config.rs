use std::fs;
use std::path::{Path, PathBuf};

use nvrecompute::effmodel::EfficiencyParams;
use nvrecompute::planner::{CostModel, PlannerConfig};
use nvrecompute::workloads::KernelSpec;
use nvrecompute::CacheConfig;
use serde::Deserialize;

use crate::CliError;

/// On-disk run configuration. Paths are relative to the config file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    kernel: PathBuf,
    #[serde(default)]
    cache: Option<PathBuf>,
    #[serde(default = "default_seed")]
    seed: u64,
    #[serde(default = "default_n_tests")]
    n_tests: usize,
    #[serde(default = "default_t_s")]
    t_s: f64,
    #[serde(default = "default_p_threshold")]
    p_threshold: f64,
    #[serde(default)]
    cost: CostModel,
    #[serde(default)]
    efficiency: EfficiencySection,
    #[serde(default = "default_out")]
    out: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EfficiencySection {
    /// System MTBF at 100k nodes, seconds.
    pub mtbf: f64,
    /// Checkpoint cost used to derive tau, seconds.
    pub t_chk: f64,
    pub t_r_prime: Option<f64>,
    /// Recomputability for sweeps when no plan is given.
    pub r: f64,
}

impl Default for EfficiencySection {
    fn default() -> Self {
        Self {
            mtbf: nvrecompute::effmodel::BASE_MTBF,
            t_chk: 3200.0,
            t_r_prime: None,
            r: 0.82,
        }
    }
}

fn default_seed() -> u64 {
    42
}
fn default_n_tests() -> usize {
    200
}
fn default_t_s() -> f64 {
    0.03
}
fn default_p_threshold() -> f64 {
    0.01
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug)]
pub struct RunConfig {
    pub spec: KernelSpec,
    pub cache: CacheConfig,
    pub seed: u64,
    pub n_tests: usize,
    pub planner: PlannerConfig,
    pub efficiency: EfficiencySection,
    /// Run root; `golden.json` lives here.
    pub out: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = read(path)?;
        let raw: RawConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let kernel_path = dir.join(&raw.kernel);
        let spec = KernelSpec::from_json(&read(&kernel_path)?)
            .map_err(|e| CliError::Config(format!("{}: {e}", kernel_path.display())))?;
        let cache = match &raw.cache {
            Some(p) => {
                let p = dir.join(p);
                CacheConfig::from_json(&read(&p)?)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => CacheConfig::desk(),
        };
        if raw.n_tests == 0 {
            return Err(CliError::Config("n_tests must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&raw.t_s) {
            return Err(CliError::Config(format!(
                "t_s must lie in [0, 1), got {}",
                raw.t_s
            )));
        }
        if !(raw.p_threshold > 0.0 && raw.p_threshold <= 1.0) {
            return Err(CliError::Config(format!(
                "p_threshold must lie in (0, 1], got {}",
                raw.p_threshold
            )));
        }
        let planner = PlannerConfig {
            t_s: raw.t_s,
            p_threshold: raw.p_threshold,
            cost: raw.cost,
            line_size: cache.line_size,
            ..PlannerConfig::default()
        };
        Ok(Self {
            spec,
            cache,
            seed: raw.seed,
            n_tests: raw.n_tests,
            planner,
            efficiency: raw.efficiency,
            out: dir.join(raw.out),
        })
    }

    /// Efficiency parameters at the configured MTBF and checkpoint cost.
    pub fn efficiency_params(&self, r: f64) -> Result<EfficiencyParams, CliError> {
        let mut p = EfficiencyParams::new(self.efficiency.mtbf, self.efficiency.t_chk)
            .with_recompute(r, self.planner.t_s);
        if let Some(t) = self.efficiency.t_r_prime {
            p.t_r_prime = t;
        }
        p.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(p)
    }
}

pub fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}
