//! Run configuration: one TOML file with a section per command, overridden
//! by command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trajdiff::evaluation::{default_statistics, StatisticConfig};
use trajdiff::model::ModelConfig;
use trajdiff::sim::SimConfig;
use trajdiff::synth::{ScenarioKind, ScenarioMix};
use trajdiff::training::TrainConfig;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Scenario dataset directory.
    pub data: Option<PathBuf>,
    /// Input checkpoint directory.
    pub checkpoint: Option<PathBuf>,
    /// Rollout directory to evaluate or render.
    pub rollouts: Option<PathBuf>,
    /// Unconditional rollouts for paired evaluation.
    pub baseline: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub count: usize,
    /// Relative weight per scenario kind; empty means uniform.
    pub mix: BTreeMap<ScenarioKind, f64>,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self { count: 1000, mix: BTreeMap::new() }
    }
}

impl GenDataConfig {
    pub fn scenario_mix(&self) -> ScenarioMix {
        if self.mix.is_empty() {
            ScenarioMix::default()
        } else {
            ScenarioMix { weights: self.mix.iter().map(|(k, w)| (*k, *w)).collect() }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub statistics: Vec<StatisticConfig>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { statistics: default_statistics() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// Scenario index within the dataset.
    pub scenario: usize,
    /// Rollout to draw; defaults to the record's selected rollout.
    pub rollout: Option<usize>,
    /// Pixels per meter.
    pub scale: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { scenario: 0, rollout: None, scale: 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    /// Scenarios per output shard file.
    pub shard_size: usize,
    pub paths: Paths,
    pub gen_data: GenDataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// `k` is the target step count.
    pub retarget: TrainConfig,
    pub closed_loop: TrainConfig,
    pub simulate: SimConfig,
    pub evaluate: EvalConfig,
    pub render: RenderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            workers: None,
            shard_size: 250,
            paths: Paths::default(),
            gen_data: GenDataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            retarget: TrainConfig { k: 5, iterations: 1000, ..TrainConfig::default() },
            closed_loop: TrainConfig::closed_loop(),
            simulate: SimConfig::default(),
            evaluate: EvalConfig::default(),
            render: RenderConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::validation(format!("config {}: {e}", path.display())))?;
        let bad = |e: &dyn std::fmt::Display| CliError::validation(format!("config {}: {e}", path.display()));
        let mut table: toml::Table = toml::from_str(&text).map_err(|e| bad(&e))?;
        // these sections default to their own presets, not TrainConfig::default()
        let retarget = table.remove("retarget");
        let closed_loop = table.remove("closed_loop");
        let mut cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e| bad(&e))?;
        if let Some(v) = retarget {
            cfg.retarget = overlay(&cfg.retarget, v).map_err(|e| bad(&e))?;
        }
        if let Some(v) = closed_loop {
            cfg.closed_loop = overlay(&cfg.closed_loop, v).map_err(|e| bad(&e))?;
        }
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p.as_mut() {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        fix(&mut cfg.paths.data);
        fix(&mut cfg.paths.checkpoint);
        fix(&mut cfg.paths.rollouts);
        fix(&mut cfg.paths.baseline);
        fix(&mut cfg.paths.out);
        Ok(cfg)
    }

    pub fn seed(&self) -> CliResult<u64> {
        self.seed.ok_or_else(|| CliError::validation("a seed is required (config `seed` or --seed)"))
    }

    pub fn workers(&self) -> CliResult<usize> {
        match self.workers {
            Some(0) => Err(CliError::validation("--workers must be positive")),
            Some(w) => Ok(w),
            None => Ok(1),
        }
    }

    pub fn shard_size(&self) -> CliResult<usize> {
        if self.shard_size == 0 {
            return Err(CliError::validation("shard_size must be positive"));
        }
        Ok(self.shard_size)
    }

    pub fn out(&self) -> CliResult<&Path> {
        self.paths.out.as_deref().ok_or_else(|| CliError::validation("an output path is required (paths.out or --out)"))
    }
}

/// `base` with the keys present in `patch` replaced.
fn overlay<T: Serialize + serde::de::DeserializeOwned>(base: &T, patch: toml::Value) -> Result<T, toml::de::Error> {
    let mut merged = toml::Value::try_from(base).map_err(|e| <toml::de::Error as serde::de::Error>::custom(e.to_string()))?;
    match (merged.as_table_mut(), patch) {
        (Some(m), toml::Value::Table(p)) => {
            for (k, v) in p {
                m.insert(k, v);
            }
        }
        _ => return Err(<toml::de::Error as serde::de::Error>::custom("expected a table")),
    }
    merged.try_into()
}

/// Existing input path or a validation error naming what is missing.
pub fn require(path: Option<&Path>, what: &str) -> CliResult<PathBuf> {
    let p = path.ok_or_else(|| CliError::validation(format!("{what} path is required")))?;
    if !p.exists() {
        return Err(CliError::validation(format!("{what} {} does not exist", p.display())));
    }
    Ok(p.to_path_buf())
}
