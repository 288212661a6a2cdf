//! On-disk formats. Datasets and rollouts are directories of JSONL shards
//! plus a `manifest.json`; checkpoints are directories holding the binary
//! weights, a JSON description and the loss log. Every record carries a
//! schema version.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use trajdiff::evaluation::MetricReport;
use trajdiff::model::{DenoiserParams, ModelConfig};
use trajdiff::sim::{SimConfig, SimMode, SimRollout};
use trajdiff::synth::{Scenario, ScenarioKind};
use trajdiff::training::{LossRecord, TrainConfig};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";
pub const CHECKPOINT_META: &str = "checkpoint.json";
pub const LOSS_LOG: &str = "loss.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Units {
    pub position: String,
    pub heading: String,
    pub speed: String,
    pub accel: String,
    pub yaw_rate: String,
    pub time: String,
    pub length: String,
}

impl Default for Units {
    fn default() -> Self {
        Self {
            position: "m".into(),
            heading: "rad".into(),
            speed: "m/s".into(),
            accel: "m/s^2".into(),
            yaw_rate: "rad/s".into(),
            time: "s".into(),
            length: "m".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub schema_version: u32,
    pub index: usize,
    pub units: Units,
    pub scenario: Scenario,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shard {
    pub file: String,
    pub first_index: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub count: usize,
    pub mix: BTreeMap<ScenarioKind, f64>,
    pub kind_counts: BTreeMap<ScenarioKind, usize>,
    /// Scenarios carrying at least one interaction label of each kind.
    pub label_histogram: BTreeMap<String, usize>,
    pub seeds: Vec<u64>,
    pub shards: Vec<Shard>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Openloop,
    Retarget,
    ClosedLoop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceInfo {
    pub stage: Stage,
    pub k: usize,
    pub forced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub stage: Stage,
    /// Diffusion steps the weights are trained for.
    pub k: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data_count: usize,
    pub skipped_steps: u64,
    pub final_loss: Option<f64>,
    pub source: Option<SourceInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub schema_version: u32,
    pub scenario_index: usize,
    pub scenario_seed: u64,
    /// Retained closed-loop rollouts; each keeps the per-replan candidate
    /// costs and the candidate it executed.
    pub rollouts: Vec<SimRollout>,
    /// Non-collision loss of each executed rollout.
    pub costs: Vec<f64>,
    pub selected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutManifest {
    pub schema_version: u32,
    pub mode: SimMode,
    pub k: usize,
    pub checkpoint_stage: Stage,
    pub seed: u64,
    pub dataset_seed: u64,
    pub scenario_count: usize,
    pub sim: SimConfig,
    pub shards: Vec<Shard>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paired {
    pub uncond_min_ade: f64,
    pub cond_min_ade: f64,
    /// `uncond − cond`; positive when conditioning helps.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub schema_version: u32,
    pub mode: SimMode,
    pub report: MetricReport,
    pub paired: Option<Paired>,
}

pub fn shard_name(prefix: &str, i: usize) -> String {
    format!("{prefix}-{i:05}.jsonl")
}

pub fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, items: impl IntoIterator<Item = &'a T>) -> CliResult<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let f = File::open(path).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CliError::validation(format!("{}:{}: {e}", path.display(), n + 1)))?);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

fn check_schema(v: u32, what: &Path) -> CliResult<()> {
    if v != SCHEMA_VERSION {
        return Err(CliError::validation(format!("{}: schema version {v}, expected {SCHEMA_VERSION}", what.display())));
    }
    Ok(())
}

/// Splits `0..n` into consecutive shards of at most `size`.
pub fn shard_ranges(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let size = size.max(1);
    (0..n.div_ceil(size)).map(|i| i * size..((i + 1) * size).min(n)).collect()
}

pub fn load_dataset(dir: &Path) -> CliResult<(DatasetManifest, Vec<Scenario>)> {
    let mpath = dir.join(MANIFEST);
    if !mpath.exists() {
        return Err(CliError::validation(format!("{} is not a scenario dataset (no {MANIFEST})", dir.display())));
    }
    let manifest: DatasetManifest = read_json(&mpath)?;
    check_schema(manifest.schema_version, &mpath)?;
    let mut out = Vec::with_capacity(manifest.count);
    for sh in &manifest.shards {
        let path = dir.join(&sh.file);
        let recs: Vec<ScenarioRecord> = read_jsonl(&path)?;
        if recs.len() != sh.count {
            return Err(CliError::validation(format!("{}: {} records, manifest says {}", path.display(), recs.len(), sh.count)));
        }
        for r in recs {
            check_schema(r.schema_version, &path)?;
            if r.index != out.len() {
                return Err(CliError::validation(format!("{}: record {} out of order", path.display(), r.index)));
            }
            out.push(r.scenario);
        }
    }
    if out.len() != manifest.count {
        return Err(CliError::validation(format!("{}: {} scenarios, manifest says {}", dir.display(), out.len(), manifest.count)));
    }
    Ok((manifest, out))
}

pub fn write_checkpoint(dir: &Path, params: &DenoiserParams, meta: &CheckpointMeta, curve: &[LossRecord]) -> CliResult<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join(WEIGHTS))?);
    params.write_to(&mut w)?;
    w.flush()?;
    write_json(&dir.join(CHECKPOINT_META), meta)?;
    write_jsonl(&dir.join(LOSS_LOG), curve)
}

pub fn read_checkpoint(dir: &Path) -> CliResult<(DenoiserParams, CheckpointMeta)> {
    let mpath = dir.join(CHECKPOINT_META);
    let wpath = dir.join(WEIGHTS);
    if !mpath.exists() || !wpath.exists() {
        return Err(CliError::validation(format!("{} is not a checkpoint (needs {CHECKPOINT_META} and {WEIGHTS})", dir.display())));
    }
    let meta: CheckpointMeta = read_json(&mpath)?;
    check_schema(meta.schema_version, &mpath)?;
    let mut r = BufReader::new(File::open(&wpath)?);
    let params = DenoiserParams::read_from(&mut r).map_err(|e| CliError::runtime(format!("{}: {e}", wpath.display())))?;
    if params.config != meta.model {
        return Err(CliError::validation(format!("{}: weights do not match the recorded model config", dir.display())));
    }
    Ok((params, meta))
}

pub fn load_rollouts(dir: &Path) -> CliResult<(RolloutManifest, Vec<RolloutRecord>)> {
    let mpath = dir.join(MANIFEST);
    if !mpath.exists() {
        return Err(CliError::validation(format!("{} holds no rollouts (no {MANIFEST})", dir.display())));
    }
    let manifest: RolloutManifest = read_json(&mpath)?;
    check_schema(manifest.schema_version, &mpath)?;
    let mut out: Vec<RolloutRecord> = Vec::with_capacity(manifest.scenario_count);
    for sh in &manifest.shards {
        let path = dir.join(&sh.file);
        let recs: Vec<RolloutRecord> = read_jsonl(&path)?;
        if recs.len() != sh.count {
            return Err(CliError::validation(format!("{}: {} records, manifest says {}", path.display(), recs.len(), sh.count)));
        }
        for r in recs {
            check_schema(r.schema_version, &path)?;
            if r.rollouts.is_empty() || r.selected >= r.rollouts.len() || r.costs.len() != r.rollouts.len() {
                return Err(CliError::validation(format!("{}: malformed record for scenario {}", path.display(), r.scenario_index)));
            }
            out.push(r);
        }
    }
    if out.is_empty() {
        return Err(CliError::validation(format!("{} holds no rollouts", dir.display())));
    }
    if out.len() != manifest.scenario_count {
        return Err(CliError::validation(format!("{}: {} records, manifest says {}", dir.display(), out.len(), manifest.scenario_count)));
    }
    Ok((manifest, out))
}
