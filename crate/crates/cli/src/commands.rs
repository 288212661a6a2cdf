//! Pipeline commands. Each one validates its inputs first (exit 2) and only
//! then does work (failures exit 3).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use trajdiff::costs::{no_collision_loss, DiskSet};
use trajdiff::diffusion::{cosine_schedule, COSINE_OFFSET};
use trajdiff::evaluation::{evaluate, MetricReport, ScenarioRollouts};
use trajdiff::model::DenoiserParams;
use trajdiff::scene::Trajectory;
use trajdiff::sim::{simulate, SimMode};
use trajdiff::synth::{generate_dataset, Scenario};
use trajdiff::training::{argmin, closedloop_train, retarget_schedule, train_openloop, TrainConfig, TrainOutput};

use crate::config::{require, RunConfig};
use crate::error::{CliError, CliResult};
use crate::formats::*;
use crate::render::render_svg;

fn pool(workers: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| CliError::runtime(format!("thread pool: {e}")))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))
}

fn create_parent(file: &Path) -> CliResult<()> {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn label_key<T: serde::Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => String::from("?"),
    }
}

pub fn gen_data(cfg: &RunConfig) -> CliResult<DatasetManifest> {
    let seed = cfg.seed()?;
    let out = cfg.out()?.to_path_buf();
    let shard = cfg.shard_size()?;
    let pool = pool(cfg.workers()?)?;
    let count = cfg.gen_data.count;
    if count == 0 {
        return Err(CliError::validation("gen_data.count must be positive"));
    }
    let mix = cfg.gen_data.scenario_mix();
    mix.counts(count)?;

    let scenarios = pool.install(|| generate_dataset(count, seed, &mix)).map_err(|e| CliError::runtime(e.to_string()))?;
    create_dir(&out)?;
    let ranges = shard_ranges(count, shard);
    let shards: Vec<Shard> = pool.install(|| {
        ranges
            .par_iter()
            .enumerate()
            .map(|(i, r)| {
                let file = shard_name("scenarios", i);
                let recs: Vec<ScenarioRecord> = r
                    .clone()
                    .map(|j| ScenarioRecord { schema_version: SCHEMA_VERSION, index: j, units: Units::default(), scenario: scenarios[j].clone() })
                    .collect();
                write_jsonl(&out.join(&file), &recs)?;
                Ok(Shard { file, first_index: r.start, count: r.len() })
            })
            .collect::<CliResult<_>>()
    })?;

    let mut kind_counts = BTreeMap::new();
    let mut label_histogram = BTreeMap::new();
    for s in &scenarios {
        *kind_counts.entry(s.kind).or_insert(0) += 1;
        let kinds: BTreeSet<String> = s.interactions.iter().map(|l| label_key(&l.kind)).collect();
        for k in kinds {
            *label_histogram.entry(k).or_insert(0) += 1;
        }
    }
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        seed,
        count,
        mix: mix.weights.iter().copied().collect(),
        kind_counts,
        label_histogram,
        seeds: scenarios.iter().map(|s| s.seed).collect(),
        shards,
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

fn load_data(cfg: &RunConfig) -> CliResult<(DatasetManifest, Vec<Scenario>)> {
    let dir = require(cfg.paths.data.as_deref(), "dataset")?;
    load_dataset(&dir)
}

fn load_source(cfg: &RunConfig) -> CliResult<(DenoiserParams, CheckpointMeta)> {
    let dir = require(cfg.paths.checkpoint.as_deref(), "checkpoint")?;
    read_checkpoint(&dir)
}

fn save_trained(cfg: &RunConfig, out: &TrainOutput, stage: Stage, tc: &TrainConfig, data_count: usize, source: Option<SourceInfo>) -> CliResult<CheckpointMeta> {
    if !out.params.is_finite() {
        return Err(CliError::runtime("training diverged (non-finite parameters)"));
    }
    let meta = CheckpointMeta {
        schema_version: SCHEMA_VERSION,
        stage,
        k: tc.k,
        seed: tc.seed,
        model: out.params.config.clone(),
        train: tc.clone(),
        data_count,
        skipped_steps: out.skipped_steps,
        final_loss: out.curve.last().map(|r| r.loss),
        source,
    };
    write_checkpoint(cfg.out()?, &out.params, &meta, &out.curve)?;
    Ok(meta)
}

pub fn train(cfg: &RunConfig) -> CliResult<CheckpointMeta> {
    let tc = TrainConfig { seed: cfg.seed()?, ..cfg.train.clone() };
    cfg.out()?;
    tc.validate()?;
    cfg.model.validate()?;
    let (_, data) = load_data(cfg)?;
    let out = pool(cfg.workers()?)?.install(|| train_openloop(&data, &cfg.model, &tc)).map_err(|e| CliError::runtime(e.to_string()))?;
    save_trained(cfg, &out, Stage::Openloop, &tc, data.len(), None)
}

pub fn retarget(cfg: &RunConfig) -> CliResult<CheckpointMeta> {
    let tc = TrainConfig { seed: cfg.seed()?, ..cfg.retarget.clone() };
    cfg.out()?;
    tc.validate()?;
    let (params, src) = load_source(cfg)?;
    let (_, data) = load_data(cfg)?;
    let out = pool(cfg.workers()?)?.install(|| retarget_schedule(params, tc.k, &data, &tc)).map_err(|e| CliError::runtime(e.to_string()))?;
    save_trained(cfg, &out, Stage::Retarget, &tc, data.len(), Some(SourceInfo { stage: src.stage, k: src.k, forced: false }))
}

/// Refuses a source trained for a different step count (normally the
/// K = 100 pretraining output) unless `force` is set.
pub fn train_cl(cfg: &RunConfig, force: bool) -> CliResult<CheckpointMeta> {
    let tc = TrainConfig { seed: cfg.seed()?, ..cfg.closed_loop.clone() };
    cfg.out()?;
    tc.validate()?;
    let (params, src) = load_source(cfg)?;
    if src.k != tc.k && !force {
        return Err(CliError::validation(format!(
            "source checkpoint is trained for K={} but closed-loop training uses K={}; retarget it first or pass --force",
            src.k, tc.k
        )));
    }
    let (_, data) = load_data(cfg)?;
    let out = pool(cfg.workers()?)?.install(|| closedloop_train(params, &data, &tc)).map_err(|e| CliError::runtime(e.to_string()))?;
    save_trained(cfg, &out, Stage::ClosedLoop, &tc, data.len(), Some(SourceInfo { stage: src.stage, k: src.k, forced: src.k != tc.k }))
}

pub fn simulate_cmd(cfg: &RunConfig) -> CliResult<RolloutManifest> {
    let seed = cfg.seed()?;
    let out = cfg.out()?.to_path_buf();
    let shard = cfg.shard_size()?;
    let mut sim = cfg.simulate.clone();
    sim.sample.seed = seed;
    sim.validate()?;
    let (params, meta) = load_source(cfg)?;
    let (dm, data) = load_data(cfg)?;
    if sim.mode == SimMode::Adversarial {
        if let Some(s) = data.iter().find(|s| s.interest_pair.0 == s.interest_pair.1 || s.agent_count() < 2) {
            return Err(CliError::validation(format!("adversarial mode needs an interest pair; scenario seed {} has none", s.seed)));
        }
    }
    let sched = cosine_schedule(meta.k, COSINE_OFFSET)?;
    create_dir(&out)?;
    let ranges = shard_ranges(data.len(), shard);
    let shards: Vec<Shard> = pool(cfg.workers()?)?.install(|| {
        ranges
            .par_iter()
            .enumerate()
            .map(|(i, r)| {
                let recs = r
                    .clone()
                    .map(|j| {
                        let sc = &data[j];
                        let rollouts = simulate(&params, &sched, sc, &sim).map_err(|e| CliError::runtime(format!("scenario {j}: {e}")))?;
                        let disks: Vec<DiskSet> = sc.agent_dims.iter().map(|d| DiskSet::for_dims(*d)).collect();
                        let costs: Vec<f64> = rollouts.iter().map(|r| no_collision_loss(&r.trajectory, &disks, false)).collect();
                        let selected = argmin(&costs).unwrap_or(0);
                        Ok(RolloutRecord { schema_version: SCHEMA_VERSION, scenario_index: j, scenario_seed: sc.seed, rollouts, costs, selected })
                    })
                    .collect::<CliResult<Vec<_>>>()?;
                let file = shard_name("rollouts", i);
                write_jsonl(&out.join(&file), &recs)?;
                Ok(Shard { file, first_index: r.start, count: r.len() })
            })
            .collect::<CliResult<_>>()
    })?;
    let manifest = RolloutManifest {
        schema_version: SCHEMA_VERSION,
        mode: sim.mode,
        k: meta.k,
        checkpoint_stage: meta.stage,
        seed,
        dataset_seed: dm.seed,
        scenario_count: data.len(),
        sim,
        shards,
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

fn matched(data: &[Scenario], recs: &[RolloutRecord], dir: &Path) -> CliResult<()> {
    if recs.len() != data.len() {
        return Err(CliError::validation(format!("{}: {} rollout records for {} scenarios", dir.display(), recs.len(), data.len())));
    }
    for (j, (s, r)) in data.iter().zip(recs).enumerate() {
        if r.scenario_index != j || r.scenario_seed != s.seed {
            return Err(CliError::validation(format!("{}: record {j} belongs to a different scenario", dir.display())));
        }
    }
    Ok(())
}

fn score(cfg: &RunConfig, data: &[Scenario], recs: &[RolloutRecord]) -> CliResult<MetricReport> {
    let trajs: Vec<Vec<Trajectory>> = recs.iter().map(|r| r.rollouts.iter().map(|x| x.trajectory.clone()).collect()).collect();
    let batch: Vec<ScenarioRollouts> = data.iter().zip(&trajs).map(|(s, t)| ScenarioRollouts { scenario: s, rollouts: t, selected: None }).collect();
    Ok(evaluate(&batch, &cfg.evaluate.statistics)?)
}

/// With a baseline the run is paired: the baseline must be unconditional
/// and the evaluated run conditioned.
pub fn evaluate_cmd(cfg: &RunConfig) -> CliResult<ReportFile> {
    let out = cfg.out()?.to_path_buf();
    let rdir = require(cfg.paths.rollouts.as_deref(), "rollouts")?;
    let bdir = match cfg.paths.baseline.as_deref() {
        Some(b) => Some(require(Some(b), "baseline rollouts")?),
        None => None,
    };
    for s in &cfg.evaluate.statistics {
        s.validate()?;
    }
    let (_, data) = load_data(cfg)?;
    let (rm, recs) = load_rollouts(&rdir)?;
    matched(&data, &recs, &rdir)?;
    let base = match &bdir {
        Some(b) => {
            let (bm, brecs) = load_rollouts(b)?;
            matched(&data, &brecs, b)?;
            if bm.mode != SimMode::Uncond || rm.mode == SimMode::Uncond {
                return Err(CliError::validation("paired evaluation needs unconditional baseline rollouts and conditioned rollouts"));
            }
            Some(brecs)
        }
        None => None,
    };
    let pool = pool(cfg.workers()?)?;
    let report = pool.install(|| score(cfg, &data, &recs))?;
    let paired = match base {
        Some(b) => {
            let br = pool.install(|| score(cfg, &data, &b))?;
            Some(Paired { uncond_min_ade: br.min_ade, cond_min_ade: report.min_ade, delta: br.min_ade - report.min_ade })
        }
        None => None,
    };
    let file = ReportFile { schema_version: SCHEMA_VERSION, mode: rm.mode, report, paired };
    create_parent(&out)?;
    write_json(&out, &file)?;
    Ok(file)
}

pub fn render_cmd(cfg: &RunConfig) -> CliResult<String> {
    let out = cfg.out()?.to_path_buf();
    let rdir = match cfg.paths.rollouts.as_deref() {
        Some(r) => Some(require(Some(r), "rollouts")?),
        None => None,
    };
    if !(cfg.render.scale > 0.0 && cfg.render.scale.is_finite()) {
        return Err(CliError::validation("render.scale must be positive"));
    }
    let (_, data) = load_data(cfg)?;
    let idx = cfg.render.scenario;
    let sc = data.get(idx).ok_or_else(|| CliError::validation(format!("scenario {idx} out of range ({} scenarios)", data.len())))?;
    let traj = match rdir {
        Some(d) => {
            let (_, recs) = load_rollouts(&d)?;
            let rec = recs
                .iter()
                .find(|r| r.scenario_index == idx)
                .ok_or_else(|| CliError::validation(format!("{} has no rollouts for scenario {idx}", d.display())))?;
            if rec.scenario_seed != sc.seed {
                return Err(CliError::validation(format!("{}: rollouts for scenario {idx} belong to a different dataset", d.display())));
            }
            let r = cfg.render.rollout.unwrap_or(rec.selected);
            let ro = rec.rollouts.get(r).ok_or_else(|| CliError::validation(format!("rollout {r} out of range")))?;
            Some(ro.trajectory.clone())
        }
        None => None,
    };
    let svg = render_svg(sc, traj.as_ref(), cfg.render.scale);
    create_parent(&out)?;
    std::fs::write(&out, &svg).map_err(|e| CliError::runtime(format!("{}: {e}", out.display())))?;
    Ok(svg)
}
