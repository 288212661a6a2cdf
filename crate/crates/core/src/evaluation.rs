//! Realism scoring in the style of the sim-agents benchmark: nine statistics
//! scored by histogram likelihood of the logged value under the sampled
//! rollouts, plus joint minADE and pairwise collision rate.
//!
//! Continuous statistics get one histogram per (agent, time index) over the
//! M rollouts; indicators are one Bernoulli per agent.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{overlaps, signed_distance, AgentDims, OrientedBox};
use crate::map::MapGraph;
use crate::scene::{wrap_angle, AgentState, Trajectory};
use crate::synth::Scenario;

pub const LAPLACE: f64 = 0.1;
pub const TTC_CAP: f64 = 10.0;
pub const TTC_STEP: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatKind {
    Continuous,
    Indicator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Kinematic,
    Interactive,
    Map,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatisticConfig {
    pub name: String,
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
    pub kind: StatKind,
    pub weight: f64,
    pub group: Group,
}

impl StatisticConfig {
    fn continuous(name: &str, lo: f64, hi: f64, bins: usize, group: Group) -> Self {
        Self { name: name.into(), bins, lo, hi, kind: StatKind::Continuous, weight: 1.0 / 9.0, group }
    }

    fn indicator(name: &str, group: Group) -> Self {
        Self { name: name.into(), bins: 2, lo: 0.0, hi: 1.0, kind: StatKind::Indicator, weight: 1.0 / 9.0, group }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) || (self.kind == StatKind::Continuous && self.bins < 2) || !(self.weight >= 0.0) {
            return Err(Error::InvalidInput(format!("bad statistic config {}", self.name)));
        }
        Ok(())
    }

    fn bin(&self, v: f64) -> usize {
        let x = v.clamp(self.lo, self.hi);
        (((x - self.lo) / (self.hi - self.lo) * self.bins as f64) as usize).min(self.bins - 1)
    }
}

/// Statistic order used throughout: kinematic (4), interactive (3), map (2).
pub fn default_statistics() -> Vec<StatisticConfig> {
    use Group::*;
    vec![
        StatisticConfig::continuous("linear_speed", 0.0, 30.0, 64, Kinematic),
        StatisticConfig::continuous("linear_accel", 0.0, 10.0, 64, Kinematic),
        StatisticConfig::continuous("angular_speed", 0.0, PI, 64, Kinematic),
        StatisticConfig::continuous("angular_accel", 0.0, 2.0 * PI, 64, Kinematic),
        StatisticConfig::continuous("nearest_distance", -5.0, 40.0, 64, Interactive),
        StatisticConfig::indicator("collision", Interactive),
        StatisticConfig::continuous("ttc", 0.0, TTC_CAP, 32, Interactive),
        StatisticConfig::continuous("road_edge_distance", -10.0, 20.0, 64, Map),
        StatisticConfig::indicator("road_departure", Map),
    ]
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KinematicSeries {
    pub linear_speed: Vec<f64>,
    pub linear_accel: Vec<f64>,
    pub angular_speed: Vec<f64>,
    pub angular_accel: Vec<f64>,
}

/// Finite differences of positions and headings. Speeds need two states,
/// accelerations three; shorter inputs give empty series.
pub fn kinematic_stats(states: &[AgentState], dt: f64) -> KinematicSeries {
    let speed: Vec<f64> = states.windows(2).map(|w| (w[1].x - w[0].x).hypot(w[1].y - w[0].y) / dt).collect();
    let yaw: Vec<f64> = states.windows(2).map(|w| wrap_angle(w[1].heading - w[0].heading) / dt).collect();
    KinematicSeries {
        linear_accel: speed.windows(2).map(|w| (w[1] - w[0]).abs() / dt).collect(),
        angular_speed: yaw.iter().map(|v| v.abs()).collect(),
        angular_accel: yaw.windows(2).map(|w| (w[1] - w[0]).abs() / dt).collect(),
        linear_speed: speed,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionSeries {
    /// Signed distance to the nearest other agent, per state.
    pub nearest_distance: Vec<f64>,
    pub collided: bool,
    pub ttc: Vec<f64>,
}

/// First overlap time of `a` and `b` moving at constant velocity, on a
/// 0.1 s grid, capped at 10 s.
pub fn time_to_collision(a: &AgentState, da: AgentDims, b: &AgentState, db: AgentDims) -> f64 {
    let (va, vb) = (a.velocity(), b.velocity());
    let rel = (va[0] - vb[0]).hypot(va[1] - vb[1]);
    let reach = (da.length.hypot(da.width) + db.length.hypot(db.width)) / 2.0;
    // no overlap reachable within the cap
    if (a.x - b.x).hypot(a.y - b.y) - reach > rel * TTC_CAP {
        return TTC_CAP;
    }
    let steps = (TTC_CAP / TTC_STEP).round() as usize;
    for k in 0..=steps {
        let t = k as f64 * TTC_STEP;
        let ba = OrientedBox::new([a.x + va[0] * t, a.y + va[1] * t], a.heading, da);
        let bb = OrientedBox::new([b.x + vb[0] * t, b.y + vb[1] * t], b.heading, db);
        if overlaps(&ba, &bb) {
            return t;
        }
    }
    TTC_CAP
}

fn check_dims(dims: &[AgentDims]) -> Result<()> {
    if dims.iter().any(|d| !(d.length > 0.0 && d.width > 0.0)) {
        return Err(Error::InvalidInput("degenerate agent dimensions".into()));
    }
    Ok(())
}

pub fn interaction_stats(traj: &Trajectory, dims: &[AgentDims]) -> Result<Vec<InteractionSeries>> {
    check_dims(dims)?;
    let n = traj.agent_count();
    if dims.len() != n {
        return Err(Error::Shape(format!("{} dims for {n} agents", dims.len())));
    }
    let far = default_statistics()[4].hi;
    Ok((0..n)
        .map(|i| {
            let len = traj.states[i].len();
            let mut dist = Vec::with_capacity(len);
            let mut ttc = Vec::with_capacity(len);
            for t in 0..len {
                let si = &traj.states[i][t];
                let bi = OrientedBox::from_state(si, dims[i]);
                let (mut d, mut c) = (far, TTC_CAP);
                for j in (0..n).filter(|&j| j != i && traj.valid[j][t]) {
                    let sj = &traj.states[j][t];
                    d = d.min(signed_distance(&bi, &OrientedBox::from_state(sj, dims[j])));
                    c = c.min(time_to_collision(si, dims[i], sj, dims[j]));
                }
                dist.push(d);
                ttc.push(c);
            }
            let collided = dist.iter().zip(&traj.valid[i]).any(|(d, v)| *v && *d < 0.0);
            InteractionSeries { nearest_distance: dist, collided, ttc }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapSeries {
    pub edge_distance: Vec<f64>,
    pub departed: bool,
}

pub fn map_stats(traj: &Trajectory, map: &MapGraph) -> Vec<MapSeries> {
    (0..traj.agent_count())
        .map(|i| {
            let d: Vec<f64> = traj.states[i].iter().map(|s| map.edge_signed_distance(s.position())).collect();
            let departed = d.iter().zip(&traj.valid[i]).any(|(x, v)| *v && *x < 0.0);
            MapSeries { edge_distance: d, departed }
        })
        .collect()
}

/// Per-agent values of every default statistic (indicators as a single
/// 0/1 entry) with the state indices each entry depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentStats {
    pub values: Vec<Vec<f64>>,
    pub valid: Vec<Vec<bool>>,
}

pub fn agent_statistics(traj: &Trajectory, dims: &[AgentDims], map: &MapGraph) -> Result<Vec<AgentStats>> {
    let inter = interaction_stats(traj, dims)?;
    let maps = map_stats(traj, map);
    Ok((0..traj.agent_count())
        .map(|i| {
            let v = &traj.valid[i];
            let k = kinematic_stats(&traj.states[i], traj.dt);
            // a difference is valid when every state it touches is
            let win = |w: usize| -> Vec<bool> { v.windows(w).map(|x| x.iter().all(|b| *b)).collect() };
            let any = v.iter().any(|b| *b);
            AgentStats {
                values: vec![
                    k.linear_speed,
                    k.linear_accel,
                    k.angular_speed,
                    k.angular_accel,
                    inter[i].nearest_distance.clone(),
                    vec![inter[i].collided as u8 as f64],
                    inter[i].ttc.clone(),
                    maps[i].edge_distance.clone(),
                    vec![maps[i].departed as u8 as f64],
                ],
                valid: vec![win(2), win(3), win(2), win(3), v.clone(), vec![any], v.clone(), v.clone(), vec![any]],
            }
        })
        .collect())
}

/// `−log p(gt)` under the λ-smoothed histogram of `samples`.
pub fn histogram_nll(samples: &[f64], gt: f64, cfg: &StatisticConfig, lambda: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("histogram needs at least one sample".into()));
    }
    let m = samples.len() as f64;
    let p = match cfg.kind {
        StatKind::Continuous => {
            let b = cfg.bin(gt);
            let hits = samples.iter().filter(|s| cfg.bin(**s) == b).count() as f64;
            (hits + lambda) / (m + lambda * cfg.bins as f64)
        }
        StatKind::Indicator => {
            let g = gt >= 0.5;
            let hits = samples.iter().filter(|s| (**s >= 0.5) == g).count() as f64;
            (hits + lambda) / (m + 2.0 * lambda)
        }
    };
    Ok(-p.ln())
}

/// `exp(−mean NLL)` over the valid entries; `None` when nothing is valid.
pub fn aggregate_agent(nll: &[f64], valid: &[bool]) -> Option<f64> {
    let (mut s, mut c) = (0.0, 0usize);
    for (x, v) in nll.iter().zip(valid) {
        if *v {
            s += x;
            c += 1;
        }
    }
    (c > 0).then(|| (-s / c as f64).exp())
}

/// Mean over the agents that have a score.
pub fn aggregate_agents(scores: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = scores.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// `Σ_j w_j · mean_i m(i, j)`.
pub fn composite(per_scenario: &[Vec<f64>], weights: &[f64]) -> Result<f64> {
    let wsum: f64 = weights.iter().sum();
    if (wsum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("statistic weights sum to {wsum}")));
    }
    if per_scenario.is_empty() {
        return Err(Error::InvalidInput("no scenarios to aggregate".into()));
    }
    let n = per_scenario.len() as f64;
    Ok(weights.iter().enumerate().map(|(j, w)| w * per_scenario.iter().map(|s| s[j]).sum::<f64>() / n).sum())
}

/// Per-statistic scores `m(i, j)` of one scenario.
pub fn score_scenario(
    gt: &Trajectory,
    rollouts: &[Trajectory],
    dims: &[AgentDims],
    map: &MapGraph,
    targets: &[usize],
    stats: &[StatisticConfig],
) -> Result<Vec<f64>> {
    if rollouts.is_empty() {
        return Err(Error::InvalidInput("no rollouts to score".into()));
    }
    if stats.len() != 9 {
        return Err(Error::InvalidInput("expected the nine statistic configs".into()));
    }
    let g = agent_statistics(gt, dims, map)?;
    let r: Vec<Vec<AgentStats>> = rollouts.iter().map(|t| agent_statistics(t, dims, map)).collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(stats.len());
    for (j, cfg) in stats.iter().enumerate() {
        let mut per_agent = Vec::with_capacity(targets.len());
        for &a in targets {
            let series = &g[a].values[j];
            let mut nll = Vec::with_capacity(series.len());
            let mut valid = Vec::with_capacity(series.len());
            for (t, gv) in series.iter().enumerate() {
                let samples: Vec<f64> = r.iter().filter(|x| x[a].valid[j].get(t) == Some(&true)).map(|x| x[a].values[j][t]).collect();
                let ok = g[a].valid[j][t] && !samples.is_empty();
                nll.push(if ok { histogram_nll(&samples, *gv, cfg, LAPLACE)? } else { 0.0 });
                valid.push(ok);
            }
            per_agent.push(aggregate_agent(&nll, &valid));
        }
        out.push(aggregate_agents(&per_agent).unwrap_or(1.0));
    }
    Ok(out)
}

/// Joint minADE over `t = 1..`, with the index of the best sample (ties to
/// the lowest index).
pub fn min_ade(rollouts: &[Trajectory], gt: &Trajectory) -> Result<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (m, r) in rollouts.iter().enumerate() {
        let (mut s, mut c) = (0.0, 0usize);
        for i in 0..gt.agent_count().min(r.agent_count()) {
            let len = gt.states[i].len().min(r.states[i].len());
            for t in 1..len {
                if gt.valid[i][t] && r.valid[i][t] {
                    let (a, b) = (&r.states[i][t], &gt.states[i][t]);
                    s += (a.x - b.x).hypot(a.y - b.y);
                    c += 1;
                }
            }
        }
        if c == 0 {
            continue;
        }
        let ade = s / c as f64;
        if best.is_none_or(|(b, _)| ade < b) {
            best = Some((ade, m));
        }
    }
    best.ok_or_else(|| Error::InvalidInput("no valid steps for minADE".into()))
}

/// Whether the two agents' rectangles overlap at any jointly valid step.
pub fn pair_collides(traj: &Trajectory, pair: (usize, usize), dims: &[AgentDims]) -> bool {
    let (a, b) = pair;
    (0..traj.states[a].len()).any(|t| {
        traj.valid[a][t]
            && traj.valid[b][t]
            && overlaps(&OrientedBox::from_state(&traj.states[a][t], dims[a]), &OrientedBox::from_state(&traj.states[b][t], dims[b]))
    })
}

pub fn collision_rate(batch: &[(&Trajectory, (usize, usize), &[AgentDims])]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty rollout batch".into()));
    }
    Ok(batch.iter().filter(|(t, p, d)| pair_collides(t, *p, d)).count() as f64 / batch.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatScore {
    pub name: String,
    pub group: Group,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub statistics: Vec<StatScore>,
    pub kinematic: f64,
    pub interactive: f64,
    pub map: f64,
    pub composite: f64,
    pub min_ade: f64,
    pub collision_rate: f64,
    pub scenario_count: usize,
    pub sample_count: usize,
}

/// Rollouts of one scenario. `selected` is the rollout used for the
/// collision rate; `None` averages over all of them (closed-loop rollouts are
/// each already a selected plan).
pub struct ScenarioRollouts<'a> {
    pub scenario: &'a Scenario,
    pub rollouts: &'a [Trajectory],
    pub selected: Option<usize>,
}

/// Realism scores use the scenario's interest pair as target agents.
pub fn targets(s: &Scenario) -> Vec<usize> {
    let (a, b) = s.interest_pair;
    if a == b || s.agent_count() < 2 {
        vec![a]
    } else {
        vec![a, b]
    }
}

pub fn evaluate(batch: &[ScenarioRollouts], stats: &[StatisticConfig]) -> Result<MetricReport> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("nothing to evaluate".into()));
    }
    for s in stats {
        s.validate()?;
    }
    let per: Vec<(Vec<f64>, f64, f64)> = batch
        .par_iter()
        .map(|b| {
            let sc = b.scenario;
            if b.rollouts.is_empty() || b.selected.is_some_and(|i| i >= b.rollouts.len()) {
                return Err(Error::InvalidInput("selected rollout out of range".into()));
            }
            let scores = score_scenario(&sc.future, b.rollouts, &sc.agent_dims, &sc.map, &targets(sc), stats)?;
            let (ade, _) = min_ade(b.rollouts, &sc.future)?;
            let paired = sc.agent_count() >= 2 && sc.interest_pair.0 != sc.interest_pair.1;
            let hits = |r: &Trajectory| if paired && pair_collides(r, sc.interest_pair, &sc.agent_dims) { 1.0 } else { 0.0 };
            let hit = match b.selected {
                Some(i) => hits(&b.rollouts[i]),
                None => b.rollouts.iter().map(hits).sum::<f64>() / b.rollouts.len() as f64,
            };
            Ok((scores, ade, hit))
        })
        .collect::<Result<_>>()?;
    let weights: Vec<f64> = stats.iter().map(|s| s.weight).collect();
    let grid: Vec<Vec<f64>> = per.iter().map(|p| p.0.clone()).collect();
    let n = per.len() as f64;
    let statistics: Vec<StatScore> = stats
        .iter()
        .enumerate()
        .map(|(j, s)| StatScore { name: s.name.clone(), group: s.group, score: grid.iter().map(|g| g[j]).sum::<f64>() / n })
        .collect();
    let group = |g: Group| {
        let v: Vec<f64> = statistics.iter().filter(|s| s.group == g).map(|s| s.score).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(MetricReport {
        kinematic: group(Group::Kinematic),
        interactive: group(Group::Interactive),
        map: group(Group::Map),
        composite: composite(&grid, &weights)?,
        min_ade: per.iter().map(|p| p.1).sum::<f64>() / n,
        collision_rate: per.iter().map(|p| p.2).sum::<f64>() / n,
        scenario_count: batch.len(),
        sample_count: batch.iter().map(|b| b.rollouts.len()).sum(),
        statistics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::{build_map, Layout};
    use crate::scene::{rollout, Action};
    use proptest::prelude::*;

    fn line(v: f64, a: f64, n: usize) -> Vec<AgentState> {
        rollout(&[AgentState::new(0.0, 0.0, 0.0, v)], &[vec![Action::new(a, 0.0); n]], 0.5).unwrap().states.remove(0)
    }

    #[test]
    fn kinematic_examples() {
        let k = kinematic_stats(&line(10.0, 0.0, 6), 0.5);
        assert_eq!(k.linear_speed.len(), 6);
        assert_eq!(k.linear_accel.len(), 5);
        assert!(k.linear_speed.iter().all(|v| (v - 10.0).abs() < 1e-12));
        assert!(k.linear_accel.iter().all(|v| v.abs() < 1e-9));
        let k = kinematic_stats(&line(1.0, 2.0, 6), 0.5);
        assert!(k.linear_accel.iter().all(|v| (v - 2.0).abs() < 1e-9), "{:?}", k.linear_accel);
        let s = [AgentState::new(0.0, 0.0, 3.0, 0.0), AgentState::new(0.0, 0.0, -3.0, 0.0)];
        let k = kinematic_stats(&s, 0.5);
        assert!((k.angular_speed[0] - 2.0 * (PI - 3.0) / 0.5).abs() < 1e-12);
        assert!((k.angular_speed[0] - 0.566).abs() < 1e-3);
        assert!(kinematic_stats(&s[..1], 0.5).linear_speed.is_empty());
        assert!(k.linear_accel.is_empty());
    }

    fn pair(a: AgentState, b: AgentState) -> Trajectory {
        Trajectory { dt: 0.5, states: vec![vec![a], vec![b]], actions: vec![vec![], vec![]], valid: vec![vec![true]; 2] }
    }

    #[test]
    fn interaction_examples() {
        let d = [AgentDims::new(4.0, 2.0); 2];
        let s = interaction_stats(&pair(AgentState::new(0.0, 0.0, 0.0, 0.0), AgentState::new(0.0, 10.0, 0.0, 0.0)), &d).unwrap();
        assert!((s[0].nearest_distance[0] - 8.0).abs() < 1e-12);
        assert!(!s[0].collided);
        assert_eq!(s[0].ttc[0], TTC_CAP);
        let s = interaction_stats(&pair(AgentState::new(1.0, 1.0, 0.3, 0.0), AgentState::new(1.0, 1.0, 0.3, 0.0)), &d).unwrap();
        assert!(s[0].nearest_distance[0] < 0.0 && s[1].collided);
        // head-on at 5 m/s each, bumper gap 20 m
        let s = interaction_stats(&pair(AgentState::new(0.0, 0.0, 0.0, 5.0), AgentState::new(24.0, 0.0, PI, 5.0)), &d).unwrap();
        assert!((s[0].ttc[0] - 2.0).abs() <= 0.1 + 1e-9, "{}", s[0].ttc[0]);
        assert!(interaction_stats(&pair(AgentState::new(0.0, 0.0, 0.0, 0.0), AgentState::new(5.0, 0.0, 0.0, 0.0)), &[AgentDims { length: 0.0, width: 1.0 }; 2]).is_err());
        // lone agent: range max and capped ttc
        let one = Trajectory { dt: 0.5, states: vec![vec![AgentState::new(0.0, 0.0, 0.0, 3.0)]], actions: vec![vec![]], valid: vec![vec![true]] };
        let s = interaction_stats(&one, &d[..1]).unwrap();
        assert_eq!((s[0].nearest_distance[0], s[0].ttc[0]), (40.0, TTC_CAP));
    }

    #[test]
    fn map_examples() {
        let map = build_map(&Layout::Straight { length: 100.0, lanes: 1, width: 3.5 }).unwrap();
        let at = |y: f64| Trajectory { dt: 0.5, states: vec![vec![AgentState::new(50.0, y, 0.0, 0.0)]], actions: vec![vec![]], valid: vec![vec![true]] };
        let m = map_stats(&at(0.0), &map);
        assert!((m[0].edge_distance[0] - 1.75).abs() < 1e-9 && !m[0].departed);
        let m = map_stats(&at(-3.75), &map);
        assert!((m[0].edge_distance[0] + 2.0).abs() < 1e-9 && m[0].departed);
        // dense crossing of the right edge at y = -1.75
        let mut prev = f64::NAN;
        for k in 0..=400 {
            let y = -1.0 - k as f64 * 0.005;
            let d = map_stats(&at(y), &map)[0].edge_distance[0];
            assert!((d - (y + 1.75)).abs() < 1e-9);
            if k > 0 {
                assert!((d - prev).abs() < 0.006);
            }
            prev = d;
        }
    }

    fn cont() -> StatisticConfig {
        StatisticConfig::continuous("x", 0.0, 64.0, 64, Group::Kinematic)
    }

    #[test]
    fn histogram_examples() {
        let mut samples = vec![10.5; 10];
        samples.extend(vec![40.5; 22]);
        let nll = histogram_nll(&samples, 10.2, &cont(), LAPLACE).unwrap();
        assert!((nll - -(10.1f64 / 38.4).ln()).abs() < 1e-12);
        assert!((10.1f64 / 38.4 - 0.263_020_833).abs() < 1e-9);
        let nll = histogram_nll(&samples, 60.0, &cont(), LAPLACE).unwrap();
        assert!((nll - -(0.1f64 / 38.4).ln()).abs() < 1e-12);
        assert!(histogram_nll(&[5.5; 8], 5.5, &cont(), 1e-12).unwrap() < 1e-9);
        let ind = StatisticConfig::indicator("c", Group::Interactive);
        let nll = histogram_nll(&[1.0, 0.0, 0.0, 0.0], 1.0, &ind, LAPLACE).unwrap();
        assert!((nll - -(1.1f64 / 4.2).ln()).abs() < 1e-12);
        assert!(histogram_nll(&[], 1.0, &ind, LAPLACE).is_err());
    }

    proptest! {
        #[test]
        fn histogram_is_permutation_invariant(mut v in proptest::collection::vec(-5.0f64..70.0, 1..40), g in 0.0f64..64.0, seed in 0u64..100) {
            let a = histogram_nll(&v, g, &cont(), LAPLACE).unwrap();
            let n = v.len();
            for i in 0..n {
                v.swap(i, (i * 7 + seed as usize) % n);
            }
            prop_assert_eq!(a, histogram_nll(&v, g, &cont(), LAPLACE).unwrap());
        }

        #[test]
        fn signed_distance_symmetric_and_translation_invariant(x in -20.0f64..20.0, y in -20.0f64..20.0, h1 in -3.0f64..3.0, h2 in -3.0f64..3.0, tx in -100.0f64..100.0, ty in -100.0f64..100.0) {
            let d = AgentDims::new(4.5, 1.9);
            let a = OrientedBox::new([0.0, 0.0], h1, d);
            let b = OrientedBox::new([x, y], h2, d);
            let ab = signed_distance(&a, &b);
            prop_assert!((ab - signed_distance(&b, &a)).abs() < 1e-9);
            let a2 = OrientedBox::new([tx, ty], h1, d);
            let b2 = OrientedBox::new([x + tx, y + ty], h2, d);
            prop_assert!((ab - signed_distance(&a2, &b2)).abs() < 1e-9);
        }
    }

    #[test]
    fn aggregation_examples() {
        assert_eq!(aggregate_agent(&[0.0, 0.0], &[true, true]), Some(1.0));
        let m = aggregate_agent(&[0.0, 4f64.ln()], &[true, true]).unwrap();
        assert!((m - 0.5).abs() < 1e-12);
        assert_eq!(aggregate_agent(&[1.0], &[false]), None);
        assert_eq!(aggregate_agents(&[None, Some(0.5), Some(1.0)]), Some(0.75));
        assert!((composite(&[vec![1.0, 0.5]], &[0.5, 0.5]).unwrap() - 0.75).abs() < 1e-12);
        assert!(composite(&[vec![1.0, 0.5]], &[0.5, 0.6]).is_err());
        let w: f64 = default_statistics().iter().map(|s| s.weight).sum();
        assert!((w - 1.0).abs() < 1e-12);
    }

    fn offset(t: &Trajectory, dy: &[f64]) -> Trajectory {
        let mut o = t.clone();
        for row in o.states.iter_mut() {
            for (k, s) in row.iter_mut().enumerate() {
                if k > 0 {
                    s.y += dy[(k - 1) % dy.len()];
                }
            }
        }
        o
    }

    #[test]
    fn min_ade_examples() {
        let gt = rollout(&[AgentState::new(0.0, 0.0, 0.0, 5.0), AgentState::new(0.0, 10.0, 0.0, 5.0)], &vec![vec![Action::new(0.0, 0.0); 8]; 2], 0.5).unwrap();
        assert_eq!(min_ade(&[offset(&gt, &[1.0]), gt.clone()], &gt).unwrap(), (0.0, 1));
        assert!((min_ade(&[offset(&gt, &[1.0])], &gt).unwrap().0 - 1.0).abs() < 1e-12);
        let (v, i) = min_ade(&[offset(&gt, &[2.0]), offset(&gt, &[1.0, 3.0])], &gt).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
        assert_eq!(i, 0);
        assert!(min_ade(&[], &gt).is_err());
    }

    #[test]
    fn collision_rate_counts() {
        let d = vec![AgentDims::new(4.0, 2.0); 2];
        let free = pair(AgentState::new(0.0, 0.0, 0.0, 0.0), AgentState::new(0.0, 10.0, 0.0, 0.0));
        let hit = pair(AgentState::new(0.0, 0.0, 0.0, 0.0), AgentState::new(1.0, 0.5, 0.0, 0.0));
        let b: Vec<(&Trajectory, (usize, usize), &[AgentDims])> = vec![(&free, (0, 1), &d), (&hit, (0, 1), &d), (&free, (0, 1), &d), (&hit, (1, 0), &d), (&free, (0, 1), &d)];
        assert!((collision_rate(&b).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(collision_rate(&b[..1]).unwrap(), 0.0);
        assert_eq!(collision_rate(&[(&hit, (0, 1), &d[..])]).unwrap(), 1.0);
        assert!(collision_rate(&[]).is_err());
    }
}
