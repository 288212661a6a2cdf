//! Synthetic ground-truth scenarios: route following with IDM longitudinal
//! control and scripted maneuvers, plus heuristic behavior and interaction
//! labeling.

mod labels;
mod sampler;

use serde::{Deserialize, Serialize};

pub use labels::{heuristic_label, interaction_label, InteractionKind, InteractionLabel, LanePos, Subtype, Tag};
pub use sampler::{generate_dataset, sample_scenario, scenario_seed, ScenarioKind, ScenarioMix};

use crate::costs::{no_collision_loss, DiskSet};
use crate::error::{Error, Result};
use crate::geometry::{overlaps, AgentDims, OrientedBox};
use crate::language::PromptText;
use crate::map::{Layout, MapGraph, Point, Polyline};
use crate::scene::{step_unicycle, wrap_angle, Action, ActionBounds, AgentState, Trajectory, DT};

/// History steps before the current state (1.0 s at 0.5 s).
pub const HISTORY_STEPS: usize = 2;
/// Ground-truth future steps (8.0 s at 0.5 s).
pub const FUTURE_STEPS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    pub v0: f64,
    pub time_headway: f64,
    pub a: f64,
    pub b: f64,
    pub s0: f64,
    pub delta: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self { v0: 12.0, time_headway: 1.5, a: 1.5, b: 2.0, s0: 2.0, delta: 4.0 }
    }
}

/// Intelligent-driver acceleration towards a leader `gap` metres ahead
/// (bumper to bumper). `gap = ∞` is free road.
pub fn idm_accel(gap: f64, v: f64, v_lead: f64, p: &IdmParams, bounds: &ActionBounds) -> f64 {
    if gap <= 0.0 || gap.is_nan() {
        return -bounds.a_max;
    }
    let free = 1.0 - (v / p.v0).powf(p.delta);
    let interaction = if gap.is_finite() {
        let s_star = p.s0 + v * p.time_headway + v * (v - v_lead) / (2.0 * (p.a * p.b).sqrt());
        (s_star.max(0.0) / gap).powi(2)
    } else {
        0.0
    };
    (p.a * (free - interaction)).clamp(-bounds.a_max, bounds.a_max)
}

/// Per-agent scripted maneuver layered over lane following.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "maneuver", rename_all = "snake_case")]
pub enum Maneuver {
    Keep,
    /// Desired speed switches to `target` at `start` seconds.
    SpeedChange { target: f64, start: f64 },
    /// Lateral shift of `offset` metres (positive left) blended over
    /// `duration` seconds from `start`; desired speed becomes `speed` if set.
    LaneShift { offset: f64, start: f64, duration: f64, speed: Option<f64> },
    /// Hold at `stop_s` (route arc length) until agent `other` has passed its
    /// own `clear_s`.
    YieldTo { other: usize, stop_s: f64, clear_s: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    /// Lane ids traversed in order.
    pub route: Vec<usize>,
    /// Start position as arc length along the route.
    pub s0: f64,
    pub speed: f64,
    pub dims: AgentDims,
    pub idm: IdmParams,
    pub maneuver: Maneuver,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorScript {
    pub kind: ScenarioKind,
    /// Interaction the script is built to produce (ground truth for the
    /// labeler), if any.
    pub expected: Option<InteractionKind>,
    pub interest_pair: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub kind: ScenarioKind,
    pub layout: Layout,
    pub map: MapGraph,
    /// `HISTORY_STEPS` past steps ending at the current state.
    pub history: Trajectory,
    /// `FUTURE_STEPS` ground-truth steps starting at the current state.
    pub future: Trajectory,
    pub agent_dims: Vec<AgentDims>,
    /// Heuristic tags of each agent's future.
    pub tags: Vec<Vec<Tag>>,
    pub interactions: Vec<InteractionLabel>,
    pub interest_pair: (usize, usize),
    /// One prompt per agent, with that agent as the target.
    pub prompts: Vec<PromptText>,
    pub expected_interaction: Option<InteractionKind>,
}

impl Scenario {
    pub fn agent_count(&self) -> usize {
        self.future.agent_count()
    }

    pub fn current_states(&self) -> Vec<AgentState> {
        self.history.last_states()
    }

    /// History and future joined into one trajectory.
    pub fn full_trajectory(&self) -> Trajectory {
        let mut t = self.history.clone();
        for i in 0..t.agent_count() {
            t.states[i].extend_from_slice(&self.future.states[i][1..]);
            t.actions[i].extend_from_slice(&self.future.actions[i]);
            t.valid[i].extend_from_slice(&self.future.valid[i][1..]);
        }
        t
    }
}

pub(crate) fn route_polyline(map: &MapGraph, route: &[usize]) -> Polyline {
    let mut pts: Vec<Point> = Vec::new();
    for &id in route {
        for &p in &map.lane(id).centerline.points {
            if pts.last().is_none_or(|q| (q[0] - p[0]).hypot(q[1] - p[1]) > 1e-9) {
                pts.push(p);
            }
        }
    }
    Polyline { points: pts }
}

const SPEED_RAMP: f64 = 1.5;

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

struct Driver<'a> {
    spec: &'a AgentSpec,
    path: Polyline,
}

impl Driver<'_> {
    fn lateral_offset(&self, time: f64) -> f64 {
        match self.spec.maneuver {
            Maneuver::LaneShift { offset, start, duration, .. } => offset * smoothstep((time - start) / duration),
            _ => 0.0,
        }
    }

    /// Desired speed, ramped at `SPEED_RAMP` m/s² towards a scripted target.
    fn desired_speed(&self, time: f64) -> f64 {
        let base = self.spec.idm.v0;
        let (target, start) = match self.spec.maneuver {
            Maneuver::SpeedChange { target, start } => (target, start),
            Maneuver::LaneShift { start, speed: Some(v), .. } => (v, start),
            _ => return base,
        };
        if time < start {
            return base;
        }
        let step = SPEED_RAMP * (time - start);
        if target > base {
            (base + step).min(target)
        } else {
            (base - step).max(target)
        }
    }
}

/// Runs the scripted drivers for `HISTORY_STEPS + FUTURE_STEPS` steps and
/// packages the result with labels and prompts.
pub fn simulate_scenario(
    map: &MapGraph,
    layout: Layout,
    specs: &[AgentSpec],
    script: &BehaviorScript,
    seed: u64,
) -> Result<Scenario> {
    let bounds = ActionBounds::default();
    let n = specs.len();
    if n == 0 {
        return Err(Error::InvalidInput("scenario needs at least one agent".into()));
    }
    let (pi, pj) = script.interest_pair;
    if pi >= n || pj >= n || (n > 1 && pi == pj) {
        return Err(Error::InvalidInput(format!("interest pair ({pi}, {pj}) invalid for {n} agents")));
    }
    let drivers: Vec<Driver> = specs.iter().map(|s| Driver { spec: s, path: route_polyline(map, &s.route) }).collect();
    let mut states: Vec<AgentState> = drivers
        .iter()
        .map(|d| {
            let (p, h) = d.path.sample(d.spec.s0);
            AgentState::new(p[0], p[1], h, d.spec.speed)
        })
        .collect();
    for i in 0..n {
        for j in i + 1..n {
            let a = OrientedBox::from_state(&states[i], specs[i].dims);
            let b = OrientedBox::from_state(&states[j], specs[j].dims);
            if overlaps(&a, &b) {
                return Err(Error::SpawnCollision(i, j));
            }
        }
    }
    let total = HISTORY_STEPS + FUTURE_STEPS;
    let mut seq: Vec<Vec<AgentState>> = states.iter().map(|s| vec![*s]).collect();
    let mut acts: Vec<Vec<Action>> = vec![Vec::with_capacity(total); n];
    let mut released = vec![false; n];
    for step in 0..total {
        let time = step as f64 * DT;
        let progress: Vec<f64> = (0..n).map(|i| drivers[i].path.project(states[i].position()).s).collect();
        let mut next = states.clone();
        for i in 0..n {
            let d = &drivers[i];
            let s = &states[i];
            let my_s = progress[i];
            let lat = d.lateral_offset(time);

            // pure-pursuit steering towards the (offset) route
            let look = (1.2 * s.speed).max(3.0);
            let (p, h) = d.path.sample(my_s + look);
            let lat_ahead = d.lateral_offset(time + look / s.speed.max(1.0));
            let target = [p[0] - h.sin() * lat_ahead, p[1] + h.cos() * lat_ahead];
            let alpha = wrap_angle((target[1] - s.y).atan2(target[0] - s.x) - s.heading);
            let dist = (target[0] - s.x).hypot(target[1] - s.y).max(1.0);
            let yaw_rate = 2.0 * s.speed.max(0.5) * alpha.sin() / dist;

            // leader on this route corridor
            let mut gap = f64::INFINITY;
            let mut v_lead = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let pr = d.path.project(states[j].position());
                let ahead = pr.s - my_s;
                let heading_ok = wrap_angle(states[j].heading - d.path.sample(pr.s).1).abs() < 1.2;
                if ahead > 0.0 && heading_ok && (pr.side * pr.distance - lat).abs() < 2.4 {
                    let g = ahead - (specs[i].dims.length + specs[j].dims.length) / 2.0;
                    if g < gap {
                        gap = g;
                        v_lead = states[j].speed;
                    }
                }
            }
            if let Maneuver::YieldTo { other, stop_s, clear_s } = d.spec.maneuver {
                if !released[i] && progress[other] > clear_s {
                    released[i] = true;
                }
                if !released[i] {
                    let g = stop_s - my_s - specs[i].dims.length / 2.0;
                    if g < gap {
                        gap = g.max(1e-3);
                        v_lead = 0.0;
                    }
                }
            }
            let v0 = d.desired_speed(time);
            let idm = IdmParams { v0: v0.max(0.5), ..d.spec.idm };
            let mut accel = idm_accel(gap, s.speed, v_lead, &idm, &bounds);
            if v0 < 0.5 {
                // scripted stop: comfortable braking, still respecting any leader
                accel = accel.min(-(idm.b).min(s.speed / DT));
            }
            // settle to a full stop instead of creeping
            if v_lead == 0.0 && gap < idm.s0 + 1.0 && s.speed < 1.5 {
                accel = -s.speed / DT;
            }
            if s.speed + accel * DT < 0.0 {
                accel = -s.speed / DT;
            }
            let action = bounds.clamp(Action::new(accel, yaw_rate));
            next[i] = step_unicycle(s, &action, DT)?;
            acts[i].push(action);
        }
        states = next;
        for i in 0..n {
            seq[i].push(states[i]);
        }
    }
    let full = Trajectory { dt: DT, valid: vec![vec![true; total + 1]; n], states: seq, actions: acts };
    let history = full.slice(0, HISTORY_STEPS);
    let future = full.slice(HISTORY_STEPS, total);
    let agent_dims: Vec<AgentDims> = specs.iter().map(|s| s.dims).collect();
    let tags: Vec<Vec<Tag>> = (0..n).map(|i| heuristic_label(&future.agent(i), map)).collect();
    let mut scenario = Scenario {
        seed,
        kind: script.kind,
        layout,
        map: map.clone(),
        history,
        future,
        agent_dims,
        tags,
        interactions: vec![],
        interest_pair: script.interest_pair,
        prompts: vec![],
        expected_interaction: script.expected,
    };
    if n > 1 {
        if let Some(label) = interaction_label(&scenario, script.interest_pair)? {
            scenario.interactions.push(label);
        }
    }
    scenario.prompts = (0..n)
        .map(|i| crate::language::compose_prompt(&scenario.tags, &scenario.interactions, i, n))
        .collect::<Result<_>>()?;
    Ok(scenario)
}

/// Ground-truth sanity: no disk overlaps and every agent stays on the road.
pub fn validate_ground_truth(s: &Scenario) -> bool {
    let full = s.full_trajectory();
    let disks: Vec<DiskSet> = s.agent_dims.iter().map(|d| DiskSet::for_dims(*d)).collect();
    if no_collision_loss(&full, &disks, false) > 0.0 {
        return false;
    }
    full.states.iter().flatten().all(|st| s.map.edge_signed_distance(st.position()) > 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::build_map;

    fn straight() -> (MapGraph, Layout) {
        let layout = Layout::Straight { length: 300.0, lanes: 2, width: 3.5 };
        (build_map(&layout).unwrap(), layout)
    }

    fn spec(route: Vec<usize>, s0: f64, v: f64, maneuver: Maneuver) -> AgentSpec {
        AgentSpec { route, s0, speed: v, dims: AgentDims::new(4.5, 1.9), idm: IdmParams { v0: v, ..IdmParams::default() }, maneuver }
    }

    #[test]
    fn idm_examples() {
        let b = ActionBounds::default();
        let p = IdmParams { v0: 15.0, time_headway: 1.5, a: 1.5, b: 2.0, s0: 2.0, delta: 4.0 };
        assert!(idm_accel(1e6, 15.0, 15.0, &p, &b).abs() < 1e-3);
        assert!((idm_accel(1e9, 0.0, 0.0, &p, &b) - 1.5).abs() < 1e-9);
        // s* = 2 + 10·1.5 + 0 = 17
        let expected = 1.5 * (1.0 - (10.0f64 / 15.0).powi(4) - (17.0f64 / 30.0).powi(2));
        assert!((idm_accel(30.0, 10.0, 10.0, &p, &b) - expected).abs() < 1e-12);
        assert_eq!(idm_accel(0.0, 10.0, 0.0, &p, &b), -8.0);
        assert_eq!(idm_accel(-3.0, 10.0, 0.0, &p, &b), -8.0);
    }

    #[test]
    fn single_agent_constant_speed_is_straight() {
        let (map, layout) = straight();
        let script = BehaviorScript { kind: ScenarioKind::SpeedChange, expected: None, interest_pair: (0, 0) };
        let sc = simulate_scenario(&map, layout, &[spec(vec![0], 20.0, 12.0, Maneuver::Keep)], &script, 1).unwrap();
        assert_eq!(sc.future.horizon(), FUTURE_STEPS);
        assert_eq!(sc.history.horizon(), HISTORY_STEPS);
        for s in &sc.future.states[0] {
            assert!(s.y.abs() < 1e-9 && s.heading.abs() < 1e-9 && (s.speed - 12.0).abs() < 1e-9);
        }
        assert!(sc.future.max_dynamics_residual() < 1e-12);
    }

    #[test]
    fn follower_keeps_min_gap() {
        let (map, layout) = straight();
        let specs = [
            spec(vec![0], 60.0, 10.0, Maneuver::SpeedChange { target: 0.0, start: 2.0 }),
            spec(vec![0], 35.0, 12.0, Maneuver::Keep),
        ];
        let script = BehaviorScript { kind: ScenarioKind::Follow, expected: Some(InteractionKind::FollowingStopping), interest_pair: (1, 0) };
        let sc = simulate_scenario(&map, layout, &specs, &script, 3).unwrap();
        let full = sc.full_trajectory();
        for t in 0..full.states[0].len() {
            let gap = full.states[0][t].x - full.states[1][t].x - 4.5;
            assert!(gap >= specs[1].idm.s0, "gap {gap} at step {t}");
        }
    }

    #[test]
    fn spawn_collision_is_rejected() {
        let (map, layout) = straight();
        let specs = [spec(vec![0], 20.0, 10.0, Maneuver::Keep), spec(vec![0], 22.0, 10.0, Maneuver::Keep)];
        let script = BehaviorScript { kind: ScenarioKind::Follow, expected: None, interest_pair: (1, 0) };
        assert!(matches!(simulate_scenario(&map, layout, &specs, &script, 0), Err(Error::SpawnCollision(0, 1))));
    }
}
