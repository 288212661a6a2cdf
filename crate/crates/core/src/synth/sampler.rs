//! Randomized behavior scripts per scenario kind, plus dataset generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{route_polyline, simulate_scenario, validate_ground_truth, AgentSpec, BehaviorScript, IdmParams, InteractionKind, Maneuver, Scenario};
use crate::error::{Error, Result};
use crate::geometry::AgentDims;
use crate::map::{build_map, Layout, MapGraph};

const LANE_W: f64 = 3.5;
const CROSS_ARM: f64 = 100.0;
const MERGE_X: f64 = 150.0;
const MAX_ATTEMPTS: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Follow,
    Yield,
    Pass,
    Turn,
    LaneChange,
    Overtake,
    Merge,
    HeadOn,
    SpeedChange,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 9] = [
        ScenarioKind::Follow,
        ScenarioKind::Yield,
        ScenarioKind::Pass,
        ScenarioKind::Turn,
        ScenarioKind::LaneChange,
        ScenarioKind::Overtake,
        ScenarioKind::Merge,
        ScenarioKind::HeadOn,
        ScenarioKind::SpeedChange,
    ];

    /// Interaction the script is designed to produce.
    pub fn expected_interaction(self) -> Option<InteractionKind> {
        match self {
            ScenarioKind::Follow => Some(InteractionKind::FollowingStopping),
            ScenarioKind::Yield => Some(InteractionKind::Yielding),
            ScenarioKind::Pass => Some(InteractionKind::Passing),
            ScenarioKind::LaneChange => Some(InteractionKind::LaneChange),
            ScenarioKind::Overtake => Some(InteractionKind::Overtaking),
            ScenarioKind::Merge => Some(InteractionKind::Merging),
            ScenarioKind::Turn | ScenarioKind::HeadOn | ScenarioKind::SpeedChange => None,
        }
    }
}

/// Relative weights per scenario kind. Counts are allocated by largest
/// remainder so a dataset of size n matches the mix as closely as possible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMix {
    pub weights: Vec<(ScenarioKind, f64)>,
}

impl Default for ScenarioMix {
    fn default() -> Self {
        Self { weights: ScenarioKind::ALL.iter().map(|k| (*k, 1.0)).collect() }
    }
}

impl ScenarioMix {
    pub fn only(kinds: &[ScenarioKind]) -> Self {
        Self { weights: kinds.iter().map(|k| (*k, 1.0)).collect() }
    }

    pub fn counts(&self, n: usize) -> Result<Vec<(ScenarioKind, usize)>> {
        let total: f64 = self.weights.iter().map(|(_, w)| *w).sum();
        if self.weights.is_empty() || self.weights.iter().any(|(_, w)| !(*w >= 0.0)) || total <= 0.0 {
            return Err(Error::InvalidParam("scenario mix needs non-negative weights with a positive sum".into()));
        }
        let exact: Vec<f64> = self.weights.iter().map(|(_, w)| w / total * n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut order: Vec<usize> = (0..exact.len()).collect();
        order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
        let missing = n - counts.iter().sum::<usize>();
        for &k in order.iter().take(missing) {
            counts[k] += 1;
        }
        Ok(self.weights.iter().map(|(k, _)| *k).zip(counts).collect())
    }
}

/// Independent per-scenario seed derived from a dataset seed (splitmix64).
pub fn scenario_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn dims(rng: &mut ChaCha8Rng) -> AgentDims {
    AgentDims::new(rng.random_range(4.2..5.0), rng.random_range(1.8..2.0))
}

fn agent(route: Vec<usize>, s0: f64, speed: f64, dims: AgentDims, maneuver: Maneuver) -> AgentSpec {
    AgentSpec { route, s0, speed, dims, idm: IdmParams { v0: speed, ..IdmParams::default() }, maneuver }
}

struct Draft {
    layout: Layout,
    specs: Vec<AgentSpec>,
    pair: (usize, usize),
}

/// Connector id for incoming arm `a` and turn index (0 right, 1 straight, 2 left).
fn connector(a: usize, turn: usize) -> usize {
    8 + 3 * a + turn
}

fn cross_route(a: usize, turn: usize) -> Vec<usize> {
    vec![a, connector(a, turn), 4 + (a + turn + 1) % 4]
}

fn draft_follow(rng: &mut ChaCha8Rng) -> Draft {
    let lanes = rng.random_range(1..=2);
    let lane = rng.random_range(0..lanes);
    let (dl, df) = (dims(rng), dims(rng));
    let lead_s = rng.random_range(50.0..70.0);
    let gap = rng.random_range(14.0..22.0);
    let v_lead = rng.random_range(8.0..11.0);
    let maneuver = match rng.random_range(0..3) {
        0 => Maneuver::SpeedChange { target: 0.0, start: rng.random_range(1.0..3.0) },
        1 => Maneuver::SpeedChange { target: rng.random_range(3.0..5.0), start: rng.random_range(1.0..3.0) },
        _ => Maneuver::Keep,
    };
    let v_follow = v_lead + rng.random_range(0.0..1.5);
    Draft {
        layout: Layout::Straight { length: 300.0, lanes, width: LANE_W },
        specs: vec![
            agent(vec![lane], lead_s, v_lead, dl, maneuver),
            agent(vec![lane], lead_s - gap - (dl.length + df.length) / 2.0, v_follow, df, Maneuver::Keep),
        ],
        pair: (1, 0),
    }
}

/// Crossing pair at the intersection. `yielding` holds the second agent at
/// the stop line until the first has cleared the box.
fn draft_crossing(rng: &mut ChaCha8Rng, yielding: bool) -> Draft {
    let layout = Layout::CrossIntersection { arm: CROSS_ARM, width: LANE_W };
    let a = rng.random_range(0..4);
    let b = if rng.random_bool(0.5) { (a + 1) % 4 } else { (a + 3) % 4 };
    let (da, db) = (dims(rng), dims(rng));
    let va = rng.random_range(8.0..11.0);
    let box_len = 2.0 * LANE_W;
    let (t_a, vb, t_b) = if yielding {
        (rng.random_range(5.0..6.0), rng.random_range(5.0..7.0), rng.random_range(2.5..3.5))
    } else {
        let t_a = rng.random_range(2.0..3.0);
        let vb = rng.random_range(8.0..11.0);
        (t_a, vb, t_a + rng.random_range(1.5..2.2))
    };
    let s_a = CROSS_ARM - va * t_a + da.length / 2.0;
    let s_b = CROSS_ARM - vb * t_b + db.length / 2.0;
    let maneuver_b = if yielding {
        Maneuver::YieldTo { other: 0, stop_s: CROSS_ARM - 1.0, clear_s: CROSS_ARM + box_len + da.length + 3.0 }
    } else {
        Maneuver::Keep
    };
    Draft {
        layout,
        specs: vec![
            agent(cross_route(a, 1), s_a, va, da, Maneuver::Keep),
            agent(cross_route(b, 1), s_b, vb, db, maneuver_b),
        ],
        pair: if yielding { (1, 0) } else { (0, 1) },
    }
}

fn draft_turn(rng: &mut ChaCha8Rng) -> Draft {
    let a = rng.random_range(0..4);
    // left and right share one speed profile so the history does not give
    // the direction away
    let turn = if rng.random_bool(0.5) { 0 } else { 2 };
    let d = dims(rng);
    let (v, target) = (rng.random_range(4.0..5.0), rng.random_range(3.0..3.5));
    let t_enter = rng.random_range(2.5..4.0);
    let s0 = (CROSS_ARM - v * t_enter).max(5.0);
    let exit_arm = (a + turn + 1) % 4;
    // the second agent drives away from the box on an unrelated arm
    let far_arm = (0..4).find(|&k| k != exit_arm && k != a).unwrap();
    let db = dims(rng);
    let vb = rng.random_range(6.0..10.0);
    let maneuver_b = Maneuver::SpeedChange { target: vb + rng.random_range(-3.0..3.0), start: rng.random_range(0.5..3.0) };
    Draft {
        layout: Layout::CrossIntersection { arm: CROSS_ARM, width: LANE_W },
        specs: vec![
            agent(cross_route(a, turn), s0, v, d, Maneuver::SpeedChange { target, start: 0.0 }),
            agent(vec![4 + far_arm], rng.random_range(25.0..35.0), vb, db, maneuver_b),
        ],
        pair: (0, 1),
    }
}

fn draft_lane_change(rng: &mut ChaCha8Rng) -> Draft {
    // middle of three lanes with a neighbour on each side: either direction
    // is plausible from the history alone
    let lanes = 3;
    let from = 1;
    let to = if rng.random_bool(0.5) { 0 } else { 2 };
    let (da, db, dc) = (dims(rng), dims(rng), dims(rng));
    let va = rng.random_range(8.0..11.0);
    let vb = va + rng.random_range(-1.0..1.0);
    let vc = va + rng.random_range(-1.0..1.0);
    let s_a = rng.random_range(60.0..80.0);
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let offset = rng.random_range(20.0..35.0) * sign;
    let offset_c = rng.random_range(20.0..35.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    Draft {
        layout: Layout::Straight { length: 300.0, lanes, width: LANE_W },
        specs: vec![
            agent(
                vec![from],
                s_a,
                va,
                da,
                Maneuver::LaneShift {
                    offset: (to as f64 - from as f64) * LANE_W,
                    start: rng.random_range(1.5..3.5),
                    duration: rng.random_range(3.0..4.0),
                    speed: None,
                },
            ),
            agent(vec![to], s_a + offset, vb, db, Maneuver::Keep),
            agent(vec![2 - to], s_a + offset_c, vc, dc, Maneuver::Keep),
        ],
        pair: (0, 1),
    }
}

fn draft_overtake(rng: &mut ChaCha8Rng) -> Draft {
    let (da, db) = (dims(rng), dims(rng));
    let vb = rng.random_range(6.0..8.0);
    let va = vb + rng.random_range(3.0..5.0);
    let s_b = rng.random_range(70.0..90.0);
    let gap = rng.random_range(16.0..24.0);
    Draft {
        layout: Layout::Straight { length: 300.0, lanes: 2, width: LANE_W },
        specs: vec![
            agent(
                vec![0],
                s_b - gap,
                va,
                da,
                Maneuver::LaneShift {
                    offset: LANE_W,
                    start: rng.random_range(0.5..1.0),
                    duration: rng.random_range(2.5..3.0),
                    speed: Some(va + 3.0),
                },
            ),
            agent(vec![0], s_b, vb, db, Maneuver::Keep),
        ],
        pair: (0, 1),
    }
}

fn draft_merge(rng: &mut ChaCha8Rng, ramp_len: f64) -> Draft {
    let (da, db) = (dims(rng), dims(rng));
    let va = rng.random_range(8.0..11.0);
    let vb = rng.random_range(8.0..11.0);
    let t_a = rng.random_range(3.0..5.0);
    let t_b = t_a + rng.random_range(2.0..3.0);
    let accel = rng.random_bool(0.3);
    let maneuver = if accel { Maneuver::SpeedChange { target: va + 3.0, start: rng.random_range(0.5..1.5) } } else { Maneuver::Keep };
    Draft {
        layout: Layout::MergeRamp { length: 300.0, width: LANE_W, merge_x: MERGE_X },
        specs: vec![
            agent(vec![2, 1], (ramp_len - va * t_a).max(2.0), va, da, maneuver),
            agent(vec![0, 1], MERGE_X - vb * t_b, vb, db, Maneuver::Keep),
        ],
        pair: (0, 1),
    }
}

fn draft_head_on(rng: &mut ChaCha8Rng) -> Draft {
    let length = 300.0;
    let (da, db) = (dims(rng), dims(rng));
    let va = rng.random_range(7.0..11.0);
    let vb = rng.random_range(7.0..11.0);
    let t_meet = rng.random_range(4.0..6.0);
    let meet = rng.random_range(130.0..170.0);
    Draft {
        layout: Layout::TwoLane { length, width: LANE_W },
        specs: vec![
            agent(vec![0], meet - va * t_meet, va, da, Maneuver::Keep),
            agent(vec![1], length - meet - vb * t_meet, vb, db, Maneuver::Keep),
        ],
        pair: (0, 1),
    }
}

fn draft_speed_change(rng: &mut ChaCha8Rng) -> Draft {
    let (da, db) = (dims(rng), dims(rng));
    let va: f64 = rng.random_range(4.0..10.0);
    let target = if rng.random_bool(0.5) { va + rng.random_range(3.0..5.0) } else { (va - rng.random_range(3.0..5.0)).max(0.0f64) };
    let vb = rng.random_range(6.0..10.0);
    let s_a = rng.random_range(40.0..60.0);
    Draft {
        layout: Layout::Straight { length: 300.0, lanes: 2, width: LANE_W },
        specs: vec![
            agent(vec![0], s_a, va, da, Maneuver::SpeedChange { target, start: rng.random_range(0.5..2.5) }),
            agent(vec![1], s_a + rng.random_range(-40.0..40.0), vb, db, Maneuver::Keep),
        ],
        pair: (0, 1),
    }
}

fn draft(kind: ScenarioKind, rng: &mut ChaCha8Rng) -> Result<(Draft, MapGraph)> {
    let d = match kind {
        ScenarioKind::Follow => draft_follow(rng),
        ScenarioKind::Yield => draft_crossing(rng, true),
        ScenarioKind::Pass => draft_crossing(rng, false),
        ScenarioKind::Turn => draft_turn(rng),
        ScenarioKind::LaneChange => draft_lane_change(rng),
        ScenarioKind::Overtake => draft_overtake(rng),
        ScenarioKind::Merge => {
            let layout = Layout::MergeRamp { length: 300.0, width: LANE_W, merge_x: MERGE_X };
            let map = build_map(&layout)?;
            let ramp_len = route_polyline(&map, &[2]).length();
            return Ok((draft_merge(rng, ramp_len), map));
        }
        ScenarioKind::HeadOn => draft_head_on(rng),
        ScenarioKind::SpeedChange => draft_speed_change(rng),
    };
    let map = build_map(&d.layout)?;
    Ok((d, map))
}

/// Draws one valid scenario of `kind`. Draws that spawn in collision, collide
/// later, or leave the road are rejected and redrawn from a derived seed.
pub fn sample_scenario(kind: ScenarioKind, seed: u64) -> Result<Scenario> {
    let mut last_err = None;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(scenario_seed(seed, attempt));
        let (d, map) = draft(kind, &mut rng)?;
        let script = BehaviorScript { kind, expected: kind.expected_interaction(), interest_pair: d.pair };
        match simulate_scenario(&map, d.layout, &d.specs, &script, seed) {
            Ok(sc) if validate_ground_truth(&sc) => return Ok(sc),
            Ok(_) => last_err = Some(Error::InvalidInput(format!("{kind:?} draw {attempt} failed validation"))),
            Err(e @ Error::SpawnCollision(..)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::InvalidInput("no attempts".into())))
}

/// `n` scenarios following `mix`. Kinds are laid out in mix order and then
/// shuffled with the dataset seed; scenario `i` uses `scenario_seed(seed, i)`,
/// so results do not depend on the rayon thread count.
pub fn generate_dataset(n: usize, seed: u64, mix: &ScenarioMix) -> Result<Vec<Scenario>> {
    let mut kinds: Vec<ScenarioKind> = Vec::with_capacity(n);
    for (k, c) in mix.counts(n)? {
        kinds.extend(std::iter::repeat_n(k, c));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..kinds.len()).rev() {
        let j = rng.random_range(0..=i);
        kinds.swap(i, j);
    }
    kinds.into_par_iter().enumerate().map(|(i, k)| sample_scenario(k, scenario_seed(seed, i as u64))).collect()
}
