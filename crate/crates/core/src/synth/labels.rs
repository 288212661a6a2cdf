//! Heuristic single-agent tags and geometric interaction predicates.
//!
//! Tag thresholds (speeds in m/s, over the labeled window):
//! `static` every |v| < 0.1; `moving_slowly` mean v < 2; `speeding_up`
//! Δv > 2; `slowing_down` Δv < −2; `constant_speed` |Δv| < 1; turning when the
//! accumulated heading change exceeds π/6, left for positive.
//!
//! Interaction predicates, checked in order for the pair:
//! 1. merging: one agent starts on an on-ramp and ends on a lane the other
//!    agent's lane feeds into (or already occupies);
//! 2. overtaking: lane change between adjacent lanes while moving from behind
//!    the other agent to ahead of it;
//! 3. lane change: lane change between adjacent lanes;
//! 4. following/stopping: same lane, one behind the other, for at least half
//!    the steps with a time gap below 5 s at some step;
//! 5. intersection precedence: both agents use the intersection box within
//!    3 s of each other (or the later one waits within 10 m of it); the later
//!    agent yields if it dropped below 1 m/s or lost 3 m/s, otherwise the
//!    earlier agent passes.

use std::f64::consts::FRAC_PI_6;

use serde::{Deserialize, Serialize};

use super::Scenario;
use crate::error::{Error, Result};
use crate::map::{LaneKind, MapGraph, Point};
use crate::scene::{wrap_angle, AgentState, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LanePos {
    Rightmost,
    Middle,
    Leftmost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Parked,
    OffRoad,
    Static,
    MovingSlowly,
    SpeedingUp,
    SlowingDown,
    ConstantSpeed,
    TurningRight,
    TurningLeft,
    GoingStraight,
    CrossingIntersection,
    ApproachingIntersection,
    LanePosition(LanePos),
    LaneChange { from: LanePos, to: LanePos },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionKind {
    LaneChange,
    FollowingStopping,
    Yielding,
    Passing,
    Overtaking,
    Merging,
}

/// Vehicle interaction subtypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subtype {
    LaneChangeForTurnOrExit,
    LaneChangeForOvertaking,
    LaneChangeAvoidingSlowTraffic,
    LaneChangeForMerging,
    LaneChangeWithLeadOrTrail,
    FollowingLead,
    FollowingSlowLead,
    Tailgating,
    StoppingBehindLead,
    StoppingBeforeIntersection,
    IntersectionYielding,
    YieldingBeforeMergeOrLaneChange,
    YieldingToMergingCars,
    RoundaboutYielding,
    PassingIntersectionWithYielders,
    PassingRoundabout,
    MaintainingSpeed,
    PassingAsLeader,
    CarAvoidance,
    StandardOvertaking,
    HighSpeedOvertaking,
    StandardMerge,
    LaneReductionMerge,
    ZipperMerge,
    OnRampAcceleratingMerge,
    LateMerge,
}

impl Subtype {
    pub fn kind(self) -> InteractionKind {
        use Subtype::*;
        match self {
            LaneChangeForTurnOrExit
            | LaneChangeForOvertaking
            | LaneChangeAvoidingSlowTraffic
            | LaneChangeForMerging
            | LaneChangeWithLeadOrTrail => InteractionKind::LaneChange,
            FollowingLead | FollowingSlowLead | Tailgating | StoppingBehindLead | StoppingBeforeIntersection => {
                InteractionKind::FollowingStopping
            }
            IntersectionYielding | YieldingBeforeMergeOrLaneChange | YieldingToMergingCars | RoundaboutYielding => {
                InteractionKind::Yielding
            }
            PassingIntersectionWithYielders | PassingRoundabout | MaintainingSpeed | PassingAsLeader => {
                InteractionKind::Passing
            }
            CarAvoidance | StandardOvertaking | HighSpeedOvertaking => InteractionKind::Overtaking,
            StandardMerge | LaneReductionMerge | ZipperMerge | OnRampAcceleratingMerge | LateMerge => {
                InteractionKind::Merging
            }
        }
    }

    pub fn description(self) -> &'static str {
        use Subtype::*;
        match self {
            LaneChangeForTurnOrExit => "Changing lane for turn or exit",
            LaneChangeForOvertaking => "Changing lane for overtaking",
            LaneChangeAvoidingSlowTraffic => "Lane-change for avoiding obstacles or slower traffic",
            LaneChangeForMerging => "Lane-change for merging",
            LaneChangeWithLeadOrTrail => "Changing lane with lead or trail",
            FollowingLead => "Following with a lead vehicle",
            FollowingSlowLead => "Following a slow-moving lead",
            Tailgating => "Tailgating",
            StoppingBehindLead => "Stopping behind a lead vehicle",
            StoppingBeforeIntersection => "Stopping behind an intersection",
            IntersectionYielding => "Intersection yielding",
            YieldingBeforeMergeOrLaneChange => "Yielding before merging or lane-change",
            YieldingToMergingCars => "Yielding to merging or lane-change cars",
            RoundaboutYielding => "Roundabout yielding",
            PassingIntersectionWithYielders => "Passing through an intersection with yielding vehicles",
            PassingRoundabout => "Passing through a roundabout",
            MaintainingSpeed => "Maintaining speed while driving",
            PassingAsLeader => "Passing as a leading vehicle",
            CarAvoidance => "Car avoidance",
            StandardOvertaking => "Standard overtaking",
            HighSpeedOvertaking => "High-speed overtaking",
            StandardMerge => "Standard merge",
            LaneReductionMerge => "Lane reduction merge",
            ZipperMerge => "Zipper merge",
            OnRampAcceleratingMerge => "Highway on-ramp accelerating merge",
            LateMerge => "Late merge",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionLabel {
    pub actor: usize,
    pub other: usize,
    pub kind: InteractionKind,
    pub subtype: Subtype,
}

impl InteractionLabel {
    pub fn new(actor: usize, other: usize, subtype: Subtype) -> Result<Self> {
        if actor == other {
            return Err(Error::InvalidInput("interaction actor and other must differ".into()));
        }
        Ok(Self { actor, other, kind: subtype.kind(), subtype })
    }
}

fn valid_states(traj: &Trajectory, i: usize) -> Vec<AgentState> {
    traj.states[i].iter().zip(&traj.valid[i]).filter(|(_, v)| **v).map(|(s, _)| *s).collect()
}

/// Parallel same-direction lane group containing `lane`, ordered right to
/// left.
fn lane_group(map: &MapGraph, lane: usize) -> Vec<usize> {
    let mut group = vec![lane];
    let mut k = 0;
    while k < group.len() {
        for &nb in &map.lane(group[k]).neighbors {
            if !group.contains(&nb) {
                group.push(nb);
            }
        }
        k += 1;
    }
    let base = &map.lane(lane).centerline;
    let (_, h) = base.sample(0.0);
    let origin = base.points[0];
    let left = |id: usize| {
        let p = map.lane(id).centerline.points[0];
        -(p[0] - origin[0]) * h.sin() + (p[1] - origin[1]) * h.cos()
    };
    group.sort_by(|a, b| left(*a).total_cmp(&left(*b)));
    group
}

fn lane_rank(map: &MapGraph, lane: usize) -> Option<LanePos> {
    let group = lane_group(map, lane);
    if group.len() < 2 {
        return None;
    }
    let idx = group.iter().position(|&l| l == lane)?;
    Some(if idx == 0 {
        LanePos::Rightmost
    } else if idx + 1 == group.len() {
        LanePos::Leftmost
    } else {
        LanePos::Middle
    })
}

fn box_distance(map: &MapGraph, p: Point) -> Option<f64> {
    map.intersection.map(|[x0, y0, x1, y1]| {
        let dx = (x0 - p[0]).max(p[0] - x1).max(0.0);
        let dy = (y0 - p[1]).max(p[1] - y1).max(0.0);
        dx.hypot(dy)
    })
}

/// Tags for a single-agent trajectory slice (agent 0 of `traj`).
pub fn heuristic_label(traj: &Trajectory, map: &MapGraph) -> Vec<Tag> {
    if traj.agent_count() == 0 {
        return vec![];
    }
    let states = valid_states(traj, 0);
    if states.len() < 2 {
        return vec![];
    }
    let mut tags = Vec::new();
    let first = states[0];
    let last = *states.last().unwrap();
    if states.iter().any(|s| map.edge_signed_distance(s.position()) < 0.0) {
        tags.push(Tag::OffRoad);
    }
    if states.iter().all(|s| s.speed.abs() < 0.1) {
        let on_lane = map
            .nearest_lane(first.position(), first.heading)
            .is_some_and(|(id, d)| d <= map.lane(id).width / 2.0);
        tags.push(if on_lane { Tag::Static } else { Tag::Parked });
        if on_lane && !tags.contains(&Tag::OffRoad) {
            return tags;
        }
        return tags;
    }
    let mean_v = states.iter().map(|s| s.speed).sum::<f64>() / states.len() as f64;
    if mean_v < 2.0 {
        tags.push(Tag::MovingSlowly);
    }
    let dv = last.speed - first.speed;
    if dv > 2.0 {
        tags.push(Tag::SpeedingUp);
    } else if dv < -2.0 {
        tags.push(Tag::SlowingDown);
    }
    if dv.abs() < 1.0 {
        tags.push(Tag::ConstantSpeed);
    }
    let turn: f64 = states.windows(2).map(|w| wrap_angle(w[1].heading - w[0].heading)).sum();
    tags.push(if turn > FRAC_PI_6 {
        Tag::TurningLeft
    } else if turn < -FRAC_PI_6 {
        Tag::TurningRight
    } else {
        Tag::GoingStraight
    });
    if map.intersection.is_some() {
        if states.iter().any(|s| map.in_intersection(s.position())) {
            tags.push(Tag::CrossingIntersection);
        } else if let (Some(d0), Some(d1)) = (box_distance(map, first.position()), box_distance(map, last.position())) {
            if d1 < d0 && d1 < 25.0 {
                tags.push(Tag::ApproachingIntersection);
            }
        }
    }
    let lane_first = map.nearest_lane(first.position(), first.heading).map(|(id, _)| id);
    let lane_last = map.nearest_lane(last.position(), last.heading).map(|(id, _)| id);
    if let (Some(a), Some(b)) = (lane_first, lane_last) {
        if a != b && map.lane(a).neighbors.contains(&b) {
            if let (Some(from), Some(to)) = (lane_rank(map, a), lane_rank(map, b)) {
                tags.push(Tag::LaneChange { from, to });
            }
        } else if let Some(pos) = lane_rank(map, b) {
            tags.push(Tag::LanePosition(pos));
        }
    }
    tags
}

struct AgentTrack {
    states: Vec<AgentState>,
    lanes: Vec<Option<usize>>,
}

impl AgentTrack {
    fn new(traj: &Trajectory, i: usize, map: &MapGraph) -> Self {
        let states = valid_states(traj, i);
        let lanes = states.iter().map(|s| map.nearest_lane(s.position(), s.heading).map(|(id, _)| id)).collect();
        Self { states, lanes }
    }

    fn first_lane(&self) -> Option<usize> {
        self.lanes.iter().flatten().next().copied()
    }

    fn last_lane(&self) -> Option<usize> {
        self.lanes.iter().rev().flatten().next().copied()
    }

    fn changed_adjacent_lane(&self, map: &MapGraph) -> bool {
        match (self.first_lane(), self.last_lane()) {
            (Some(a), Some(b)) => a != b && map.lane(a).neighbors.contains(&b),
            _ => false,
        }
    }

    fn box_times(&self, map: &MapGraph, dt: f64) -> Option<(f64, f64)> {
        let inside: Vec<usize> =
            (0..self.states.len()).filter(|&t| map.in_intersection(self.states[t].position())).collect();
        Some((*inside.first()? as f64 * dt, *inside.last()? as f64 * dt))
    }

    fn decelerated_before(&self, until: usize) -> bool {
        let window = &self.states[..until.clamp(1, self.states.len())];
        let v0 = window[0].speed;
        let vmin = window.iter().map(|s| s.speed).fold(f64::INFINITY, f64::min);
        vmin < 1.0 || v0 - vmin >= 3.0
    }
}

/// Signed longitudinal offset of `a` ahead of `b` along `b`'s heading.
fn ahead_of(a: &AgentState, b: &AgentState) -> f64 {
    (a.x - b.x) * b.heading.cos() + (a.y - b.y) * b.heading.sin()
}

fn merging(a: &AgentTrack, b: &AgentTrack, map: &MapGraph) -> bool {
    let (Some(a0), Some(a1), Some(b0)) = (a.first_lane(), a.last_lane(), b.first_lane()) else {
        return false;
    };
    map.lane(a0).kind == LaneKind::OnRamp
        && map.lane(a0).successors.contains(&a1)
        && (b0 == a1 || map.lane(b0).successors.contains(&a1))
}

fn following(behind: &AgentTrack, front: &AgentTrack) -> bool {
    let n = behind.states.len().min(front.states.len());
    let mut same = 0;
    let mut close = false;
    for t in 0..n {
        if behind.lanes[t].is_some() && behind.lanes[t] == front.lanes[t] {
            let d = ahead_of(&front.states[t], &behind.states[t]);
            if d > 0.0 {
                same += 1;
                if d / behind.states[t].speed.max(0.5) < 5.0 {
                    close = true;
                }
            }
        }
    }
    close && 2 * same >= n
}

/// Labels the interaction between the two agents of `pair`, if any predicate
/// fires. The actor is chosen by the predicate.
pub fn interaction_label(scenario: &Scenario, pair: (usize, usize)) -> Result<Option<InteractionLabel>> {
    let n = scenario.agent_count();
    let (i, j) = pair;
    if i >= n || j >= n || i == j {
        return Err(Error::InvalidInput(format!("invalid agent pair ({i}, {j}) for {n} agents")));
    }
    let map = &scenario.map;
    let full = scenario.full_trajectory();
    let dt = full.dt;
    let ti = AgentTrack::new(&full, i, map);
    let tj = AgentTrack::new(&full, j, map);
    if ti.states.len() < 2 || tj.states.len() < 2 {
        return Ok(None);
    }
    let label = |actor, other, sub| InteractionLabel::new(actor, other, sub).map(Some);

    for (a, b, ia, ib) in [(&ti, &tj, i, j), (&tj, &ti, j, i)] {
        if merging(a, b, map) {
            let accel = a.states.last().unwrap().speed - a.states[0].speed > 2.0;
            return label(ia, ib, if accel { Subtype::OnRampAcceleratingMerge } else { Subtype::StandardMerge });
        }
    }
    for (a, b, ia, ib) in [(&ti, &tj, i, j), (&tj, &ti, j, i)] {
        if a.changed_adjacent_lane(map) {
            let m = a.states.len().min(b.states.len());
            let before = ahead_of(&a.states[0], &b.states[0]);
            let after = ahead_of(&a.states[m - 1], &b.states[m - 1]);
            if before < 0.0 && after > 0.0 && b.first_lane() == a.first_lane() {
                return label(ia, ib, Subtype::HighSpeedOvertaking);
            }
            return label(ia, ib, Subtype::LaneChangeWithLeadOrTrail);
        }
    }
    for (a, b, ia, ib) in [(&ti, &tj, i, j), (&tj, &ti, j, i)] {
        if following(a, b) {
            let stopped = a.states.iter().any(|s| s.speed < 0.5);
            return label(ia, ib, if stopped { Subtype::StoppingBehindLead } else { Subtype::FollowingLead });
        }
    }
    if map.intersection.is_some() {
        let bi = ti.box_times(map, dt);
        let bj = tj.box_times(map, dt);
        let (first, later, ifirst, ilater, (_, exit_first), later_entry) = match (bi, bj) {
            (Some(x), Some(y)) if x.0 <= y.0 => (&ti, &tj, i, j, x, Some(y.0)),
            (Some(x), Some(y)) => (&tj, &ti, j, i, y, Some(x.0)),
            (Some(x), None) => (&ti, &tj, i, j, x, None),
            (None, Some(y)) => (&tj, &ti, j, i, y, None),
            (None, None) => return Ok(None),
        };
        let involved = match later_entry {
            Some(e) => e - exit_first < 3.0,
            None => box_distance(map, later.states.last().unwrap().position()).is_some_and(|d| d < 10.0),
        };
        if involved {
            let until = later_entry.map_or(later.states.len(), |e| (e / dt).round() as usize);
            if later.decelerated_before(until) {
                return label(ilater, ifirst, Subtype::IntersectionYielding);
            }
            let _ = first;
            return label(ifirst, ilater, Subtype::MaintainingSpeed);
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::{build_map, Layout};
    use crate::scene::{rollout, Action, DT};

    fn single(states: Vec<AgentState>) -> Trajectory {
        let n = states.len();
        Trajectory {
            dt: DT,
            actions: vec![vec![Action::default(); n - 1]],
            valid: vec![vec![true; n]],
            states: vec![states],
        }
    }

    #[test]
    fn constant_straight() {
        let map = build_map(&Layout::Straight { length: 300.0, lanes: 2, width: 3.5 }).unwrap();
        let tr = rollout(&[AgentState::new(10.0, 0.0, 0.0, 10.0)], &[vec![Action::default(); 16]], DT).unwrap();
        let tags = heuristic_label(&tr, &map);
        assert!(tags.contains(&Tag::ConstantSpeed));
        assert!(tags.contains(&Tag::GoingStraight));
        assert!(tags.contains(&Tag::LanePosition(LanePos::Rightmost)));
        assert!(!tags.contains(&Tag::SpeedingUp));
    }

    #[test]
    fn speeding_up_with_slight_drift() {
        // 0 → 8 m/s over 8 s while the heading creeps by +0.02 rad in total
        let map = build_map(&Layout::Straight { length: 300.0, lanes: 1, width: 3.5 }).unwrap();
        let acts = vec![Action::new(1.0, 0.02 / 8.0); 16];
        let tr = rollout(&[AgentState::new(10.0, 0.0, 0.0, 0.0)], &[acts], DT).unwrap();
        assert!((tr.states[0][16].speed - 8.0).abs() < 1e-12);
        let tags = heuristic_label(&tr, &map);
        // independent threshold check
        let dv = tr.states[0][16].speed - tr.states[0][0].speed;
        let dh = tr.states[0][16].heading - tr.states[0][0].heading;
        assert!(dv > 2.0 && dh.abs() < std::f64::consts::PI / 6.0);
        assert!(tags.contains(&Tag::SpeedingUp));
        assert!(tags.contains(&Tag::GoingStraight));
        assert!(!tags.contains(&Tag::TurningLeft));
    }

    #[test]
    fn static_agent() {
        let map = build_map(&Layout::Straight { length: 300.0, lanes: 1, width: 3.5 }).unwrap();
        let tr = single(vec![AgentState::new(30.0, 0.0, 0.0, 0.05); 10]);
        assert_eq!(heuristic_label(&tr, &map), vec![Tag::Static]);
    }

    #[test]
    fn empty_and_invalid() {
        let map = build_map(&Layout::Straight { length: 300.0, lanes: 1, width: 3.5 }).unwrap();
        let mut tr = single(vec![AgentState::new(30.0, 0.0, 0.0, 5.0); 4]);
        tr.valid[0] = vec![false; 4];
        assert!(heuristic_label(&tr, &map).is_empty());
    }

    #[test]
    fn turns_by_sign() {
        let map = build_map(&Layout::CrossIntersection { arm: 60.0, width: 3.5 }).unwrap();
        let left = rollout(&[AgentState::new(-20.0, -1.75, 0.0, 6.0)], &[vec![Action::new(0.0, 0.2); 16]], DT).unwrap();
        assert!(heuristic_label(&left, &map).contains(&Tag::TurningLeft));
        let right = rollout(&[AgentState::new(-8.0, -1.75, 0.0, 6.0)], &[vec![Action::new(0.0, -0.1); 16]], DT).unwrap();
        let tags = heuristic_label(&right, &map);
        assert!(tags.contains(&Tag::TurningRight));
        assert!(tags.contains(&Tag::CrossingIntersection));
    }

    #[test]
    fn subtype_kinds_are_consistent() {
        assert_eq!(Subtype::IntersectionYielding.kind(), InteractionKind::Yielding);
        assert_eq!(Subtype::FollowingLead.kind(), InteractionKind::FollowingStopping);
        assert!(InteractionLabel::new(1, 1, Subtype::FollowingLead).is_err());
    }
}
