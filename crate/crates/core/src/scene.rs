//! Agent kinematics: unicycle state/action types, forward rollout, inverse
//! dynamics, the rollout vector-Jacobian product used by guidance and
//! closed-loop training, and rigid 2-D frame transforms.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Simulation step used throughout the pipeline (seconds).
pub const DT: f64 = 0.5;

/// Wraps an angle to (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let mut r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r <= -PI {
        r += 2.0 * PI;
    }
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

impl AgentState {
    pub fn new(x: f64, y: f64, heading: f64, speed: f64) -> Self {
        Self { x, y, heading: wrap_angle(heading), speed }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.heading.is_finite() && self.speed.is_finite()
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn pose(&self) -> Pose2 {
        Pose2::new(self.x, self.y, self.heading)
    }

    /// Velocity vector in the global frame.
    pub fn velocity(&self) -> [f64; 2] {
        [self.speed * self.heading.cos(), self.speed * self.heading.sin()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub accel: f64,
    pub yaw_rate: f64,
}

impl Action {
    pub fn new(accel: f64, yaw_rate: f64) -> Self {
        Self { accel, yaw_rate }
    }

    pub fn is_finite(&self) -> bool {
        self.accel.is_finite() && self.yaw_rate.is_finite()
    }
}

/// Symmetric action limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionBounds {
    pub a_max: f64,
    pub yaw_rate_max: f64,
}

impl Default for ActionBounds {
    fn default() -> Self {
        Self { a_max: 8.0, yaw_rate_max: 1.5 }
    }
}

impl ActionBounds {
    pub fn clamp(&self, a: Action) -> Action {
        Action {
            accel: a.accel.clamp(-self.a_max, self.a_max),
            yaw_rate: a.yaw_rate.clamp(-self.yaw_rate_max, self.yaw_rate_max),
        }
    }

    pub fn contains(&self, a: Action) -> bool {
        a.accel.abs() <= self.a_max && a.yaw_rate.abs() <= self.yaw_rate_max
    }

    /// Physical action → unit-scaled network channels.
    pub fn normalize(&self, a: Action) -> [f64; 2] {
        [a.accel / self.a_max, a.yaw_rate / self.yaw_rate_max]
    }

    pub fn denormalize(&self, v: [f64; 2]) -> Action {
        Action { accel: v[0] * self.a_max, yaw_rate: v[1] * self.yaw_rate_max }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self { x, y, heading: wrap_angle(heading) }
    }

    pub fn identity() -> Self {
        Self { x: 0.0, y: 0.0, heading: 0.0 }
    }
}

/// Values that can be expressed in an agent-local frame.
pub trait FrameTransform: Sized {
    fn to_local(&self, frame: &Pose2) -> Self;
    fn to_global(&self, frame: &Pose2) -> Self;
}

impl FrameTransform for [f64; 2] {
    fn to_local(&self, frame: &Pose2) -> Self {
        let (s, c) = frame.heading.sin_cos();
        let dx = self[0] - frame.x;
        let dy = self[1] - frame.y;
        [c * dx + s * dy, -s * dx + c * dy]
    }

    fn to_global(&self, frame: &Pose2) -> Self {
        let (s, c) = frame.heading.sin_cos();
        [c * self[0] - s * self[1] + frame.x, s * self[0] + c * self[1] + frame.y]
    }
}

impl FrameTransform for Pose2 {
    fn to_local(&self, frame: &Pose2) -> Self {
        let [x, y] = [self.x, self.y].to_local(frame);
        Pose2 { x, y, heading: wrap_angle(self.heading - frame.heading) }
    }

    fn to_global(&self, frame: &Pose2) -> Self {
        let [x, y] = [self.x, self.y].to_global(frame);
        Pose2 { x, y, heading: wrap_angle(self.heading + frame.heading) }
    }
}

impl FrameTransform for AgentState {
    fn to_local(&self, frame: &Pose2) -> Self {
        let p = self.pose().to_local(frame);
        AgentState { x: p.x, y: p.y, heading: p.heading, speed: self.speed }
    }

    fn to_global(&self, frame: &Pose2) -> Self {
        let p = self.pose().to_global(frame);
        AgentState { x: p.x, y: p.y, heading: p.heading, speed: self.speed }
    }
}

pub fn to_local<V: FrameTransform>(value: &V, frame: &Pose2) -> V {
    value.to_local(frame)
}

pub fn to_global<V: FrameTransform>(value: &V, frame: &Pose2) -> V {
    value.to_global(frame)
}

/// One explicit-Euler unicycle step. Position advances with the time-t speed
/// and heading; speed is floored at zero.
pub fn step_unicycle(state: &AgentState, action: &Action, dt: f64) -> Result<AgentState> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidInput(format!("dt must be positive and finite, got {dt}")));
    }
    if !state.is_finite() || !action.is_finite() {
        return Err(Error::InvalidInput("non-finite state or action".into()));
    }
    Ok(step_unchecked(state, action, dt))
}

#[inline]
pub(crate) fn step_unchecked(s: &AgentState, a: &Action, dt: f64) -> AgentState {
    let (sin, cos) = s.heading.sin_cos();
    AgentState {
        x: s.x + s.speed * cos * dt,
        y: s.y + s.speed * sin * dt,
        heading: wrap_angle(s.heading + a.yaw_rate * dt),
        speed: (s.speed + a.accel * dt).max(0.0),
    }
}

/// Time-indexed joint trajectory for `N` agents over `T` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    /// `N × (T+1)`
    pub states: Vec<Vec<AgentState>>,
    /// `N × T`
    pub actions: Vec<Vec<Action>>,
    /// `N × (T+1)`
    pub valid: Vec<Vec<bool>>,
}

impl Trajectory {
    pub fn agent_count(&self) -> usize {
        self.states.len()
    }

    pub fn horizon(&self) -> usize {
        self.actions.first().map_or(0, Vec::len)
    }

    pub fn last_states(&self) -> Vec<AgentState> {
        self.states.iter().map(|s| *s.last().expect("non-empty state row")).collect()
    }

    /// Positions of agent `i` at every step.
    pub fn positions(&self, i: usize) -> Vec<[f64; 2]> {
        self.states[i].iter().map(AgentState::position).collect()
    }

    /// Checks the dynamics invariant on every valid transition.
    pub fn max_dynamics_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.agent_count() {
            for t in 0..self.horizon() {
                if !(self.valid[i][t] && self.valid[i][t + 1]) {
                    continue;
                }
                let p = step_unchecked(&self.states[i][t], &self.actions[i][t], self.dt);
                let q = &self.states[i][t + 1];
                worst = worst
                    .max((p.x - q.x).abs())
                    .max((p.y - q.y).abs())
                    .max(wrap_angle(p.heading - q.heading).abs())
                    .max((p.speed - q.speed).abs());
            }
        }
        worst
    }

    /// Sub-trajectory over steps `[start, end]` (inclusive state indices).
    pub fn slice(&self, start: usize, end: usize) -> Trajectory {
        Trajectory {
            dt: self.dt,
            states: self.states.iter().map(|r| r[start..=end].to_vec()).collect(),
            actions: self.actions.iter().map(|r| r[start..end].to_vec()).collect(),
            valid: self.valid.iter().map(|r| r[start..=end].to_vec()).collect(),
        }
    }

    /// Single-agent view.
    pub fn agent(&self, i: usize) -> Trajectory {
        Trajectory {
            dt: self.dt,
            states: vec![self.states[i].clone()],
            actions: vec![self.actions[i].clone()],
            valid: vec![self.valid[i].clone()],
        }
    }
}

/// Chains `step_unicycle` for every agent from `initial`.
pub fn rollout(initial: &[AgentState], actions: &[Vec<Action>], dt: f64) -> Result<Trajectory> {
    if initial.len() != actions.len() {
        return Err(Error::Shape(format!(
            "{} initial states but {} action rows",
            initial.len(),
            actions.len()
        )));
    }
    let horizon = actions.first().map_or(0, Vec::len);
    if actions.iter().any(|r| r.len() != horizon) {
        return Err(Error::Shape("ragged action grid".into()));
    }
    let mut states = Vec::with_capacity(initial.len());
    for (s0, row) in initial.iter().zip(actions) {
        let mut seq = Vec::with_capacity(horizon + 1);
        seq.push(*s0);
        let mut s = *s0;
        for a in row {
            s = step_unicycle(&s, a, dt)?;
            seq.push(s);
        }
        states.push(seq);
    }
    Ok(Trajectory {
        dt,
        valid: vec![vec![true; horizon + 1]; initial.len()],
        states,
        actions: actions.to_vec(),
    })
}

/// Recovers the actions that reproduce a logged state sequence, clamped to
/// `bounds`.
pub fn inverse_dynamics(states: &[AgentState], dt: f64, bounds: &ActionBounds) -> Vec<Action> {
    states
        .windows(2)
        .map(|w| {
            bounds.clamp(Action {
                accel: (w[1].speed - w[0].speed) / dt,
                yaw_rate: wrap_angle(w[1].heading - w[0].heading) / dt,
            })
        })
        .collect()
}

/// Adjoint of a state: ∂L/∂(x, y, heading, speed).
pub type StateGrad = [f64; 4];

/// Vector-Jacobian product of `rollout` for one agent. `state_grads[t]` is the
/// upstream gradient on state `t` (index 0 is the fixed initial state and is
/// ignored). Returns the gradient on each action.
pub fn rollout_vjp(initial: &AgentState, actions: &[Action], dt: f64, state_grads: &[StateGrad]) -> Vec<[f64; 2]> {
    let horizon = actions.len();
    debug_assert_eq!(state_grads.len(), horizon + 1);
    let mut states = Vec::with_capacity(horizon + 1);
    states.push(*initial);
    for a in actions {
        let s = step_unchecked(states.last().unwrap(), a, dt);
        states.push(s);
    }
    let mut out = vec![[0.0; 2]; horizon];
    let mut adj = [0.0; 4];
    for t in (0..horizon).rev() {
        for c in 0..4 {
            adj[c] += state_grads[t + 1][c];
        }
        let s = &states[t];
        let a = &actions[t];
        let moving = s.speed + a.accel * dt > 0.0;
        let speed_pass = if moving { 1.0 } else { 0.0 };
        out[t] = [adj[3] * speed_pass * dt, adj[2] * dt];
        let (sin, cos) = s.heading.sin_cos();
        let [ax, ay, ah, av] = adj;
        adj = [
            ax,
            ay,
            ah + ax * (-s.speed * sin * dt) + ay * (s.speed * cos * dt),
            av * speed_pass + ax * cos * dt + ay * sin * dt,
        ];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn step_examples() {
        let s = step_unicycle(&AgentState::new(0.0, 0.0, 0.0, 10.0), &Action::new(0.0, 0.0), 0.5).unwrap();
        assert_eq!(s, AgentState::new(5.0, 0.0, 0.0, 10.0));

        let s = step_unicycle(&AgentState::new(0.0, 0.0, PI / 2.0, 4.0), &Action::default(), 0.5).unwrap();
        assert!(close(s.x, 0.0, 1e-12) && close(s.y, 2.0, 1e-12));
        assert!(close(s.heading, PI / 2.0, 1e-15) && s.speed == 4.0);

        // x' = 0 + 2·1·0.5, θ' = 0 + 1·0.5, v' = 2 + 2·0.5
        let s = step_unicycle(&AgentState::new(0.0, 0.0, 0.0, 2.0), &Action::new(2.0, 1.0), 0.5).unwrap();
        assert_eq!((s.x, s.y, s.heading, s.speed), (1.0, 0.0, 0.5, 3.0));
    }

    #[test]
    fn step_rejects_bad_input() {
        let s = AgentState::new(0.0, 0.0, 0.0, 1.0);
        assert!(step_unicycle(&s, &Action::new(f64::NAN, 0.0), 0.5).is_err());
        assert!(step_unicycle(&s, &Action::default(), 0.0).is_err());
        let bad = AgentState { x: f64::INFINITY, ..s };
        assert!(step_unicycle(&bad, &Action::default(), 0.5).is_err());
    }

    #[test]
    fn speed_floor() {
        let s = step_unicycle(&AgentState::new(0.0, 0.0, 0.0, 1.0), &Action::new(-8.0, 0.0), 0.5).unwrap();
        assert_eq!(s.speed, 0.0);
    }

    #[test]
    fn rollout_examples() {
        let t = rollout(&[AgentState::new(0.0, 0.0, 0.0, 3.0)], &[vec![]], DT).unwrap();
        assert_eq!(t.states[0].len(), 1);
        assert_eq!(t.horizon(), 0);

        let t = rollout(&[AgentState::new(0.0, 0.0, 0.0, 10.0)], &[vec![Action::default(); 16]], DT).unwrap();
        let last = t.states[0][16];
        assert!(close(last.x, 80.0, 1e-9) && last.y == 0.0);

        assert!(rollout(&[AgentState::new(0.0, 0.0, 0.0, 1.0)], &[], DT).is_err());
    }

    #[test]
    fn inverse_dynamics_examples() {
        let states: Vec<_> = (0..5).map(|i| AgentState::new(5.0 * i as f64, 0.0, 0.0, 10.0)).collect();
        assert!(inverse_dynamics(&states, DT, &ActionBounds::default())
            .iter()
            .all(|a| a.accel == 0.0 && a.yaw_rate == 0.0));

        let w = inverse_dynamics(
            &[AgentState::new(0.0, 0.0, 3.0, 1.0), AgentState::new(0.0, 0.0, -3.0, 1.0)],
            0.5,
            &ActionBounds::default(),
        );
        // shortest path from 3.0 to -3.0 is +2(π-3) rad, over 0.5 s
        assert!(close(w[0].yaw_rate, 2.0 * (PI - 3.0) / 0.5, 1e-12));
        assert!(close(w[0].yaw_rate, 0.5664, 1e-4));

        assert!(inverse_dynamics(&[AgentState::new(0.0, 0.0, 0.0, 0.0)], DT, &ActionBounds::default()).is_empty());
    }

    #[test]
    fn frame_examples() {
        let p = [3.0, -2.0];
        assert_eq!(to_local(&p, &Pose2::identity()), p);
        let local = to_local(&[1.0, 0.0], &Pose2::new(0.0, 0.0, PI / 2.0));
        assert!(close(local[0], 0.0, 1e-15) && close(local[1], -1.0, 1e-15));

        let f = Pose2::new(4.0, -7.0, 2.3);
        let s = AgentState::new(1.0, 2.0, -2.9, 5.0);
        let back = to_global(&to_local(&s, &f), &f);
        assert!(close(back.x, s.x, 1e-12) && close(back.y, s.y, 1e-12));
        assert!(close(wrap_angle(back.heading - s.heading), 0.0, 1e-12));
    }

    #[test]
    fn wrap_lands_in_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!(close(wrap_angle(3.0 * PI), PI, 1e-12));
        assert!(close(wrap_angle(-7.0), -7.0 + 2.0 * PI, 1e-12));
    }

    #[test]
    fn rollout_vjp_matches_finite_differences() {
        let s0 = AgentState::new(1.0, 2.0, 0.3, 4.0);
        let acts: Vec<_> = (0..6).map(|t| Action::new(0.5 - 0.2 * t as f64, 0.1 * (t as f64).sin())).collect();
        let w: Vec<StateGrad> = (0..7).map(|t| [0.3 * t as f64, -0.2, 0.7, 0.1 * t as f64]).collect();
        let objective = |acts: &[Action]| -> f64 {
            let tr = rollout(&[s0], &[acts.to_vec()], DT).unwrap();
            tr.states[0]
                .iter()
                .zip(&w)
                .skip(1)
                .map(|(s, g)| g[0] * s.x + g[1] * s.y + g[2] * s.heading + g[3] * s.speed)
                .sum()
        };
        let g = rollout_vjp(&s0, &acts, DT, &w);
        let h = 1e-6;
        for t in 0..acts.len() {
            for c in 0..2 {
                let mut p = acts.clone();
                let mut m = acts.clone();
                if c == 0 {
                    p[t].accel += h;
                    m[t].accel -= h;
                } else {
                    p[t].yaw_rate += h;
                    m[t].yaw_rate -= h;
                }
                let fd = (objective(&p) - objective(&m)) / (2.0 * h);
                assert!((fd - g[t][c]).abs() < 1e-6 * (1.0 + fd.abs()), "t={t} c={c} fd={fd} an={}", g[t][c]);
            }
        }
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn inverse_dynamics_round_trip(
            x in -50.0..50.0f64, y in -50.0..50.0f64, h in -3.1..3.1f64, v in 5.0..15.0f64,
            raw in proptest::collection::vec((-1.0..1.0f64, -0.4..0.4f64), 1..12),
        ) {
            let acts: Vec<Action> = raw.iter().map(|&(a, w)| Action::new(a, w)).collect();
            let tr = rollout(&[AgentState::new(x, y, h, v)], &[acts.clone()], DT).unwrap();
            prop_assert_eq!(tr.states[0].len(), acts.len() + 1);
            prop_assert!(tr.states[0].iter().all(|s| s.speed > 0.0));
            let rec = inverse_dynamics(&tr.states[0], DT, &ActionBounds::default());
            for (a, b) in rec.iter().zip(&acts) {
                prop_assert!((a.accel - b.accel).abs() < 1e-9);
                prop_assert!((a.yaw_rate - b.yaw_rate).abs() < 1e-9);
            }
        }

        #[test]
        fn wrap_is_idempotent(a in -100.0..100.0f64) {
            let w = wrap_angle(a);
            prop_assert!(w > -PI && w <= PI);
            prop_assert_eq!(wrap_angle(w), w);
        }

        #[test]
        fn speed_never_negative(v in 0.0..30.0f64, a in -1e3..1e3f64, w in -5.0..5.0f64, dt in 0.01..2.0f64) {
            let s = step_unicycle(&AgentState::new(0.0, 0.0, 0.0, v), &Action::new(a, w), dt).unwrap();
            prop_assert!(s.speed >= 0.0);
        }

        #[test]
        fn frame_round_trip(px in -1e3..1e3f64, py in -1e3..1e3f64, fx in -1e3..1e3f64, fy in -1e3..1e3f64, fh in -3.1..3.1f64) {
            let f = Pose2::new(fx, fy, fh);
            let back = to_global(&to_local(&[px, py], &f), &f);
            prop_assert!((back[0] - px).abs() < 1e-12 * (1.0 + px.abs().max(fx.abs())));
            prop_assert!((back[1] - py).abs() < 1e-12 * (1.0 + py.abs().max(fy.abs())));
        }
    }
}
