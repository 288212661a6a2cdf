//! Closed-loop simulation with replanning: every `replan` steps the scene is
//! re-encoded from the executed history, a joint plan is sampled, and the
//! first `replan` steps of the selected sample are executed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{sample_joint, GuidanceConfig, GuidanceCost, NoiseSchedule, SampleConfig, SampleInput};
use crate::error::{Error, Result};
use crate::model::{DenoiserParams, PromptSlot, SceneContext, LANE_POINT_SPACING};
use crate::scene::{step_unicycle, Action, AgentState, Trajectory};
use crate::synth::{scenario_seed, Scenario};

/// Simulation steps between plans (1 s at 0.5 s).
pub const REPLAN_STEPS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    Uncond,
    Text,
    /// Collision guidance on the interest pair's first agent.
    Adversarial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub mode: SimMode,
    pub steps: usize,
    pub replan: usize,
    /// Closed-loop rollouts kept per scenario.
    pub rollouts: usize,
    /// Joint samples per plan, plus CFG weight, sampler and seed.
    pub sample: SampleConfig,
    pub guidance_alpha: f64,
    pub guidance_steps: usize,
    /// Text conditioning alongside adversarial guidance.
    pub adversarial_text: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            mode: SimMode::Text,
            steps: 16,
            replan: REPLAN_STEPS,
            rollouts: 8,
            sample: SampleConfig { samples: 4, ..SampleConfig::default() },
            guidance_alpha: 0.05,
            guidance_steps: 1,
            adversarial_text: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.replan == 0 || self.rollouts == 0 {
            return Err(Error::InvalidInput("steps, replan and rollouts must be positive".into()));
        }
        if !self.guidance_alpha.is_finite() {
            return Err(Error::InvalidInput("guidance step size must be finite".into()));
        }
        self.sample.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplanRecord {
    pub t: usize,
    pub selected: usize,
    pub costs: Vec<f64>,
    pub guidance_aborted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRollout {
    /// Starts at the current state.
    pub trajectory: Trajectory,
    pub replans: Vec<ReplanRecord>,
}

fn prompts_of(s: &Scenario) -> Vec<PromptSlot> {
    s.prompts.iter().cloned().map(Some).collect()
}

/// One closed-loop rollout keyed by `seed`.
pub fn simulate_once(params: &DenoiserParams, sched: &NoiseSchedule, scenario: &Scenario, cfg: &SimConfig, seed: u64) -> Result<SimRollout> {
    cfg.validate()?;
    let n = scenario.agent_count();
    let dt = scenario.history.dt;
    let prompts = prompts_of(scenario);
    let mut sample = cfg.sample.clone();
    let use_text = match cfg.mode {
        SimMode::Uncond => false,
        SimMode::Text => true,
        SimMode::Adversarial => {
            let (a, b) = scenario.interest_pair;
            if n < 2 || a == b {
                return Err(Error::InvalidInput("adversarial mode needs an interest pair".into()));
            }
            sample.guidance = Some(GuidanceConfig { cost: GuidanceCost::Collision { adversary: a, target: b }, alpha: cfg.guidance_alpha, steps: cfg.guidance_steps });
            cfg.adversarial_text
        }
    };
    let current = |i: usize| -> Option<AgentState> {
        scenario.history.states[i].iter().zip(&scenario.history.valid[i]).rev().find(|(_, v)| **v).map(|(s, _)| *s)
    };
    let present: Vec<bool> = (0..n).map(|i| current(i).is_some()).collect();
    let mut states: Vec<Vec<AgentState>> = (0..n).map(|i| vec![current(i).unwrap_or(AgentState::new(0.0, 0.0, 0.0, 0.0))]).collect();
    let mut actions: Vec<Vec<Action>> = vec![Vec::with_capacity(cfg.steps); n];
    let lanes = scenario.map.lane_points(LANE_POINT_SPACING);
    let mut replans = Vec::new();
    let mut t0 = 0;
    while t0 < cfg.steps {
        let ctx = SceneContext {
            history: (0..n).map(|i| scenario.history.states[i].iter().chain(&states[i][1..]).copied().collect()).collect(),
            hist_valid: (0..n).map(|i| scenario.history.valid[i].iter().copied().chain(std::iter::repeat_n(present[i], states[i].len() - 1)).collect()).collect(),
            lane_points: lanes.clone(),
            drop_history: false,
        };
        let input = SampleInput { ctx: &ctx, dims: &scenario.agent_dims, prompts: if use_text { Some(&prompts) } else { None } };
        let plan_cfg = SampleConfig { seed: scenario_seed(seed, t0 as u64), ..sample.clone() };
        let out = sample_joint(params, sched, &input, &plan_cfg)?;
        let best = out.best();
        let run = cfg.replan.min(cfg.steps - t0);
        for i in 0..n {
            for s in 0..run {
                // plans shorter than the replan interval coast
                let a = best.trajectory.actions[i].get(s).copied().unwrap_or(Action::new(0.0, 0.0));
                let cur = *states[i].last().unwrap();
                states[i].push(step_unicycle(&cur, &a, dt)?);
                actions[i].push(a);
            }
        }
        replans.push(ReplanRecord {
            t: t0,
            selected: out.selected,
            costs: out.samples.iter().map(|s| s.no_collision).collect(),
            guidance_aborted: out.samples.iter().map(|s| s.guidance_aborted).sum(),
        });
        t0 += run;
    }
    let valid = present.iter().map(|p| vec![*p; cfg.steps + 1]).collect();
    Ok(SimRollout { trajectory: Trajectory { dt, states, actions, valid }, replans })
}

/// `cfg.rollouts` closed-loop rollouts of one scenario. Seeds derive from
/// the run seed and the scenario's own seed, so sharding does not matter.
pub fn simulate(params: &DenoiserParams, sched: &NoiseSchedule, scenario: &Scenario, cfg: &SimConfig) -> Result<Vec<SimRollout>> {
    let base = scenario_seed(cfg.sample.seed, scenario.seed);
    (0..cfg.rollouts).into_par_iter().map(|r| simulate_once(params, sched, scenario, cfg, scenario_seed(base, r as u64))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{cosine_schedule, COSINE_OFFSET};
    use crate::model::{init_params, ModelConfig};
    use crate::synth::{sample_scenario, ScenarioKind};

    fn setup() -> (DenoiserParams, NoiseSchedule, Scenario) {
        let cfg = ModelConfig { d_model: 16, d_lang: 8, heads: 2, k_map: 4, k_nbr: 2, ..ModelConfig::default() };
        (init_params(1, &cfg).unwrap(), cosine_schedule(3, COSINE_OFFSET).unwrap(), sample_scenario(ScenarioKind::HeadOn, 2).unwrap())
    }

    #[test]
    fn deterministic_and_feasible() {
        let (p, s, sc) = setup();
        let cfg = SimConfig { rollouts: 2, sample: SampleConfig { samples: 2, seed: 5, ..SampleConfig::default() }, ..SimConfig::default() };
        let a = simulate(&p, &s, &sc, &cfg).unwrap();
        assert_eq!(a, simulate(&p, &s, &sc, &cfg).unwrap());
        assert_ne!(a[0].trajectory, a[1].trajectory);
        for r in &a {
            assert_eq!(r.trajectory.horizon(), 16);
            assert_eq!(r.replans.len(), 8);
            assert!(r.trajectory.max_dynamics_residual() < 1e-9);
            assert_eq!(r.trajectory.states[0][0], sc.current_states()[0]);
        }
        let adv = SimConfig { mode: SimMode::Adversarial, ..cfg.clone() };
        assert!(simulate(&p, &s, &sc, &adv).is_ok());
    }

    /// With M = 1 and one plan covering the whole horizon the rollout is the
    /// unrolled single joint sample.
    #[test]
    fn single_plan_matches_sample_joint() {
        let (p, s, sc) = setup();
        let cfg = SimConfig { rollouts: 1, replan: 16, mode: SimMode::Uncond, sample: SampleConfig { samples: 1, seed: 9, ..SampleConfig::default() }, ..SimConfig::default() };
        let r = simulate_once(&p, &s, &sc, &cfg, 77).unwrap();
        let ctx = SceneContext::from_scenario(&sc);
        let j = sample_joint(&p, &s, &SampleInput { ctx: &ctx, dims: &sc.agent_dims, prompts: None }, &SampleConfig { seed: scenario_seed(77, 0), ..cfg.sample.clone() }).unwrap();
        assert_eq!(r.trajectory.states, j.best().trajectory.states);
    }
}
