//! Cosine noise schedule, forward noising, DDPM/DDIM reverse steps,
//! classifier-free guidance, clean guidance and best-of-M joint sampling.
//!
//! Action fields are `N × 2T` matrices in normalized units, interleaved per
//! step as `[a_0, ω_0, a_1, ω_1, …]`.

use std::f64::consts::FRAC_PI_2;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costs::{collision_cost, collision_cost_grad, no_collision_loss, no_collision_loss_excluding, no_collision_loss_grad, DiskSet};
use crate::error::{Error, Result};
use crate::geometry::AgentDims;
use crate::model::{cache_condition, denoise_cached, CachedCondition, DenoiserParams, PromptSlot, SceneContext};
use crate::nn::Mat;
use crate::scene::{rollout, rollout_vjp, Action, ActionBounds, AgentState, StateGrad, Trajectory, DT};
use crate::synth::scenario_seed;

/// `beta`, `alpha` and `alpha_bar` all have length `K + 1`; index 0 holds
/// `β = 0`, `α = ᾱ = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub k: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// ᾱ from the squared-cosine curve, β clipped at 0.999 and ᾱ re-accumulated
/// from the clipped β so the product identity holds exactly.
pub fn cosine_schedule(k: usize, s: f64) -> Result<NoiseSchedule> {
    if k < 1 {
        return Err(Error::InvalidInput("schedule needs K >= 1".into()));
    }
    if !(s.is_finite() && s >= 0.0) {
        return Err(Error::InvalidInput(format!("cosine offset {s}")));
    }
    let f = |j: usize| (((j as f64 / k as f64) + s) / (1.0 + s) * FRAC_PI_2).cos().powi(2);
    let f0 = f(0);
    let mut beta = vec![0.0];
    let mut alpha = vec![1.0];
    let mut alpha_bar = vec![1.0];
    for j in 1..=k {
        let b = (1.0 - (f(j) / f0) / (f(j - 1) / f0)).clamp(1e-12, MAX_BETA);
        beta.push(b);
        alpha.push(1.0 - b);
        alpha_bar.push(alpha_bar[j - 1] * (1.0 - b));
    }
    Ok(NoiseSchedule { k, beta, alpha, alpha_bar })
}

impl NoiseSchedule {
    fn check(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.k {
            return Err(Error::InvalidInput(format!("diffusion step {k} outside 1..={}", self.k)));
        }
        Ok(())
    }

    /// DDPM posterior variance `β̃_k`.
    pub fn posterior_variance(&self, k: usize) -> f64 {
        self.beta[k] * (1.0 - self.alpha_bar[k - 1]) / (1.0 - self.alpha_bar[k])
    }
}

fn same_shape(a: &Mat, b: &Mat) -> Result<()> {
    if (a.rows, a.cols) != (b.rows, b.cols) {
        return Err(Error::Shape(format!("{}x{} vs {}x{}", a.rows, a.cols, b.rows, b.cols)));
    }
    Ok(())
}

fn affine(a: &Mat, ca: f64, b: &Mat, cb: f64) -> Mat {
    Mat::from_vec(a.rows, a.cols, a.data.iter().zip(&b.data).map(|(x, y)| ca * x + cb * y).collect())
}

pub fn forward_noise(tau0: &Mat, k: usize, sched: &NoiseSchedule, eps: &Mat) -> Result<Mat> {
    sched.check(k)?;
    same_shape(tau0, eps)?;
    let ab = sched.alpha_bar[k];
    Ok(affine(tau0, ab.sqrt(), eps, (1.0 - ab).sqrt()))
}

pub fn posterior_mean(tau_k: &Mat, tau0_hat: &Mat, k: usize, sched: &NoiseSchedule) -> Result<Mat> {
    sched.check(k)?;
    same_shape(tau_k, tau0_hat)?;
    let (ab, ab_prev) = (sched.alpha_bar[k], sched.alpha_bar[k - 1]);
    let c0 = ab_prev.sqrt() * sched.beta[k] / (1.0 - ab);
    let ck = sched.alpha[k].sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    Ok(affine(tau0_hat, c0, tau_k, ck))
}

/// Posterior mean plus `√β̃_k · z`.
pub fn ddpm_step(tau_k: &Mat, tau0_hat: &Mat, k: usize, sched: &NoiseSchedule, z: &Mat) -> Result<Mat> {
    let mean = posterior_mean(tau_k, tau0_hat, k, sched)?;
    same_shape(&mean, z)?;
    Ok(affine(&mean, 1.0, z, sched.posterior_variance(k).sqrt()))
}

/// DDIM update with stride 1. `z` is only read when `eta > 0`.
pub fn ddim_step(tau_k: &Mat, tau0_hat: &Mat, k: usize, sched: &NoiseSchedule, eta: f64, z: Option<&Mat>) -> Result<Mat> {
    sched.check(k)?;
    same_shape(tau_k, tau0_hat)?;
    let (ab, ab_prev) = (sched.alpha_bar[k], sched.alpha_bar[k - 1]);
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).max(0.0).sqrt();
    let eps_hat = affine(tau_k, 1.0 / (1.0 - ab).sqrt(), tau0_hat, -ab.sqrt() / (1.0 - ab).sqrt());
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut out = affine(tau0_hat, ab_prev.sqrt(), &eps_hat, dir);
    if sigma > 0.0 {
        let z = z.ok_or_else(|| Error::InvalidInput("stochastic DDIM step needs noise".into()))?;
        same_shape(&out, z)?;
        out = affine(&out, 1.0, z, sigma);
    }
    Ok(out)
}

/// `(1 + w)·cond − w·uncond`.
pub fn cfg_combine(cond: &Mat, uncond: &Mat, w: f64) -> Result<Mat> {
    same_shape(cond, uncond)?;
    if !w.is_finite() {
        return Err(Error::InvalidInput(format!("guidance weight {w}")));
    }
    Ok(affine(cond, 1.0 + w, uncond, -w))
}

/// Physical actions → normalized `N × 2T` field.
pub fn actions_to_field(actions: &[Vec<Action>], bounds: &ActionBounds) -> Mat {
    let t = actions.first().map_or(0, Vec::len);
    let mut m = Mat::zeros(actions.len(), 2 * t);
    for (i, row) in actions.iter().enumerate() {
        for (s, a) in row.iter().enumerate() {
            let v = bounds.normalize(*a);
            m.data[i * 2 * t + 2 * s] = v[0];
            m.data[i * 2 * t + 2 * s + 1] = v[1];
        }
    }
    m
}

/// Normalized field → clamped physical actions.
pub fn field_to_actions(tau: &Mat, bounds: &ActionBounds) -> Vec<Vec<Action>> {
    (0..tau.rows)
        .map(|i| tau.row(i).chunks(2).map(|c| bounds.clamp(bounds.denormalize([c[0], c[1]]))).collect())
        .collect()
}

/// A scalar objective over a normalized action field.
pub trait Objective: Sync {
    fn value_grad(&self, tau0: &Mat) -> Result<(f64, Mat)>;
}

/// `½‖τ‖²`.
pub struct HalfSquaredNorm;

impl Objective for HalfSquaredNorm {
    fn value_grad(&self, tau0: &Mat) -> Result<(f64, Mat)> {
        Ok((0.5 * tau0.data.iter().map(|v| v * v).sum::<f64>(), tau0.clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GuidanceCost {
    /// Pulls the adversary towards the target: the objective descended is
    /// the summed center distance `−J_coll`, since descending `J_coll` itself
    /// would push the pair apart. Only the adversary receives gradient.
    Collision { adversary: usize, target: usize },
    NoCollision { use_max: bool },
}

/// A trajectory cost evaluated on the unrolled states of a decoded field.
pub struct RolloutObjective<'a> {
    pub initial: &'a [AgentState],
    pub present: &'a [bool],
    pub disks: &'a [DiskSet],
    pub bounds: ActionBounds,
    pub dt: f64,
    pub cost: GuidanceCost,
}

impl RolloutObjective<'_> {
    pub fn unroll(&self, tau0: &Mat) -> Result<Trajectory> {
        unroll(self.initial, self.present, tau0, &self.bounds, self.dt)
    }
}

/// Decodes a field and rolls it out; absent agents are marked invalid.
pub fn unroll(initial: &[AgentState], present: &[bool], tau: &Mat, bounds: &ActionBounds, dt: f64) -> Result<Trajectory> {
    if initial.len() != tau.rows || present.len() != tau.rows {
        return Err(Error::Shape(format!("{} initial states for {} field rows", initial.len(), tau.rows)));
    }
    let mut traj = rollout(initial, &field_to_actions(tau, bounds), dt)?;
    for (v, p) in traj.valid.iter_mut().zip(present) {
        if !p {
            v.iter_mut().for_each(|x| *x = false);
        }
    }
    Ok(traj)
}

impl Objective for RolloutObjective<'_> {
    fn value_grad(&self, tau0: &Mat) -> Result<(f64, Mat)> {
        let traj = self.unroll(tau0)?;
        let n = traj.agent_count();
        let (value, sg): (f64, Vec<Vec<StateGrad>>) = match self.cost {
            GuidanceCost::Collision { adversary, target } => {
                let j = collision_cost(&traj, adversary, target)?;
                let g = collision_cost_grad(&traj, adversary, target)?;
                let mut sg = vec![vec![[0.0; 4]; traj.horizon() + 1]; n];
                for (t, p) in g.iter().enumerate() {
                    sg[adversary][t] = [-p[0], -p[1], 0.0, 0.0];
                }
                (-j, sg)
            }
            GuidanceCost::NoCollision { use_max } => {
                (no_collision_loss(&traj, self.disks, use_max), no_collision_loss_grad(&traj, self.disks, use_max))
            }
        };
        let mut grad = Mat::zeros(tau0.rows, tau0.cols);
        let scale = [self.bounds.a_max, self.bounds.yaw_rate_max];
        for i in 0..n {
            if !self.present[i] || sg[i].iter().all(|g| *g == [0.0; 4]) {
                continue;
            }
            let ag = rollout_vjp(&self.initial[i], &traj.actions[i], self.dt, &sg[i]);
            let row = tau0.row(i);
            for (t, g) in ag.iter().enumerate() {
                for c in 0..2 {
                    // clamp passes gradient only inside the bounds
                    if row[2 * t + c].abs() <= 1.0 {
                        grad.data[i * tau0.cols + 2 * t + c] = g[c] * scale[c];
                    }
                }
            }
        }
        Ok((value, grad))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Guided {
    pub tau0: Mat,
    /// Guidance hit a non-finite value or gradient and was skipped.
    pub aborted: bool,
}

/// `n_steps` descent steps `τ ← τ − α∇J(τ)` on the clean estimate.
pub fn apply_clean_guidance(tau0_hat: &Mat, objective: &dyn Objective, alpha_g: f64, n_steps: usize) -> Result<Guided> {
    if alpha_g == 0.0 || n_steps == 0 {
        return Ok(Guided { tau0: tau0_hat.clone(), aborted: false });
    }
    let mut tau = tau0_hat.clone();
    for _ in 0..n_steps {
        let (j, g) = objective.value_grad(&tau)?;
        same_shape(&tau, &g)?;
        if !j.is_finite() || !g.is_finite() {
            return Ok(Guided { tau0: tau0_hat.clone(), aborted: true });
        }
        tau = affine(&tau, 1.0, &g, -alpha_g);
    }
    if !tau.is_finite() {
        return Ok(Guided { tau0: tau0_hat.clone(), aborted: true });
    }
    Ok(Guided { tau0: tau, aborted: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    Ddim,
    Ddpm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub cost: GuidanceCost,
    pub alpha: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub samples: usize,
    pub cfg_weight: f64,
    pub guidance: Option<GuidanceConfig>,
    pub sampler: Sampler,
    pub eta: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { samples: 8, cfg_weight: 0.0, guidance: None, sampler: Sampler::Ddim, eta: 0.0, seed: 0 }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::InvalidInput("need at least one joint sample".into()));
        }
        if !self.cfg_weight.is_finite() || !self.eta.is_finite() || self.eta < 0.0 {
            return Err(Error::InvalidInput("cfg weight and eta must be finite, eta >= 0".into()));
        }
        if let Some(g) = &self.guidance {
            if !g.alpha.is_finite() {
                return Err(Error::InvalidInput("guidance step size must be finite".into()));
            }
        }
        Ok(())
    }
}

/// What the sampler needs about the scene.
pub struct SampleInput<'a> {
    pub ctx: &'a SceneContext,
    pub dims: &'a [AgentDims],
    /// Per-agent prompts; `None` samples unconditionally.
    pub prompts: Option<&'a [PromptSlot]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointSample {
    pub trajectory: Trajectory,
    /// Final clean field that was unrolled.
    pub tau0: Mat,
    /// Noisy input of the last (k = 1) denoiser call.
    pub last_input: Mat,
    pub no_collision: f64,
    pub guidance_aborted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointSamples {
    pub samples: Vec<JointSample>,
    /// Lowest non-collision loss, ties to the lowest index.
    pub selected: usize,
}

impl JointSamples {
    pub fn best(&self) -> &JointSample {
        &self.samples[self.selected]
    }
}

fn normal_field(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect())
}

/// Clean-field prediction with classifier-free guidance. `w = 0` and
/// `w = −1` skip the branch they do not need.
pub fn predict_clean(params: &DenoiserParams, cached: &CachedCondition, tau: &Mat, k: usize, k_total: usize, w: f64) -> Result<Mat> {
    if cached.z_lang_cond.is_none() || w == -1.0 {
        return denoise_cached(params, cached, tau, k, k_total, false);
    }
    let cond = denoise_cached(params, cached, tau, k, k_total, true)?;
    if w == 0.0 {
        return Ok(cond);
    }
    let uncond = denoise_cached(params, cached, tau, k, k_total, false)?;
    cfg_combine(&cond, &uncond, w)
}

/// Initial states and presence flags at the current step.
pub fn current_states(ctx: &SceneContext) -> (Vec<AgentState>, Vec<bool>) {
    (0..ctx.agent_count()).map(|i| ctx.current(i).map_or((AgentState::new(0.0, 0.0, 0.0, 0.0), false), |s| (s, true))).unzip()
}

/// Draws `samples` joint futures and selects the one with the lowest
/// non-collision loss. Under collision guidance the adversary/target pair is
/// left out of the selection loss, since that contact is the goal.
pub fn sample_joint(params: &DenoiserParams, sched: &NoiseSchedule, input: &SampleInput, cfg: &SampleConfig) -> Result<JointSamples> {
    cfg.validate()?;
    let n = input.ctx.agent_count();
    if input.dims.len() != n {
        return Err(Error::Shape(format!("{} agent dims for {n} agents", input.dims.len())));
    }
    if let Some(p) = input.prompts {
        if p.len() != n {
            return Err(Error::Shape(format!("{} prompts for {n} agents", p.len())));
        }
    }
    let cached = cache_condition(params, input.ctx, input.prompts)?;
    let (initial, present) = current_states(input.ctx);
    let disks: Vec<DiskSet> = input.dims.iter().map(|d| DiskSet::for_dims(*d)).collect();
    let bounds = ActionBounds::default();
    let cols = 2 * params.config.horizon;
    let skip = match cfg.guidance.map(|g| g.cost) {
        Some(GuidanceCost::Collision { adversary, target }) => {
            if adversary >= n || target >= n || adversary == target {
                return Err(Error::InvalidInput(format!("bad adversarial pair ({adversary}, {target})")));
            }
            Some((adversary, target))
        }
        _ => None,
    };
    let run = |m: usize| -> Result<JointSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(scenario_seed(cfg.seed, m as u64));
        let mut tau = normal_field(&mut rng, n, cols);
        let mut aborted = 0;
        let mut last_input = tau.clone();
        let mut tau0 = tau.clone();
        for k in (1..=sched.k).rev() {
            let mut x0 = predict_clean(params, &cached, &tau, k, sched.k, cfg.cfg_weight)?;
            if let Some(g) = &cfg.guidance {
                let obj = RolloutObjective { initial: &initial, present: &present, disks: &disks, bounds, dt: DT, cost: g.cost };
                let out = apply_clean_guidance(&x0, &obj, g.alpha, g.steps)?;
                aborted += out.aborted as usize;
                x0 = out.tau0;
            }
            if k == 1 {
                last_input = tau.clone();
                tau0 = x0.clone();
            }
            tau = match cfg.sampler {
                Sampler::Ddim if cfg.eta == 0.0 => ddim_step(&tau, &x0, k, sched, 0.0, None)?,
                Sampler::Ddim => {
                    let z = normal_field(&mut rng, n, cols);
                    ddim_step(&tau, &x0, k, sched, cfg.eta, Some(&z))?
                }
                Sampler::Ddpm => {
                    let z = normal_field(&mut rng, n, cols);
                    ddpm_step(&tau, &x0, k, sched, &z)?
                }
            };
        }
        // both samplers return τ̂_0 exactly at k = 1 (ᾱ_0 = 1)
        let trajectory = unroll(&initial, &present, &tau, &bounds, DT)?;
        let no_collision = no_collision_loss_excluding(&trajectory, &disks, false, skip);
        Ok(JointSample { trajectory, tau0, last_input, no_collision, guidance_aborted: aborted })
    };
    let samples: Vec<JointSample> = (0..cfg.samples).into_par_iter().map(run).collect::<Result<_>>()?;
    let mut selected = 0;
    for (m, s) in samples.iter().enumerate() {
        if s.no_collision < samples[selected].no_collision {
            selected = m;
        }
    }
    Ok(JointSamples { samples, selected })
}
