//! Adam, open-loop x0-prediction training, schedule retargeting and
//! closed-loop training with teacher forcing.
//!
//! Every stochastic draw comes from a ChaCha stream keyed by
//! `(seed, iteration, batch slot)`, and per-sample gradients are reduced in
//! batch order, so results do not depend on the rayon thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costs::{no_collision_loss, no_collision_loss_grad, DiskSet};
use crate::diffusion::{actions_to_field, cosine_schedule, field_to_actions, forward_noise, NoiseSchedule, COSINE_OFFSET};
use crate::error::{Error, Result};
use crate::model::{cache_condition, denoise_cached, denoise_grad, init_params, DenoiserParams, ModelConfig, PromptSlot, SceneContext};
use crate::nn::Mat;
use crate::scene::{rollout_vjp, step_unicycle, Action, ActionBounds, AgentState, StateGrad};
use crate::synth::{scenario_seed, Scenario};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Diffusion steps.
    pub k: usize,
    /// Fraction of open-loop iterations trained without text.
    pub uncond_stage_frac: f64,
    pub cond_dropout_prob: f64,
    pub history_dropout_prob: f64,
    /// Forward-diffusion ratio for closed-loop noise levels.
    pub gamma: f64,
    pub t_replan: usize,
    /// Closed-loop horizon in steps.
    pub closed_loop_steps: usize,
    pub candidates: usize,
    pub teacher_forcing_prob: f64,
    pub teacher_agent_frac: f64,
    pub aux_noncollision_weight: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Cosine decay of the learning rate to this fraction by the last
    /// iteration; 1 keeps it constant.
    pub final_lr_frac: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 16,
            iterations: 5000,
            k: 100,
            uncond_stage_frac: 0.5,
            cond_dropout_prob: 0.5,
            history_dropout_prob: 0.5,
            gamma: 0.6,
            t_replan: 2,
            closed_loop_steps: 16,
            candidates: 8,
            teacher_forcing_prob: 0.5,
            teacher_agent_frac: 0.7,
            aux_noncollision_weight: 0.1,
            grad_clip: 1.0,
            final_lr_frac: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, it: usize) -> f64 {
        if self.final_lr_frac == 1.0 || self.iterations <= 1 {
            return self.learning_rate;
        }
        let p = it as f64 / (self.iterations - 1) as f64;
        let w = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
        self.learning_rate * (self.final_lr_frac + (1.0 - self.final_lr_frac) * w)
    }

    /// Closed-loop defaults: K = 5, lr 1e-5, 1k iterations.
    pub fn closed_loop() -> Self {
        Self { learning_rate: 1e-5, iterations: 1000, k: 5, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.cond_dropout_prob, self.history_dropout_prob, self.teacher_forcing_prob, self.teacher_agent_frac, self.uncond_stage_frac, self.final_lr_frac];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidInput("probabilities and fractions must lie in [0, 1]".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidInput(format!("learning rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.k == 0 || self.t_replan == 0 || self.candidates == 0 {
            return Err(Error::InvalidInput("batch size, K, T_replan and candidates must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidInput(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if self.aux_noncollision_weight < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::InvalidInput("negative loss weight or clip".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction. Parameters are rounded to f32 after every
/// update so checkpoints round-trip exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub step: u64,
    pub skipped: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub round_f32: bool,
}

impl Adam {
    pub fn new(shapes: &[Mat]) -> Self {
        let z: Vec<Mat> = shapes.iter().map(|m| Mat::zeros(m.rows, m.cols)).collect();
        Self { m: z.clone(), v: z, step: 0, skipped: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8, round_f32: true }
    }

    /// Returns false (and counts a skip) when any gradient is non-finite.
    pub fn update(&mut self, values: &mut [Mat], grads: &[Mat], lr: f64) -> Result<bool> {
        if values.len() != grads.len() || values.len() != self.m.len() || values.iter().zip(grads).any(|(a, b)| a.data.len() != b.data.len()) {
            return Err(Error::Shape("optimizer parameter/gradient shapes differ".into()));
        }
        if !grads.iter().all(Mat::is_finite) {
            self.skipped += 1;
            return Ok(false);
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in values.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * gj;
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * gj * gj;
                let upd = lr * (m.data[j] / c1) / ((v.data[j] / c2).sqrt() + self.eps);
                let x = p.data[j] - upd;
                p.data[j] = if self.round_f32 { x as f32 as f64 } else { x };
            }
        }
        Ok(true)
    }
}

pub fn optimizer_step(params: &mut DenoiserParams, grads: &[Mat], state: &mut Adam, lr: f64) -> Result<bool> {
    state.update(&mut params.store.values, grads, lr)
}

fn clip(grads: &mut [Mat], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.iter().flat_map(|g| &g.data).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|g| g.data.iter_mut()).for_each(|v| *v *= s);
    }
}

fn add_into(acc: &mut [Mat], g: &[Mat]) {
    for (a, b) in acc.iter_mut().zip(g) {
        for (x, y) in a.data.iter_mut().zip(&b.data) {
            *x += y;
        }
    }
}

/// Encoder inputs, ground-truth field and prompts for one scenario.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub ctx: SceneContext,
    /// Normalized GT actions, zero-padded (or cut) to the model horizon.
    pub gt: Mat,
    pub prompts: Vec<PromptSlot>,
}

impl TrainSample {
    pub fn new(s: &Scenario, horizon: usize) -> Self {
        let bounds = ActionBounds::default();
        let acts: Vec<Vec<Action>> = s
            .future
            .actions
            .iter()
            .map(|r| (0..horizon).map(|t| r.get(t).copied().unwrap_or(Action::new(0.0, 0.0))).collect())
            .collect();
        Self {
            ctx: SceneContext::from_scenario(s),
            gt: actions_to_field(&acts, &bounds),
            prompts: s.prompts.iter().cloned().map(Some).collect(),
        }
    }
}

/// Mean squared error and its gradient w.r.t. `pred`.
pub fn mse_field(pred: &Mat, gt: &Mat) -> Result<(f64, Mat)> {
    if (pred.rows, pred.cols) != (gt.rows, gt.cols) {
        return Err(Error::Shape("prediction and target shapes differ".into()));
    }
    let n = pred.data.len().max(1) as f64;
    let diff: Vec<f64> = pred.data.iter().zip(&gt.data).map(|(a, b)| a - b).collect();
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, Mat::from_vec(pred.rows, pred.cols, diff.iter().map(|d| 2.0 * d / n).collect())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrads {
    pub loss: f64,
    pub grads: Vec<Mat>,
}

/// Batch x0-prediction loss. `conditional` enables prompts (each sample
/// drops them with `cond_dropout`); `rng_seed` keys the per-sample streams.
pub fn openloop_loss(
    params: &DenoiserParams,
    batch: &[&TrainSample],
    sched: &NoiseSchedule,
    conditional: bool,
    cond_dropout: f64,
    rng_seed: u64,
) -> Result<LossAndGrads> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty training batch".into()));
    }
    let b = batch.len() as f64;
    let per: Vec<(f64, Vec<Mat>)> = batch
        .par_iter()
        .enumerate()
        .map(|(j, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(scenario_seed(rng_seed, j as u64));
            let k = rng.random_range(1..=sched.k);
            let eps = Mat::from_vec(s.gt.rows, s.gt.cols, (0..s.gt.data.len()).map(|_| StandardNormal.sample(&mut rng)).collect());
            let drop = rng.random_bool(cond_dropout);
            let tau = forward_noise(&s.gt, k, sched, &eps)?;
            let prompts = if conditional && !drop { Some(s.prompts.as_slice()) } else { None };
            let f = crate::model::forward(params, &s.ctx, &tau, k, sched.k, prompts)?;
            let (loss, mut up) = mse_field(f.tape.value(f.out), &s.gt)?;
            up.data.iter_mut().for_each(|v| *v /= b);
            let g = f.tape.backward(f.out, up);
            Ok((loss / b, f.tape.param_grads(&g)))
        })
        .collect::<Result<_>>()?;
    let mut grads = params.store.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &per {
        loss += l;
        add_into(&mut grads, g);
    }
    Ok(LossAndGrads { loss, grads })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub stage: String,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aux_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: DenoiserParams,
    pub curve: Vec<LossRecord>,
    pub skipped_steps: u64,
}

fn batch_indices(n: usize, size: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..size).map(|_| rng.random_range(0..n)).collect()
}

fn check_dataset(data: &[Scenario]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidInput("training needs at least one scenario".into()));
    }
    Ok(())
}

fn run_openloop(
    mut params: DenoiserParams,
    data: &[Scenario],
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    uncond_iters: usize,
    stage_seed: u64,
) -> Result<TrainOutput> {
    cfg.validate()?;
    check_dataset(data)?;
    let samples: Vec<TrainSample> = data.iter().map(|s| TrainSample::new(s, params.config.horizon)).collect();
    let mut adam = Adam::new(&params.store.values);
    let mut curve = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let key = scenario_seed(stage_seed, it as u64);
        let idx = batch_indices(samples.len(), cfg.batch_size, key);
        let batch: Vec<&TrainSample> = idx.iter().map(|&i| &samples[i]).collect();
        let conditional = it >= uncond_iters;
        let mut lg = openloop_loss(&params, &batch, sched, conditional, cfg.cond_dropout_prob, key ^ 0x5eed)?;
        clip(&mut lg.grads, cfg.grad_clip);
        optimizer_step(&mut params, &lg.grads, &mut adam, cfg.lr_at(it))?;
        curve.push(LossRecord {
            iteration: it,
            stage: if conditional { "text" } else { "uncond" }.into(),
            loss: lg.loss,
            state_loss: None,
            aux_loss: None,
        });
    }
    Ok(TrainOutput { params, curve, skipped_steps: adam.skipped })
}

/// Two-stage open-loop training from freshly initialized parameters: the
/// first `uncond_stage_frac` of the iterations without text, the rest with
/// prompts and condition dropout.
pub fn train_openloop(data: &[Scenario], model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutput> {
    let params = init_params(cfg.seed, model)?;
    continue_openloop(params, data, cfg)
}

/// Same two-stage schedule starting from existing parameters.
pub fn continue_openloop(params: DenoiserParams, data: &[Scenario], cfg: &TrainConfig) -> Result<TrainOutput> {
    let sched = cosine_schedule(cfg.k, COSINE_OFFSET)?;
    let uncond = (cfg.iterations as f64 * cfg.uncond_stage_frac).round() as usize;
    run_openloop(params, data, cfg, &sched, uncond, cfg.seed)
}

/// Continues text-conditioned open-loop training under a `k_new`-step
/// schedule.
pub fn retarget_schedule(params: DenoiserParams, k_new: usize, data: &[Scenario], cfg: &TrainConfig) -> Result<TrainOutput> {
    let sched = cosine_schedule(k_new, COSINE_OFFSET)?;
    let cfg = TrainConfig { k: k_new, ..cfg.clone() };
    run_openloop(params, data, &cfg, &sched, 0, scenario_seed(cfg.seed, 0x7e7a))
}

/// Highest closed-loop noise level `⌊K·γ⌋`.
pub fn max_closed_loop_level(k: usize, gamma: f64) -> Result<usize> {
    let top = (k as f64 * gamma + 1e-9).floor() as usize;
    if top < 1 {
        return Err(Error::InvalidInput(format!("K·gamma = {} < 1", k as f64 * gamma)));
    }
    Ok(top.min(k))
}

/// Mean L2 position error of `cand` (starting at `start`) against
/// `gt[t0..]`, over the steps both cover.
pub fn candidate_distance(start: &[AgentState], cand: &Mat, gt: &[Vec<AgentState>], t0: usize, bounds: &ActionBounds, dt: f64) -> f64 {
    let acts = field_to_actions(cand, bounds);
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, row) in acts.iter().enumerate() {
        let mut s = start[i];
        for (step, a) in row.iter().enumerate() {
            let Some(g) = gt[i].get(t0 + step + 1) else { break };
            s = crate::scene::step_unicycle(&s, a, dt).unwrap_or(s);
            total += (s.x - g.x).hypot(s.y - g.y);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Index of the smallest value, ties to the lowest index.
pub fn argmin(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if best.is_none_or(|b| *v < values[b]) {
            best = Some(i);
        }
    }
    best
}

fn state_features(s: &AgentState) -> [f64; 5] {
    [s.x, s.y, s.heading.sin(), s.heading.cos(), s.speed]
}

/// One replan decision kept for the backward pass.
struct Replan {
    t0: usize,
    ctx: SceneContext,
    tau_k: Mat,
    k: usize,
    x0: Mat,
    conditional: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// `N × (steps + 1)` executed states, starting at the current state.
    pub executed: Vec<Vec<AgentState>>,
    pub teacher: Vec<bool>,
    pub state_loss: f64,
    pub aux_loss: f64,
    pub grads: Vec<Mat>,
}

/// One closed-loop rollout of `scenario` with gradient. Selection and
/// re-encoding are treated as constants; gradient flows from the executed
/// states through the dynamics into the selected candidates' denoise calls.
pub fn closedloop_episode(params: &DenoiserParams, scenario: &Scenario, sched: &NoiseSchedule, cfg: &TrainConfig, rng_seed: u64) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let bounds = ActionBounds::default();
    let dt = scenario.future.dt;
    let n = scenario.agent_count();
    let horizon = params.config.horizon;
    let steps = cfg.closed_loop_steps.min(scenario.future.horizon());
    let top = max_closed_loop_level(sched.k, cfg.gamma)?;
    let gt_states = &scenario.future.states;
    let sample = TrainSample::new(scenario, horizon);
    let disks: Vec<DiskSet> = scenario.agent_dims.iter().map(|d| DiskSet::for_dims(*d)).collect();

    let mut teacher = vec![false; n];
    if rng.random_bool(cfg.teacher_forcing_prob) {
        let count = (cfg.teacher_agent_frac * n as f64).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for &i in order.iter().take(count) {
            teacher[i] = true;
        }
    }
    let drop_text = rng.random_bool(cfg.cond_dropout_prob);
    let drop_hist = rng.random_bool(cfg.history_dropout_prob);

    let mut executed: Vec<Vec<AgentState>> = (0..n).map(|i| vec![gt_states[i][0]]).collect();
    let mut exec_actions: Vec<Vec<Action>> = vec![Vec::with_capacity(steps); n];
    let mut replans = Vec::new();
    let mut t0 = 0;
    while t0 < steps {
        // encoder sees the scenario history followed by what was executed
        let ctx = SceneContext {
            history: (0..n).map(|i| scenario.history.states[i].iter().chain(&executed[i][1..]).copied().collect()).collect(),
            hist_valid: (0..n).map(|i| scenario.history.valid[i].iter().copied().chain(std::iter::repeat_n(true, executed[i].len() - 1)).collect()).collect(),
            lane_points: sample.ctx.lane_points.clone(),
            drop_history: drop_hist,
        };
        let k = rng.random_range(1..=top);
        let seg: Vec<Vec<Action>> = (0..n)
            .map(|i| (0..horizon).map(|s| scenario.future.actions[i].get(t0 + s).copied().unwrap_or(Action::new(0.0, 0.0))).collect())
            .collect();
        let gt_seg = actions_to_field(&seg, &bounds);
        let conditional = !drop_text;
        let cached = cache_condition(params, &ctx, if conditional { Some(&sample.prompts) } else { None })?;
        let start: Vec<AgentState> = executed.iter().map(|r| *r.last().unwrap()).collect();
        let mut cands = Vec::with_capacity(cfg.candidates);
        let mut dist = Vec::with_capacity(cfg.candidates);
        for _ in 0..cfg.candidates {
            let eps = Mat::from_vec(n, 2 * horizon, (0..n * 2 * horizon).map(|_| StandardNormal.sample(&mut rng)).collect());
            let tau_k = forward_noise(&gt_seg, k, sched, &eps)?;
            let x0 = denoise_cached(params, &cached, &tau_k, k, sched.k, conditional)?;
            dist.push(candidate_distance(&start, &x0, gt_states, t0, &bounds, dt));
            cands.push((tau_k, x0));
        }
        let m = argmin(&dist).unwrap_or(0);
        let (tau_k, x0) = cands.swap_remove(m);
        let acts = field_to_actions(&x0, &bounds);
        let run = cfg.t_replan.min(steps - t0);
        for i in 0..n {
            for s in 0..run {
                if teacher[i] {
                    executed[i].push(gt_states[i][t0 + s + 1]);
                    exec_actions[i].push(scenario.future.actions[i][t0 + s]);
                } else {
                    let cur = *executed[i].last().unwrap();
                    executed[i].push(step_unicycle(&cur, &acts[i][s], dt)?);
                    exec_actions[i].push(acts[i][s]);
                }
            }
        }
        replans.push(Replan { t0, ctx, tau_k, k, x0, conditional });
        t0 += run;
    }

    // state loss over steps 1..=steps, mean over agents and steps
    let norm = (n * steps).max(1) as f64;
    let mut state_loss = 0.0;
    let mut sg: Vec<Vec<StateGrad>> = vec![vec![[0.0; 4]; steps + 1]; n];
    for i in 0..n {
        for t in 1..=steps {
            let (e, g) = (&executed[i][t], &gt_states[i][t]);
            let (fe, fg) = (state_features(e), state_features(g));
            let d: Vec<f64> = fe.iter().zip(&fg).map(|(a, b)| a - b).collect();
            state_loss += d.iter().map(|v| v * v).sum::<f64>() / norm;
            let c = 2.0 / norm;
            let (sn, cs) = e.heading.sin_cos();
            sg[i][t][0] += c * d[0];
            sg[i][t][1] += c * d[1];
            sg[i][t][2] += c * (d[2] * cs - d[3] * sn);
            sg[i][t][3] += c * d[4];
        }
    }
    let exec_traj = crate::scene::Trajectory { dt, states: executed.clone(), actions: exec_actions.clone(), valid: vec![vec![true; steps + 1]; n] };
    let aux_loss = no_collision_loss(&exec_traj, &disks, false);
    if cfg.aux_noncollision_weight > 0.0 && aux_loss > 0.0 {
        let ag = no_collision_loss_grad(&exec_traj, &disks, false);
        for i in 0..n {
            for t in 0..=steps {
                for c in 0..4 {
                    sg[i][t][c] += cfg.aux_noncollision_weight * ag[i][t][c];
                }
            }
        }
    }

    let mut upstream: Vec<Mat> = replans.iter().map(|_| Mat::zeros(n, 2 * horizon)).collect();
    let scale = [bounds.a_max, bounds.yaw_rate_max];
    for i in 0..n {
        if teacher[i] {
            continue;
        }
        let ga = rollout_vjp(&executed[i][0], &exec_actions[i], dt, &sg[i]);
        for (t, g) in ga.iter().enumerate() {
            let r = replans.iter().rposition(|p| p.t0 <= t).unwrap();
            let s = t - replans[r].t0;
            for c in 0..2 {
                let col = 2 * s + c;
                if replans[r].x0.at(i, col).abs() <= 1.0 {
                    upstream[r].data[i * 2 * horizon + col] += g[c] * scale[c];
                }
            }
        }
    }
    let mut grads = params.store.zeros_like();
    for (p, up) in replans.iter().zip(&upstream) {
        if up.data.iter().all(|v| *v == 0.0) {
            continue;
        }
        let prompts = if p.conditional { Some(sample.prompts.as_slice()) } else { None };
        let (g, _) = denoise_grad(params, &p.ctx, &p.tau_k, p.k, sched.k, prompts, up)?;
        add_into(&mut grads, &g);
    }
    Ok(Episode { executed, teacher, state_loss, aux_loss, grads })
}

/// Closed-loop fine-tuning (K·γ must reach at least one noise level).
pub fn closedloop_train(params: DenoiserParams, data: &[Scenario], cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    check_dataset(data)?;
    max_closed_loop_level(cfg.k, cfg.gamma)?;
    let sched = cosine_schedule(cfg.k, COSINE_OFFSET)?;
    let mut params = params;
    let mut adam = Adam::new(&params.store.values);
    let mut curve = Vec::with_capacity(cfg.iterations);
    let stage_seed = scenario_seed(cfg.seed, 0xc105ed);
    for it in 0..cfg.iterations {
        let key = scenario_seed(stage_seed, it as u64);
        let idx = batch_indices(data.len(), cfg.batch_size, key);
        let eps: Vec<Episode> = idx
            .par_iter()
            .enumerate()
            .map(|(j, &i)| closedloop_episode(&params, &data[i], &sched, cfg, scenario_seed(key, j as u64 + 1)))
            .collect::<Result<_>>()?;
        let b = eps.len() as f64;
        let mut grads = params.store.zeros_like();
        let (mut sl, mut al) = (0.0, 0.0);
        for e in &eps {
            add_into(&mut grads, &e.grads);
            sl += e.state_loss / b;
            al += e.aux_loss / b;
        }
        grads.iter_mut().flat_map(|g| g.data.iter_mut()).for_each(|v| *v /= b);
        clip(&mut grads, cfg.grad_clip);
        optimizer_step(&mut params, &grads, &mut adam, cfg.lr_at(it))?;
        curve.push(LossRecord {
            iteration: it,
            stage: "closed_loop".into(),
            loss: sl + cfg.aux_noncollision_weight * al,
            state_loss: Some(sl),
            aux_loss: Some(al),
        });
    }
    Ok(TrainOutput { params, curve, skipped_steps: adam.skipped })
}
