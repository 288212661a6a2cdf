//! Scene encoder and conditional denoiser.
//!
//! Each agent is one token: its noisy normalized action sequence plus a
//! diffusion-step embedding. Blocks apply agent-to-agent self-attention,
//! cross-attention to the agent's own three context tokens (history, map,
//! neighbors) and a text path from the fused language embedding, then a
//! feed-forward layer. No positional information enters the agent axis, so
//! the denoiser is permutation-equivariant over agents.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::language::{encode_prompt_on, fuse_on, Vocabulary, MAX_PROMPT_LEN};
use crate::map::Point;
use crate::nn::{attention, Mat, ParamStore, Tape, Var};
use crate::scene::{to_local, AgentState, FrameTransform, Pose2};
use crate::synth::Scenario;

const HIST_FEATURES: usize = 5;
const MAP_FEATURES: usize = 4;
const NBR_FEATURES: usize = 5;
const POS_SCALE: f64 = 20.0;
const SPEED_SCALE: f64 = 10.0;
/// Spacing of lane points fed to the map encoder (m).
pub const LANE_POINT_SPACING: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_lang: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Future steps per agent token.
    pub horizon: usize,
    pub step_dim: usize,
    pub hist_steps: usize,
    pub k_map: usize,
    pub k_nbr: usize,
    pub vocab_size: usize,
    pub max_prompt_len: usize,
    pub ff_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            d_lang: 64,
            heads: 4,
            blocks: 2,
            horizon: 16,
            step_dim: 32,
            hist_steps: 2,
            k_map: 16,
            k_nbr: 8,
            vocab_size: Vocabulary::standard().len(),
            max_prompt_len: MAX_PROMPT_LEN,
            ff_mult: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_model, self.d_lang, self.heads, self.blocks, self.horizon, self.step_dim, self.vocab_size, self.max_prompt_len, self.ff_mult];
        if dims.contains(&0) {
            return Err(Error::InvalidParam("model dimensions must be positive".into()));
        }
        if self.d_model % self.heads != 0 || self.step_dim % 2 != 0 {
            return Err(Error::InvalidParam("d_model must divide by heads and step_dim must be even".into()));
        }
        Ok(())
    }

    fn hist_in(&self) -> usize {
        HIST_FEATURES * (self.hist_steps + 1) + 1
    }

    /// Parameter count in closed form.
    pub fn param_count(&self) -> usize {
        let lin = |i: usize, o: usize| i * o + o;
        let (d, dl, t2) = (self.d_model, self.d_lang, 2 * self.horizon);
        let block = 6 * d + 8 * lin(d, d) + 2 * lin(d, d) + lin(d, self.ff_mult * d) + lin(self.ff_mult * d, d);
        lin(self.step_dim, d)
            + lin(d, d)
            + lin(t2, d)
            + lin(self.hist_in(), d)
            + lin(MAP_FEATURES, d)
            + lin(NBR_FEATURES, d)
            + 3 * lin(d, d)
            + 3 * d
            + self.vocab_size * dl
            + self.max_prompt_len * dl
            + 2 * lin(dl, dl)
            + dl
            + lin(dl + d, d)
            + self.blocks * block
            + 2 * d
            + lin(d, t2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub config: ModelConfig,
    pub store: ParamStore,
}

fn f32_exact(x: f64) -> f64 {
    x as f32 as f64
}

/// Fan-in scaled uniform init, values rounded to f32 so the weights file
/// round-trips exactly.
pub fn init_params(seed: u64, config: &ModelConfig) -> Result<DenoiserParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let (d, dl, t2) = (config.d_model, config.d_lang, 2 * config.horizon);
    let mut uniform = |store: &mut ParamStore, name: &str, r: usize, c: usize, bound: f64| {
        let data = (0..r * c).map(|_| f32_exact(rng.random_range(-bound..bound))).collect();
        store.push(name, Mat::from_vec(r, c, data));
    };
    let linear = |uniform: &mut dyn FnMut(&mut ParamStore, &str, usize, usize, f64), store: &mut ParamStore, name: &str, i: usize, o: usize, gain: f64| {
        uniform(store, &format!("{name}.w"), i, o, gain / (i as f64).sqrt());
        store.push(format!("{name}.b"), Mat::zeros(1, o));
    };
    linear(&mut uniform, &mut store, "step.l1", config.step_dim, d, 1.0);
    linear(&mut uniform, &mut store, "step.l2", d, d, 1.0);
    linear(&mut uniform, &mut store, "traj.in", t2, d, 1.0);
    linear(&mut uniform, &mut store, "hist.l1", config.hist_in(), d, 1.0);
    linear(&mut uniform, &mut store, "map.l1", MAP_FEATURES, d, 1.0);
    linear(&mut uniform, &mut store, "nbr.l1", NBR_FEATURES, d, 1.0);
    linear(&mut uniform, &mut store, "hist.l2", d, d, 1.0);
    linear(&mut uniform, &mut store, "map.l2", d, d, 1.0);
    linear(&mut uniform, &mut store, "nbr.l2", d, d, 1.0);
    uniform(&mut store, "ctx.type", 3, d, 0.5);
    uniform(&mut store, "lang.tok", config.vocab_size, dl, 1.0);
    uniform(&mut store, "lang.pos", config.max_prompt_len, dl, 0.3);
    linear(&mut uniform, &mut store, "lang.l1", dl, dl, 1.0);
    linear(&mut uniform, &mut store, "lang.l2", dl, dl, 1.0);
    uniform(&mut store, "lang.null", 1, dl, 1.0);
    linear(&mut uniform, &mut store, "fuse", dl + d, d, 1.0);
    for b in 0..config.blocks {
        for ln in ["ln1", "ln2", "ln3"] {
            store.push(format!("b{b}.{ln}.g"), Mat::from_vec(1, d, vec![1.0; d]));
            store.push(format!("b{b}.{ln}.b"), Mat::zeros(1, d));
        }
        for p in ["attn.q", "attn.k", "attn.v", "attn.o", "ctx.q", "ctx.k", "ctx.v", "ctx.o", "txt.v", "txt.o"] {
            linear(&mut uniform, &mut store, &format!("b{b}.{p}"), d, d, 1.0);
        }
        linear(&mut uniform, &mut store, &format!("b{b}.ff1"), d, config.ff_mult * d, 1.0);
        linear(&mut uniform, &mut store, &format!("b{b}.ff2"), config.ff_mult * d, d, 1.0);
    }
    store.push("out.ln.g", Mat::from_vec(1, d, vec![1.0; d]));
    store.push("out.ln.b", Mat::zeros(1, d));
    linear(&mut uniform, &mut store, "out", d, t2, 0.5);
    debug_assert_eq!(store.count(), config.param_count());
    Ok(DenoiserParams { config: config.clone(), store })
}

const WEIGHTS_MAGIC: &[u8; 8] = b"TDWEIGHT";
const WEIGHTS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct WeightsHeader {
    version: u32,
    config: ModelConfig,
    tensors: Vec<(String, usize, usize)>,
}

impl DenoiserParams {
    /// Layout: magic, u32 header length, JSON header (version, config, tensor
    /// names and shapes), then every tensor as row-major f32 little-endian.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = WeightsHeader {
            version: WEIGHTS_VERSION,
            config: self.config.clone(),
            tensors: self.store.names.iter().zip(&self.store.values).map(|(n, m)| (n.clone(), m.rows, m.cols)).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(WEIGHTS_MAGIC)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        let mut buf = Vec::with_capacity(self.store.count() * 4);
        for m in &self.store.values {
            for v in &m.data {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != WEIGHTS_MAGIC {
            return Err(Error::Format("not a weights file".into()));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: WeightsHeader = serde_json::from_slice(&json)?;
        if header.version != WEIGHTS_VERSION {
            return Err(Error::Format(format!("unsupported weights version {}", header.version)));
        }
        header.config.validate()?;
        let mut store = ParamStore::new();
        for (name, rows, cols) in header.tensors {
            let mut raw = vec![0u8; rows * cols * 4];
            r.read_exact(&mut raw)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
            store.push(name, Mat::from_vec(rows, cols, data));
        }
        let expected = init_params(0, &header.config)?;
        if expected.store.names != store.names
            || expected.store.values.iter().zip(&store.values).any(|(a, b)| (a.rows, a.cols) != (b.rows, b.cols))
        {
            return Err(Error::Format("tensor layout does not match the config".into()));
        }
        Ok(Self { config: header.config, store })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("writing to memory");
        v
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        Self::read_from(&mut r)
    }

    pub fn is_finite(&self) -> bool {
        self.store.values.iter().all(Mat::is_finite)
    }
}

/// Everything the encoder reads: per-agent history ending at the current
/// state, and the map's lane points.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneContext {
    /// `N × (hist_steps + 1)`, oldest first.
    pub history: Vec<Vec<AgentState>>,
    pub hist_valid: Vec<Vec<bool>>,
    pub lane_points: Vec<(Point, f64)>,
    /// Replaces past states with the current one (history dropout).
    pub drop_history: bool,
}

impl SceneContext {
    pub fn from_scenario(s: &Scenario) -> Self {
        Self {
            history: s.history.states.clone(),
            hist_valid: s.history.valid.clone(),
            lane_points: s.map.lane_points(LANE_POINT_SPACING),
            drop_history: false,
        }
    }

    pub fn agent_count(&self) -> usize {
        self.history.len()
    }

    pub fn current(&self, i: usize) -> Option<AgentState> {
        self.history[i].iter().zip(&self.hist_valid[i]).rev().find(|(_, v)| **v).map(|(s, _)| *s)
    }

    /// Copy with every position mapped through the rigid motion `frame`
    /// (local-to-global).
    pub fn transformed(&self, frame: &Pose2) -> Self {
        Self {
            history: self.history.iter().map(|r| r.iter().map(|s| s.to_global(frame)).collect()).collect(),
            hist_valid: self.hist_valid.clone(),
            lane_points: self
                .lane_points
                .iter()
                .map(|(p, h)| {
                    let q = Pose2::new(p[0], p[1], *h).to_global(frame);
                    ([q.x, q.y], q.heading)
                })
                .collect(),
            drop_history: self.drop_history,
        }
    }
}

struct AgentFeatures {
    hist: Mat,
    map: Mat,
    nbr: Mat,
}

fn local_state_features(s: &AgentState, frame: &Pose2) -> [f64; 5] {
    let l = to_local(s, frame);
    [l.x / POS_SCALE, l.y / POS_SCALE, l.heading.cos(), l.heading.sin(), l.speed / SPEED_SCALE]
}

fn nearest<T>(items: &[T], k: usize, dist: impl Fn(&T) -> f64) -> Vec<usize> {
    let mut idx: Vec<(f64, usize)> = items.iter().enumerate().map(|(i, x)| (dist(x), i)).collect();
    idx.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    idx.into_iter().take(k).map(|(_, i)| i).collect()
}

fn agent_features(ctx: &SceneContext, cfg: &ModelConfig, i: usize) -> Option<AgentFeatures> {
    let cur = ctx.current(i)?;
    let frame = cur.pose();
    let mut hist = Vec::with_capacity(cfg.hist_in());
    let steps = cfg.hist_steps + 1;
    let row = &ctx.history[i];
    for k in 0..steps {
        // right-align the stored history with the model's window
        let src = (row.len() + k).checked_sub(steps);
        let s = match src {
            Some(j) if !ctx.drop_history && ctx.hist_valid[i][j] => row[j],
            _ => cur,
        };
        hist.extend_from_slice(&local_state_features(&s, &frame));
    }
    hist.push(if ctx.drop_history { 1.0 } else { 0.0 });

    let pts = nearest(&ctx.lane_points, cfg.k_map, |(p, _)| (p[0] - cur.x).hypot(p[1] - cur.y));
    let mut map = Vec::with_capacity(pts.len() * MAP_FEATURES);
    for k in pts {
        let (p, h) = ctx.lane_points[k];
        let l = to_local(&Pose2::new(p[0], p[1], h), &frame);
        map.extend_from_slice(&[l.x / POS_SCALE, l.y / POS_SCALE, l.heading.cos(), l.heading.sin()]);
    }

    let others: Vec<(usize, AgentState)> = (0..ctx.agent_count()).filter(|&j| j != i).filter_map(|j| ctx.current(j).map(|s| (j, s))).collect();
    let near = nearest(&others, cfg.k_nbr, |(_, s)| (s.x - cur.x).hypot(s.y - cur.y));
    let mut nbr = Vec::with_capacity(near.len() * NBR_FEATURES);
    for k in near {
        nbr.extend_from_slice(&local_state_features(&others[k].1, &frame));
    }
    let rows = |v: &Vec<f64>, c: usize| v.len() / c;
    Some(AgentFeatures {
        hist: Mat::from_vec(1, cfg.hist_in(), hist),
        map: Mat::from_vec(rows(&map, MAP_FEATURES), MAP_FEATURES, map),
        nbr: Mat::from_vec(rows(&nbr, NBR_FEATURES), NBR_FEATURES, nbr),
    })
}

fn point_net(t: &mut Tape, x: Mat, name: &str, d: usize) -> Var {
    if x.rows == 0 {
        return t.leaf(Mat::zeros(1, d));
    }
    let x = t.leaf(x);
    let h = t.linear(x, &format!("{name}.l1"));
    let h = t.gelu(h);
    let h = t.linear(h, &format!("{name}.l2"));
    t.mean_rows(h)
}

/// Encoder output on a tape: context tokens (`3N × d`, agent-major) and
/// `z_enc` (`N × d`, mean of each agent's three tokens).
pub struct EncodedVars {
    pub ctx: Var,
    pub z_enc: Var,
    /// Agents without a valid state (zero embedding).
    pub missing: Vec<bool>,
}

pub fn encode_scene_on(t: &mut Tape, cfg: &ModelConfig, ctx: &SceneContext) -> EncodedVars {
    let d = cfg.d_model;
    let types = t.named("ctx.type");
    let mut tokens = Vec::new();
    let mut z = Vec::new();
    let mut missing = Vec::new();
    for i in 0..ctx.agent_count() {
        match agent_features(ctx, cfg, i) {
            Some(f) => {
                let h = t.leaf(f.hist);
                let h = t.linear(h, "hist.l1");
                let h = t.gelu(h);
                let h = t.linear(h, "hist.l2");
                let m = point_net(t, f.map, "map", d);
                let n = point_net(t, f.nbr, "nbr", d);
                let three = t.concat_rows(&[h, m, n]);
                z.push(t.mean_rows(three));
                tokens.push(t.add(three, types));
                missing.push(false);
            }
            None => {
                let zero = t.leaf(Mat::zeros(1, d));
                z.push(zero);
                tokens.push(t.leaf(Mat::zeros(3, d)));
                missing.push(true);
            }
        }
    }
    let ctx_v = t.concat_rows(&tokens);
    let z_enc = t.concat_rows(&z);
    EncodedVars { ctx: ctx_v, z_enc, missing }
}

/// Per-agent scene embedding `z_enc` (`N × d_model`) plus missing-agent flags.
pub fn encode_scene(params: &DenoiserParams, ctx: &SceneContext) -> (Mat, Vec<bool>) {
    let mut t = Tape::new(&params.store);
    let e = encode_scene_on(&mut t, &params.config, ctx);
    (t.value(e.z_enc).clone(), e.missing)
}

/// Language conditioning for every agent: its own prompt, or null for all
/// when `prompts` is `None`. Output `N × d_model`.
pub fn condition_on(t: &mut Tape, z_enc: Var, prompts: Option<&[PromptSlot]>) -> crate::Result<Var> {
    let n = t.value(z_enc).rows;
    let rows: Vec<Var> = match prompts {
        None => {
            let null = encode_prompt_on(t, None)?;
            vec![null; n]
        }
        Some(p) => {
            if p.len() != n {
                return Err(Error::Shape(format!("{} prompts for {n} agents", p.len())));
            }
            p.iter().map(|q| encode_prompt_on(t, q.as_ref())).collect::<crate::Result<_>>()?
        }
    };
    let e = t.concat_rows(&rows);
    Ok(fuse_on(t, e, z_enc))
}

pub type PromptSlot = Option<crate::language::PromptText>;

/// Sinusoidal embedding of the diffusion step, expressed as the fraction
/// `k/K` scaled to 1000 so schedules with different K share it.
pub fn step_embedding(k: usize, k_total: usize, dim: usize) -> Mat {
    let x = k as f64 * 1000.0 / k_total as f64;
    let half = dim / 2;
    let mut v = Vec::with_capacity(dim);
    for j in 0..half {
        let f = (-(10_000f64).ln() * j as f64 / half as f64).exp();
        v.push((x * f).sin());
    }
    for j in 0..half {
        let f = (-(10_000f64).ln() * j as f64 / half as f64).exp();
        v.push((x * f).cos());
    }
    Mat::from_vec(1, dim, v)
}

fn norm(t: &mut Tape, x: Var, prefix: &str) -> Var {
    let g = t.named(&format!("{prefix}.g"));
    let b = t.named(&format!("{prefix}.b"));
    let h = t.layer_norm(x);
    let h = t.mul_row(h, g);
    t.add_row(h, b)
}

/// Denoiser on a tape. `tau` is `N × 2T` normalized actions (`[a_0, ω_0, a_1, …]`),
/// `ctx` the `3N × d` context tokens and `z_lang` the `N × d` text path input.
pub fn denoise_on(t: &mut Tape, cfg: &ModelConfig, tau: Var, k: usize, k_total: usize, ctx: Var, z_lang: Var) -> Var {
    let n = t.value(tau).rows;
    let step = t.leaf(step_embedding(k, k_total, cfg.step_dim));
    let s = t.linear(step, "step.l1");
    let s = t.gelu(s);
    let s = t.linear(s, "step.l2");
    let h = t.linear(tau, "traj.in");
    let mut h = t.add_row(h, s);
    let mut mask = Mat::from_vec(n, 3 * n, vec![-1e9; 3 * n * n]);
    for i in 0..n {
        for j in 3 * i..3 * i + 3 {
            mask.data[i * 3 * n + j] = 0.0;
        }
    }
    for b in 0..cfg.blocks {
        let p = |s: &str| format!("b{b}.{s}");
        let x = norm(t, h, &p("ln1"));
        let q = t.linear(x, &p("attn.q"));
        let k_ = t.linear(x, &p("attn.k"));
        let v = t.linear(x, &p("attn.v"));
        let a = attention(t, q, k_, v, cfg.heads, None);
        let a = t.linear(a, &p("attn.o"));
        h = t.add(h, a);

        let x = norm(t, h, &p("ln2"));
        let q = t.linear(x, &p("ctx.q"));
        let k_ = t.linear(ctx, &p("ctx.k"));
        let v = t.linear(ctx, &p("ctx.v"));
        let a = attention(t, q, k_, v, cfg.heads, Some(&mask));
        let a = t.linear(a, &p("ctx.o"));
        h = t.add(h, a);

        // a single text key per agent: attention weights are identically 1
        let v = t.linear(z_lang, &p("txt.v"));
        let a = t.linear(v, &p("txt.o"));
        h = t.add(h, a);

        let x = norm(t, h, &p("ln3"));
        let f = t.linear(x, &p("ff1"));
        let f = t.gelu(f);
        let f = t.linear(f, &p("ff2"));
        h = t.add(h, f);
    }
    let x = norm(t, h, "out.ln");
    t.linear(x, "out")
}

/// A full forward pass recorded on a tape.
pub struct Forward<'p> {
    pub tape: Tape<'p>,
    pub tau: Var,
    pub out: Var,
}

fn check_tau(cfg: &ModelConfig, ctx: &SceneContext, tau: &Mat, k: usize, k_total: usize) -> Result<()> {
    if tau.rows != ctx.agent_count() || tau.cols != 2 * cfg.horizon {
        return Err(Error::Shape(format!(
            "noisy field is {}x{}, expected {}x{}",
            tau.rows,
            tau.cols,
            ctx.agent_count(),
            2 * cfg.horizon
        )));
    }
    if !tau.is_finite() {
        return Err(Error::InvalidInput("non-finite noisy action field".into()));
    }
    if k == 0 || k > k_total {
        return Err(Error::InvalidInput(format!("diffusion step {k} outside 1..={k_total}")));
    }
    Ok(())
}

pub fn forward<'p>(
    params: &'p DenoiserParams,
    ctx: &SceneContext,
    tau: &Mat,
    k: usize,
    k_total: usize,
    prompts: Option<&[PromptSlot]>,
) -> Result<Forward<'p>> {
    check_tau(&params.config, ctx, tau, k, k_total)?;
    let mut t = Tape::new(&params.store);
    let enc = encode_scene_on(&mut t, &params.config, ctx);
    let z_lang = condition_on(&mut t, enc.z_enc, prompts)?;
    let tau_v = t.leaf(tau.clone());
    let out = denoise_on(&mut t, &params.config, tau_v, k, k_total, enc.ctx, z_lang);
    Ok(Forward { tape: t, tau: tau_v, out })
}

/// Predicted clean normalized action field `τ̂_0` (`N × 2T`).
pub fn denoise(
    params: &DenoiserParams,
    ctx: &SceneContext,
    tau: &Mat,
    k: usize,
    k_total: usize,
    prompts: Option<&[PromptSlot]>,
) -> Result<Mat> {
    let f = forward(params, ctx, tau, k, k_total, prompts)?;
    Ok(f.tape.value(f.out).clone())
}

/// Gradients of `⟨upstream, denoise(·)⟩` w.r.t. every parameter and w.r.t. `tau`.
pub fn denoise_grad(
    params: &DenoiserParams,
    ctx: &SceneContext,
    tau: &Mat,
    k: usize,
    k_total: usize,
    prompts: Option<&[PromptSlot]>,
    upstream: &Mat,
) -> Result<(Vec<Mat>, Mat)> {
    let f = forward(params, ctx, tau, k, k_total, prompts)?;
    if (upstream.rows, upstream.cols) != (tau.rows, tau.cols) {
        return Err(Error::Shape("upstream gradient shape differs from the output".into()));
    }
    let g = f.tape.backward(f.out, upstream.clone());
    let pg = f.tape.param_grads(&g);
    let tg = g.get(f.tau).cloned().unwrap_or_else(|| Mat::zeros(tau.rows, tau.cols));
    Ok((pg, tg))
}

/// Scene encoding and text conditioning computed once and reused across
/// diffusion steps at inference.
pub struct CachedCondition {
    pub ctx: Mat,
    pub z_lang_cond: Option<Mat>,
    pub z_lang_null: Mat,
}

pub fn cache_condition(params: &DenoiserParams, ctx: &SceneContext, prompts: Option<&[PromptSlot]>) -> Result<CachedCondition> {
    let mut t = Tape::new(&params.store);
    let enc = encode_scene_on(&mut t, &params.config, ctx);
    let null = condition_on(&mut t, enc.z_enc, None)?;
    let cond = match prompts {
        Some(p) => Some(condition_on(&mut t, enc.z_enc, Some(p))?),
        None => None,
    };
    Ok(CachedCondition {
        ctx: t.value(enc.ctx).clone(),
        z_lang_cond: cond.map(|c| t.value(c).clone()),
        z_lang_null: t.value(null).clone(),
    })
}

pub fn denoise_cached(params: &DenoiserParams, cached: &CachedCondition, tau: &Mat, k: usize, k_total: usize, conditional: bool) -> Result<Mat> {
    if k == 0 || k > k_total || tau.cols != 2 * params.config.horizon || tau.rows * 3 != cached.ctx.rows {
        return Err(Error::Shape("cached denoise input mismatch".into()));
    }
    if !tau.is_finite() {
        return Err(Error::InvalidInput("non-finite noisy action field".into()));
    }
    let z = match (&cached.z_lang_cond, conditional) {
        (Some(c), true) => c,
        _ => &cached.z_lang_null,
    };
    let mut t = Tape::new(&params.store);
    let ctx = t.leaf(cached.ctx.clone());
    let zl = t.leaf(z.clone());
    let tv = t.leaf(tau.clone());
    let out = denoise_on(&mut t, &params.config, tv, k, k_total, ctx, zl);
    Ok(t.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::language::compose_prompt;
    use crate::map::{build_map, Layout};
    use crate::synth::Tag;
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig { d_model: 16, d_lang: 8, heads: 2, horizon: 4, k_map: 6, k_nbr: 3, ..ModelConfig::default() }
    }

    fn scene(n: usize, seed: u64) -> SceneContext {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = build_map(&Layout::CrossIntersection { arm: 40.0, width: 3.5 }).unwrap();
        let history = (0..n)
            .map(|_| {
                let mut s = AgentState::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-3.0..3.0), rng.random_range(0.0..10.0));
                let mut row = vec![s];
                for _ in 0..2 {
                    s = crate::scene::step_unicycle(&s, &crate::scene::Action::new(rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3)), 0.5).unwrap();
                    row.push(s);
                }
                row
            })
            .collect();
        SceneContext { history, hist_valid: vec![vec![true; 3]; n], lane_points: map.lane_points(LANE_POINT_SPACING), drop_history: false }
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.5..1.5)).collect())
    }

    #[test]
    fn param_count_matches_formula() {
        for cfg in [ModelConfig::default(), tiny()] {
            let p = init_params(1, &cfg).unwrap();
            assert_eq!(p.store.count(), cfg.param_count());
        }
        assert!(ModelConfig::default().param_count() <= 1_000_000);
    }

    #[test]
    fn init_is_seeded() {
        let a = init_params(5, &tiny()).unwrap();
        assert_eq!(a, init_params(5, &tiny()).unwrap());
        assert_ne!(a, init_params(6, &tiny()).unwrap());
        assert!(init_params(1, &ModelConfig { heads: 3, ..tiny() }).is_err());
    }

    #[test]
    fn weights_round_trip_bitwise() {
        let p = init_params(9, &tiny()).unwrap();
        let bytes = p.to_bytes();
        let q = DenoiserParams::from_bytes(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(q.to_bytes(), bytes);
        assert!(DenoiserParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(DenoiserParams::from_bytes(b"garbage!\0\0\0\0").is_err());
    }

    #[test]
    fn denoise_is_deterministic_and_null_consistent() {
        let cfg = tiny();
        let p = init_params(2, &cfg).unwrap();
        let ctx = scene(3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tau = rand_mat(&mut rng, 3, 8);
        let a = denoise(&p, &ctx, &tau, 3, 5, None).unwrap();
        let b = denoise(&p, &ctx, &tau, 3, 5, None).unwrap();
        assert_eq!(a, b);
        let nulls: Vec<PromptSlot> = vec![None; 3];
        assert_eq!(a, denoise(&p, &ctx, &tau, 3, 5, Some(&nulls)).unwrap());
        let cached = cache_condition(&p, &ctx, None).unwrap();
        let c = denoise_cached(&p, &cached, &tau, 3, 5, false).unwrap();
        for (x, y) in a.data.iter().zip(&c.data) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(denoise(&p, &ctx, &tau, 0, 5, None).is_err());
        let mut bad = tau.clone();
        bad.data[0] = f64::NAN;
        assert!(denoise(&p, &ctx, &bad, 1, 5, None).is_err());
    }

    #[test]
    fn prompts_change_output() {
        let cfg = tiny();
        let p = init_params(2, &cfg).unwrap();
        let ctx = scene(2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tau = rand_mat(&mut rng, 2, 8);
        let tags = vec![vec![Tag::TurningLeft], vec![Tag::SlowingDown]];
        let prompts: Vec<PromptSlot> = (0..2).map(|i| Some(compose_prompt(&tags, &[], i, 2).unwrap())).collect();
        assert_ne!(denoise(&p, &ctx, &tau, 1, 5, None).unwrap(), denoise(&p, &ctx, &tau, 1, 5, Some(&prompts)).unwrap());
    }

    #[test]
    fn agent_permutation_equivariance() {
        let cfg = tiny();
        let p = init_params(3, &cfg).unwrap();
        let ctx = scene(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tau = rand_mat(&mut rng, 3, 8);
        let out = denoise(&p, &ctx, &tau, 2, 5, None).unwrap();
        let perm = [2, 0, 1];
        let pctx = SceneContext {
            history: perm.iter().map(|&i| ctx.history[i].clone()).collect(),
            hist_valid: perm.iter().map(|&i| ctx.hist_valid[i].clone()).collect(),
            ..ctx.clone()
        };
        let ptau = Mat::from_vec(3, 8, perm.iter().flat_map(|&i| tau.row(i).to_vec()).collect());
        let pout = denoise(&p, &pctx, &ptau, 2, 5, None).unwrap();
        for (r, &i) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((pout.at(r, c) - out.at(i, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn static_agent_golden() {
        // single static agent, no neighbors: anchors the encoder output
        let p = init_params(11, &tiny()).unwrap();
        let map = build_map(&Layout::Straight { length: 100.0, lanes: 1, width: 3.5 }).unwrap();
        let ctx = SceneContext {
            history: vec![vec![AgentState::new(50.0, 0.0, 0.0, 0.0); 3]],
            hist_valid: vec![vec![true; 3]],
            lane_points: map.lane_points(LANE_POINT_SPACING),
            drop_history: false,
        };
        let (z, missing) = encode_scene(&p, &ctx);
        assert_eq!(missing, vec![false]);
        let (z2, _) = encode_scene(&p, &ctx);
        assert_eq!(z, z2);
        // no neighbors: the neighbor token is zero, so z_enc = (hist + map) / 3
        let mut t = Tape::new(&p.store);
        let f = agent_features(&ctx, &p.config, 0).unwrap();
        assert_eq!(f.nbr.rows, 0);
        let h = t.leaf(f.hist);
        let h = t.linear(h, "hist.l1");
        let h = t.gelu(h);
        let h = t.linear(h, "hist.l2");
        let m = point_net(&mut t, f.map, "map", 16);
        let s = t.add(h, m);
        let s = t.scale(s, 1.0 / 3.0);
        for (a, b) in t.value(s).data.iter().zip(&z.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_agent_gets_zero_embedding() {
        let p = init_params(11, &tiny()).unwrap();
        let mut ctx = scene(2, 3);
        ctx.hist_valid[1] = vec![false; 3];
        let (z, missing) = encode_scene(&p, &ctx);
        assert_eq!(missing, vec![false, true]);
        assert!(z.row(1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn translation_invariance() {
        let p = init_params(4, &tiny()).unwrap();
        let ctx = scene(3, 5);
        let (z, _) = encode_scene(&p, &ctx);
        let (zt, _) = encode_scene(&p, &ctx.transformed(&Pose2::new(100.0, 50.0, 0.0)));
        for (a, b) in z.data.iter().zip(&zt.data) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn rotation_invariance(theta in -3.14f64..3.14, seed in 0u64..10_000) {
            let p = init_params(4, &tiny()).unwrap();
            let ctx = scene(3, seed);
            let (z, _) = encode_scene(&p, &ctx);
            let (zr, _) = encode_scene(&p, &ctx.transformed(&Pose2::new(0.0, 0.0, theta)));
            let diff = z.data.iter().zip(&zr.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(diff < 1e-5, "max diff {}", diff);
        }
    }

    fn fd_check_params(p: &DenoiserParams, ctx: &SceneContext, tau: &Mat, prompts: Option<&[PromptSlot]>, upstream: &Mat, samples: usize) {
        let (pg, _) = denoise_grad(p, ctx, tau, 2, 5, prompts, upstream).unwrap();
        let objective = |q: &DenoiserParams| {
            let out = denoise(q, ctx, tau, 2, 5, prompts).unwrap();
            out.data.iter().zip(&upstream.data).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let total = p.store.count();
        let h = 1e-4;
        let mut checked = 0;
        let mut attempts = 0;
        while checked < samples && attempts < samples * 20 {
            attempts += 1;
            let mut flat = rng.random_range(0..total);
            let mut ti = 0;
            while flat >= p.store.values[ti].data.len() {
                flat -= p.store.values[ti].data.len();
                ti += 1;
            }
            let analytic = pg[ti].data[flat];
            let mut plus = p.clone();
            plus.store.values[ti].data[flat] += h;
            let mut minus = p.clone();
            minus.store.values[ti].data[flat] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            if analytic.abs() < 1e-6 && fd.abs() < 1e-6 {
                continue;
            }
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs());
            assert!(rel < 1e-3, "{}[{flat}]: fd {fd} analytic {analytic}", p.store.names[ti]);
            checked += 1;
        }
        assert_eq!(checked, samples);
    }

    #[test]
    fn param_gradients_match_finite_differences() {
        let cfg = tiny();
        let p = init_params(8, &cfg).unwrap();
        let ctx = scene(3, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tau = rand_mat(&mut rng, 3, 8);
        let up = rand_mat(&mut rng, 3, 8);
        let tags = vec![vec![Tag::TurningLeft], vec![], vec![Tag::SpeedingUp]];
        let prompts: Vec<PromptSlot> = (0..3).map(|i| Some(compose_prompt(&tags, &[], i, 3).unwrap())).collect();
        fd_check_params(&p, &ctx, &tau, Some(&prompts), &up, 100);
    }

    #[test]
    fn tau_gradient_matches_finite_differences() {
        let cfg = tiny();
        let p = init_params(8, &cfg).unwrap();
        let ctx = scene(3, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tau = rand_mat(&mut rng, 3, 8);
        let up = rand_mat(&mut rng, 3, 8);
        let (_, tg) = denoise_grad(&p, &ctx, &tau, 4, 5, None, &up).unwrap();
        let f = |m: &Mat| denoise(&p, &ctx, m, 4, 5, None).unwrap().data.iter().zip(&up.data).map(|(a, b)| a * b).sum::<f64>();
        let h = 1e-4;
        for i in (0..24).step_by(1).take(20) {
            let mut a = tau.clone();
            a.data[i] += h;
            let mut b = tau.clone();
            b.data[i] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            let rel = (fd - tg.data[i]).abs() / fd.abs().max(tg.data[i].abs()).max(1e-8);
            assert!(rel < 1e-3, "coord {i}: fd {fd} analytic {}", tg.data[i]);
        }
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let p = init_params(8, &tiny()).unwrap();
        let ctx = scene(2, 8);
        let tau = Mat::zeros(2, 8);
        let (pg, tg) = denoise_grad(&p, &ctx, &tau, 1, 5, None, &Mat::zeros(2, 8)).unwrap();
        assert!(pg.iter().all(|m| m.data.iter().all(|v| *v == 0.0)));
        assert!(tg.data.iter().all(|v| *v == 0.0));
    }
}
