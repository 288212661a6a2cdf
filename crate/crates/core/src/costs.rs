//! Differentiable costs over unrolled trajectories: the adversarial
//! center-distance collision cost and the disk non-collision loss.

use crate::error::{Error, Result};
use crate::geometry::AgentDims;
use crate::scene::{AgentState, StateGrad, Trajectory};

pub const DEFAULT_DISKS: usize = 3;

/// Disks along an agent's length axis, offsets in the agent frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DiskSet {
    pub offsets: Vec<f64>,
    pub radius: f64,
}

pub fn disk_decomposition(length: f64, width: f64, d: usize) -> Result<DiskSet> {
    if !(length > 0.0 && width > 0.0) || d == 0 {
        return Err(Error::InvalidParam(format!("disk decomposition needs positive dims and D >= 1, got {length}x{width}, D={d}")));
    }
    let radius = width / 2.0;
    if length <= width || d == 1 {
        return Ok(DiskSet { offsets: vec![0.0], radius });
    }
    let half = (length - width) / 2.0;
    let offsets = (0..d).map(|k| -half + 2.0 * half * k as f64 / (d - 1) as f64).collect();
    Ok(DiskSet { offsets, radius })
}

impl DiskSet {
    pub fn for_dims(dims: AgentDims) -> DiskSet {
        disk_decomposition(dims.length.max(1e-6), dims.width.max(1e-6), DEFAULT_DISKS).expect("positive dims")
    }

    pub fn centers(&self, s: &AgentState) -> Vec<[f64; 2]> {
        let (sn, cs) = s.heading.sin_cos();
        self.offsets.iter().map(|o| [s.x + o * cs, s.y + o * sn]).collect()
    }
}

fn check_pair(traj: &Trajectory, adv: usize, target: usize) -> Result<()> {
    let n = traj.agent_count();
    if adv >= n || target >= n || adv == target {
        return Err(Error::InvalidInput(format!("invalid adversarial pair ({adv}, {target}) for {n} agents")));
    }
    Ok(())
}

/// `J = −Σ_{t=1..T} ‖p_adv(t) − p_tgt(t)‖`.
pub fn collision_cost(traj: &Trajectory, adv: usize, target: usize) -> Result<f64> {
    check_pair(traj, adv, target)?;
    let (a, b) = (&traj.states[adv], &traj.states[target]);
    Ok(-(1..a.len()).map(|t| (a[t].x - b[t].x).hypot(a[t].y - b[t].y)).sum::<f64>())
}

/// Gradient of [`collision_cost`] w.r.t. the adversarial agent's positions,
/// one entry per state (index 0 is always zero). Zero where centers coincide.
pub fn collision_cost_grad(traj: &Trajectory, adv: usize, target: usize) -> Result<Vec<[f64; 2]>> {
    check_pair(traj, adv, target)?;
    let (a, b) = (&traj.states[adv], &traj.states[target]);
    let mut g = vec![[0.0; 2]; a.len()];
    for t in 1..a.len() {
        let d = [a[t].x - b[t].x, a[t].y - b[t].y];
        let n = d[0].hypot(d[1]);
        if n >= 1e-9 {
            g[t] = [-d[0] / n, -d[1] / n];
        }
    }
    Ok(g)
}

/// Closest disk-center pair between two posed agents: (distance, index i, index j).
fn closest_disks(si: &AgentState, sj: &AgentState, di: &DiskSet, dj: &DiskSet) -> (f64, usize, usize) {
    let (ci, cj) = (di.centers(si), dj.centers(sj));
    let mut best = (f64::INFINITY, 0, 0);
    for (a, p) in ci.iter().enumerate() {
        for (b, q) in cj.iter().enumerate() {
            let d = (p[0] - q[0]).hypot(p[1] - q[1]);
            if d < best.0 {
                best = (d, a, b);
            }
        }
    }
    best
}

/// `1 − d/(r_i + r_j)` when the closest disk centers are within `r_i + r_j`, else 0.
pub fn pairwise_overlap(si: &AgentState, sj: &AgentState, di: &DiskSet, dj: &DiskSet) -> f64 {
    let (d, _, _) = closest_disks(si, sj, di, dj);
    let r = di.radius + dj.radius;
    if d <= r {
        1.0 - d / r
    } else {
        0.0
    }
}

fn pair_sum(traj: &Trajectory, disks: &[DiskSet], i: usize, j: usize) -> f64 {
    let mut s = 0.0;
    for t in 0..traj.states[i].len() {
        if traj.valid[i][t] && traj.valid[j][t] {
            s += pairwise_overlap(&traj.states[i][t], &traj.states[j][t], &disks[i], &disks[j]);
        }
    }
    s
}

/// `(1/N²) Σ_{i≠j} min(1, Σ_t J_pair)`; `use_max` switches to the literal
/// `max(1, ·)` aggregation. Zero for fewer than two agents.
pub fn no_collision_loss(traj: &Trajectory, disks: &[DiskSet], use_max: bool) -> f64 {
    no_collision_loss_excluding(traj, disks, use_max, None)
}

/// [`no_collision_loss`] with both orderings of `skip` left out of the sum
/// (the normalization stays `1/N²`).
pub fn no_collision_loss_excluding(traj: &Trajectory, disks: &[DiskSet], use_max: bool, skip: Option<(usize, usize)>) -> f64 {
    let n = traj.agent_count();
    if n < 2 {
        return 0.0;
    }
    let skipped = |i: usize, j: usize| skip.is_some_and(|(a, b)| (a, b) == (i, j) || (a, b) == (j, i));
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j && !skipped(i, j) {
                let s = pair_sum(traj, disks, i, j);
                total += if use_max { s.max(1.0) } else { s.min(1.0) };
            }
        }
    }
    total / (n * n) as f64
}

/// Gradient of [`no_collision_loss`] w.r.t. every state (x, y, heading, speed).
/// The capped branch has zero gradient; the closest pair is the first minimum
/// in disk order.
pub fn no_collision_loss_grad(traj: &Trajectory, disks: &[DiskSet], use_max: bool) -> Vec<Vec<StateGrad>> {
    let n = traj.agent_count();
    let mut g: Vec<Vec<StateGrad>> = traj.states.iter().map(|s| vec![[0.0; 4]; s.len()]).collect();
    if n < 2 {
        return g;
    }
    let scale = 1.0 / (n * n) as f64;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let s = pair_sum(traj, disks, i, j);
            let active = if use_max { s > 1.0 } else { s < 1.0 };
            if !active {
                continue;
            }
            let r = disks[i].radius + disks[j].radius;
            for t in 0..traj.states[i].len() {
                if !(traj.valid[i][t] && traj.valid[j][t]) {
                    continue;
                }
                let (si, sj) = (&traj.states[i][t], &traj.states[j][t]);
                let (d, a, b) = closest_disks(si, sj, &disks[i], &disks[j]);
                if d > r || d < 1e-12 {
                    continue;
                }
                let (oi, oj) = (disks[i].offsets[a], disks[j].offsets[b]);
                let (sni, csi) = si.heading.sin_cos();
                let (snj, csj) = sj.heading.sin_cos();
                let diff = [si.x + oi * csi - sj.x - oj * csj, si.y + oi * sni - sj.y - oj * snj];
                // dJ/dd = −1/r; dd/dc_i = diff/d
                let k = -scale / (r * d);
                let gc = [k * diff[0], k * diff[1]];
                g[i][t][0] += gc[0];
                g[i][t][1] += gc[1];
                g[i][t][2] += gc[0] * (-oi * sni) + gc[1] * (oi * csi);
                g[j][t][0] -= gc[0];
                g[j][t][1] -= gc[1];
                g[j][t][2] -= gc[0] * (-oj * snj) + gc[1] * (oj * csj);
            }
        }
    }
    g
}
