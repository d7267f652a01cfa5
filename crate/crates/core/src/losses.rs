//! Training objective: weighted v-loss, SE(3) auxiliary loss, increment
//! smoothness terms and the depth floor.
//!
//! Each term exists twice: as a plain function over poses, and as graph
//! operations over the decoded network output. Tests check both agree.

use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, ModelError, ModelParams, Net, SceneInput};
use crate::schedule::{horizon_weights, q_sample, reconstruct_y0, v_target, DiffusionSchedule};
use crate::se3::{geodesic_angle, increments, second_difference_of_increments, Increment, PoseSE3};
use crate::tape::{Gradients, Graph, Var};
use crate::tensor::Tensor;
use crate::tokens::{
    depth_denormalize, destandardize, standardize, tokenize, NormBox, PoseToken9, TokenArray, TokenStats,
    TrajectoryWindow,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_r: f64,
    pub lambda_trans: f64,
    pub lambda_vel: f64,
    pub lambda_acc: f64,
    pub z_min: f64,
    pub floor_coeff: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_r: 2.0, lambda_trans: 20.0, lambda_vel: 0.5, lambda_acc: 0.1, z_min: 0.05, floor_coeff: 0.01 }
    }
}

/// Raw terms; `total = v + aux + zmin + λ_vel·vel + λ_acc·acc`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub v: f64,
    pub aux: f64,
    pub vel: f64,
    pub acc: f64,
    pub zmin: f64,
}

impl LossBreakdown {
    pub fn assemble(v: f64, aux: f64, vel: f64, acc: f64, zmin: f64, w: &LossWeights) -> Self {
        Self { total: v + aux + zmin + w.lambda_vel * vel + w.lambda_acc * acc, v, aux, vel, acc, zmin }
    }

    /// Weighted contributions `[v, aux, vel, acc, zmin]` to the total.
    pub fn contributions(&self, w: &LossWeights) -> [f64; 5] {
        [self.v, self.aux, w.lambda_vel * self.vel, w.lambda_acc * self.acc, self.zmin]
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("sequence lengths differ: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<crate::schedule::ScheduleError> for LossError {
    fn from(e: crate::schedule::ScheduleError) -> Self {
        LossError::Model(e.into())
    }
}

impl From<crate::tokens::TokenError> for LossError {
    fn from(e: crate::tokens::TokenError) -> Self {
        LossError::Model(e.into())
    }
}

fn same_len(a: usize, b: usize) -> Result<(), LossError> {
    if a == b {
        Ok(())
    } else {
        Err(LossError::ShapeMismatch(a, b))
    }
}

/// Horizon weights rescaled to mean 1.
pub fn normalized_horizon_weights(h: usize) -> Vec<f64> {
    let w = horizon_weights(h);
    let mean = w.iter().sum::<f64>() / h as f64;
    w.iter().map(|x| x / mean).collect()
}

pub fn loss_v(
    v_pred: &[TokenArray],
    v_tgt: &[TokenArray],
    t: usize,
    schedule: &DiffusionSchedule,
) -> Result<f64, LossError> {
    same_len(v_pred.len(), v_tgt.len())?;
    let w = normalized_horizon_weights(v_pred.len());
    let mut acc = 0.0;
    for (k, (p, q)) in v_pred.iter().zip(v_tgt).enumerate() {
        acc += w[k] * p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(schedule.p2_weight[t] * acc / (9 * v_pred.len()) as f64)
}

pub fn loss_aux(
    pred: &[PoseSE3],
    gt: &[PoseSE3],
    t: usize,
    schedule: &DiffusionSchedule,
    w: &LossWeights,
) -> Result<f64, LossError> {
    same_len(pred.len(), gt.len())?;
    let n = pred.len() as f64;
    let ang = pred.iter().zip(gt).map(|(p, q)| geodesic_angle(&q.rotation, &p.rotation)).sum::<f64>() / n;
    let tr = pred.iter().zip(gt).map(|(p, q)| (q.translation - p.translation).norm()).sum::<f64>() / n;
    Ok(schedule.alpha_bar[t] * (w.lambda_r * ang + w.lambda_trans * tr))
}

fn increment_loss(p: &[Increment], q: &[Increment]) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    p.iter()
        .zip(q)
        .map(|(a, b)| (a.dt - b.dt).norm_squared() + geodesic_angle(&b.dr, &a.dr).powi(2))
        .sum::<f64>()
        / p.len() as f64
}

pub fn loss_vel(pred: &[PoseSE3], gt: &[PoseSE3], t: usize, schedule: &DiffusionSchedule) -> Result<f64, LossError> {
    same_len(pred.len(), gt.len())?;
    Ok(schedule.alpha_bar[t] * increment_loss(&increments(pred), &increments(gt)))
}

pub fn loss_acc(pred: &[PoseSE3], gt: &[PoseSE3], t: usize, schedule: &DiffusionSchedule) -> Result<f64, LossError> {
    same_len(pred.len(), gt.len())?;
    let p = second_difference_of_increments(&increments(pred));
    let q = second_difference_of_increments(&increments(gt));
    Ok(schedule.alpha_bar[t] * increment_loss(&p, &q))
}

pub fn loss_zmin(pred: &[PoseSE3], w: &LossWeights) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    w.floor_coeff * pred.iter().map(|p| (w.z_min - p.translation.z).max(0.0)).sum::<f64>() / pred.len() as f64
}

/// All terms from a predicted `v` for noised standardized tokens `y_t`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    y_t: &[TokenArray],
    v_pred: &[TokenArray],
    v_tgt: &[TokenArray],
    gt: &[PoseSE3],
    t: usize,
    schedule: &DiffusionSchedule,
    stats: &TokenStats,
    w: &LossWeights,
) -> Result<LossBreakdown, LossError> {
    same_len(v_pred.len(), gt.len())?;
    let y0 = reconstruct_y0(schedule, y_t, v_pred, t)?;
    let pred = destandardize(&y0, stats)?
        .iter()
        .map(|tok| depth_denormalize(&PoseToken9::from_array(tok)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LossBreakdown::assemble(
        loss_v(v_pred, v_tgt, t, schedule)?,
        loss_aux(&pred, gt, t, schedule, w)?,
        loss_vel(&pred, gt, t, schedule)?,
        loss_acc(&pred, gt, t, schedule)?,
        loss_zmin(&pred, w),
        w,
    ))
}

/// Graph nodes of the loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub v: Var,
    pub aux: Var,
    pub vel: Var,
    pub acc: Var,
    pub zmin: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph<'_>) -> LossBreakdown {
        let s = |v: Var| g.value(v).item();
        LossBreakdown { total: s(self.total), v: s(self.v), aux: s(self.aux), vel: s(self.vel), acc: s(self.acc), zmin: s(self.zmin) }
    }
}

/// Ground-truth poses laid out for graph use: translations `H×3`,
/// rotations `H×9` column-major.
#[derive(Debug, Clone)]
pub struct PoseRows {
    pub trans: Tensor,
    pub rot: Tensor,
}

impl PoseRows {
    pub fn new(poses: &[PoseSE3]) -> Self {
        let trans: Vec<[f64; 3]> = poses.iter().map(|p| [p.translation.x, p.translation.y, p.translation.z]).collect();
        let rot: Vec<[f64; 9]> = poses.iter().map(|p| p.rotation.to_cols_array()).collect();
        Self { trans: Tensor::from_rows(&trans), rot: Tensor::from_rows(&rot) }
    }
}

fn rows_norm(g: &mut Graph<'_>, x: Var) -> Var {
    let sq = g.square(x);
    let s = g.sum_cols(sq);
    g.sqrt(s)
}

/// Gram–Schmidt decode of `H×6` rows into `H×9` column-major rotations.
pub fn graph_rot6d_decode(g: &mut Graph<'_>, r6: Var) -> Var {
    let a = g.slice_cols(r6, 0, 3);
    let b = g.slice_cols(r6, 3, 3);
    let na = rows_norm(g, a);
    let c1 = g.div(a, na);
    let cb = g.mul(c1, b);
    let d = g.sum_cols(cb);
    let proj = g.mul(c1, d);
    let b2 = g.sub(b, proj);
    let nb = rows_norm(g, b2);
    let c2 = g.div(b2, nb);
    let comp = |g: &mut Graph<'_>, v: Var, i: usize| g.slice_cols(v, i, 1);
    let (x1, y1, z1) = (comp(g, c1, 0), comp(g, c1, 1), comp(g, c1, 2));
    let (x2, y2, z2) = (comp(g, c2, 0), comp(g, c2, 1), comp(g, c2, 2));
    let mut cross = |p: Var, q: Var, r: Var, s: Var| {
        let l = g.mul(p, q);
        let m = g.mul(r, s);
        g.sub(l, m)
    };
    let c3x = cross(y1, z2, z1, y2);
    let c3y = cross(z1, x2, x1, z2);
    let c3z = cross(x1, y2, y1, x2);
    g.concat_cols(&[c1, c2, c3x, c3y, c3z])
}

/// Row-wise geodesic angle between rotations stored as `H×9` rows.
pub fn graph_geodesic(g: &mut Graph<'_>, ra: Var, rb: Var) -> Var {
    let m = g.mat3_mul(ra, rb, true, false);
    let e = |g: &mut Graph<'_>, i: usize| g.slice_cols(m, i, 1);
    let (m1, m2, m3, m5, m6, m7) = (e(g, 1), e(g, 2), e(g, 3), e(g, 5), e(g, 6), e(g, 7));
    let wx = g.sub(m5, m7);
    let wy = g.sub(m6, m2);
    let wz = g.sub(m1, m3);
    let w = g.concat_cols(&[wx, wy, wz]);
    let sin2 = rows_norm(g, w);
    let sin = g.scale(sin2, 0.5);
    let diag = g.gather_cols(m, &[0, 4, 8]);
    let tr = g.sum_cols(diag);
    let cos = g.add_scalar(tr, -1.0);
    let cos = g.scale(cos, 0.5);
    g.atan2(sin, cos)
}

fn graph_increment_loss(g: &mut Graph<'_>, trans: Var, rot: Var, gt_t: Var, gt_r: Var, alpha: f64) -> Var {
    let n = g.shape(trans).0;
    let dt = g.sub(trans, gt_t);
    let sq = g.square(dt);
    let dist2 = g.sum_cols(sq);
    let ang = graph_geodesic(g, gt_r, rot);
    let ang2 = g.square(ang);
    let per = g.add(dist2, ang2);
    let m = g.sum_all(per);
    g.scale(m, alpha / n as f64)
}

/// `(Δt: (n−1)×3, ΔR: (n−1)×9)` of pose rows.
fn graph_increments(g: &mut Graph<'_>, trans: Var, rot: Var) -> (Var, Var) {
    let n = g.shape(trans).0;
    let t1 = g.slice_rows(trans, 1, n - 1);
    let t0 = g.slice_rows(trans, 0, n - 1);
    let r1 = g.slice_rows(rot, 1, n - 1);
    let r0 = g.slice_rows(rot, 0, n - 1);
    (g.sub(t1, t0), g.mat3_mul(r0, r1, true, false))
}

/// Decodes `Ŷ₀` from `v_pred` and assembles every loss term on the graph.
#[allow(clippy::too_many_arguments)]
pub fn graph_total_loss(
    g: &mut Graph<'_>,
    y_t: &[TokenArray],
    v_pred: Var,
    v_tgt: &[TokenArray],
    gt: &PoseRows,
    t: usize,
    schedule: &DiffusionSchedule,
    stats: &TokenStats,
    w: &LossWeights,
) -> LossVars {
    let h = y_t.len();
    let ab = schedule.alpha_bar[t];
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());

    let vt = g.constant(Tensor::from_rows(v_tgt));
    let diff = g.sub(v_pred, vt);
    let sq = g.square(diff);
    let hw = g.constant(Tensor::column(&normalized_horizon_weights(h)));
    let weighted = g.mul(sq, hw);
    let lv = g.mean_all(weighted);
    let lv = g.scale(lv, schedule.p2_weight[t]);

    let scaled_yt = Tensor::from_rows(y_t).map(|x| sa * x);
    let yt = g.constant(scaled_yt);
    let vs = g.scale(v_pred, -sb);
    let y0 = g.add(yt, vs);
    let sigma = g.constant(Tensor::row(stats.sigma()));
    let mu = g.constant(Tensor::row(stats.mu()));
    let tok = g.mul(y0, sigma);
    let tok = g.add(tok, mu);
    let u = g.slice_cols(tok, 0, 1);
    let v = g.slice_cols(tok, 1, 1);
    let s = g.slice_cols(tok, 2, 1);
    let z = g.exp(s);
    let x = g.mul(u, z);
    let y = g.mul(v, z);
    let trans = g.concat_cols(&[x, y, z]);
    let r6 = g.slice_cols(tok, 3, 6);
    let rot = graph_rot6d_decode(g, r6);

    let gt_t = g.constant(gt.trans.clone());
    let gt_r = g.constant(gt.rot.clone());
    let ang = graph_geodesic(g, gt_r, rot);
    let ang = g.mean_all(ang);
    let terr = g.sub(trans, gt_t);
    let tn = rows_norm(g, terr);
    let tn = g.mean_all(tn);
    let ang = g.scale(ang, w.lambda_r);
    let tn = g.scale(tn, w.lambda_trans);
    let aux = g.add(ang, tn);
    let aux = g.scale(aux, ab);

    let zero = g.scalar(0.0);
    let (vel, acc) = if h >= 2 {
        let (dt, dr) = graph_increments(g, trans, rot);
        let (gdt, gdr) = graph_increments(g, gt_t, gt_r);
        let vel = graph_increment_loss(g, dt, dr, gdt, gdr, ab);
        let acc = if h >= 3 {
            let (d2t, d2r) = graph_increments(g, dt, dr);
            let (gd2t, gd2r) = graph_increments(g, gdt, gdr);
            graph_increment_loss(g, d2t, d2r, gd2t, gd2r, ab)
        } else {
            zero
        };
        (vel, acc)
    } else {
        (zero, zero)
    };

    let below = g.scale(z, -1.0);
    let below = g.add_scalar(below, w.z_min);
    let below = g.relu(below);
    let zmin = g.mean_all(below);
    let zmin = g.scale(zmin, w.floor_coeff);

    let t1 = g.add(lv, aux);
    let t1 = g.add(t1, zmin);
    let vw = g.scale(vel, w.lambda_vel);
    let aw = g.scale(acc, w.lambda_acc);
    let t1 = g.add(t1, vw);
    let total = g.add(t1, aw);
    LossVars { total, v: lv, aux, vel, acc, zmin }
}

/// A window converted to model inputs under frozen statistics.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub context_tokens: Vec<TokenArray>,
    pub boxes: Vec<NormBox>,
    pub scene: SceneInput,
    pub future_tokens: Vec<TokenArray>,
    pub future_poses: Vec<PoseSE3>,
    pub future_rows: PoseRows,
}

impl PreparedSample {
    pub fn new(window: &TrajectoryWindow, stats: &TokenStats, cfg: &ModelConfig) -> Result<Self, LossError> {
        Ok(Self {
            context_tokens: standardize(&tokenize(&window.context_poses)?, stats)?,
            boxes: window.context_boxes.clone(),
            scene: SceneInput::for_window(window, cfg)?,
            future_tokens: standardize(&tokenize(&window.future_poses)?, stats)?,
            future_poses: window.future_poses.clone(),
            future_rows: PoseRows::new(&window.future_poses),
        })
    }
}

/// Output of one differentiable training evaluation.
pub struct SampleLoss {
    pub breakdown: LossBreakdown,
    pub grads: Gradients,
    /// Discrete-choice fingerprint of the pass (see `Graph::fingerprint`).
    pub fingerprint: u64,
}

/// Full forward pass and loss for one sample at step `t` with noise `eps`;
/// optionally backpropagates.
#[allow(clippy::too_many_arguments)]
pub fn sample_loss(
    params: &ModelParams,
    sample: &PreparedSample,
    t: usize,
    eps: &[TokenArray],
    schedule: &DiffusionSchedule,
    stats: &TokenStats,
    w: &LossWeights,
    backward: bool,
) -> Result<SampleLoss, LossError> {
    let y0 = &sample.future_tokens;
    let y_t = q_sample(schedule, y0, t, eps)?;
    let v_tgt = v_target(schedule, y0, eps, t)?;
    let mut g = Graph::new();
    let net = Net::trainable(params);
    let ct = g.constant(Tensor::from_rows(&sample.context_tokens));
    let bx = g.constant(Tensor::from_rows(&sample.boxes));
    let ctx = net.context(&mut g, ct, bx);
    let (z, _) = net.scene(&mut g, &sample.scene, ctx);
    let yt = g.constant(Tensor::from_rows(&y_t));
    let v_pred = net.dit(&mut g, yt, t, ct, z).output;
    let loss = graph_total_loss(&mut g, &y_t, v_pred, &v_tgt, &sample.future_rows, t, schedule, stats, w);
    let grads = if backward { g.backward(loss.total) } else { Gradients::empty() };
    Ok(SampleLoss { breakdown: loss.breakdown(&g), grads, fingerprint: g.fingerprint() })
}
