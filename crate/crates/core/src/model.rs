//! The forecasting network: context encoder, FiLM point-set scene encoder
//! and the AdaLN-Zero diffusion transformer that predicts v.
//!
//! Every forward pass is recorded on a [`Graph`]; inference uses the same
//! code with parameters bound as constants.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::stream_for;
use crate::schedule::{ddim_sample, DiffusionSchedule, ScheduleError};
use crate::se3::{PoseSE3, Rotation};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;
use crate::tokens::{
    depth_denormalize, destandardize, standardize, tokenize, NormBox, PoseToken9, TokenArray, TokenError,
    TokenStats, TrajectoryWindow,
};

pub const D_GEOM: usize = 512;
pub const CONTEXT_HEADS: usize = 4;
pub const TIME_EMBED_DIM: usize = 128;
pub const SIGNED_TIME_DIM: usize = 32;
pub const MLP_RATIO: usize = 4;
pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_ctx: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub point_width: usize,
    pub n_points: usize,
    pub knn_k: usize,
    pub pool_tau: f64,
    pub context: usize,
    pub horizon: usize,
    pub diffusion_steps: usize,
    pub sampling_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_ctx: 256,
            width: 128,
            blocks: 2,
            heads: 4,
            point_width: 64,
            n_points: 512,
            knn_k: 16,
            pool_tau: 0.2,
            context: 3,
            horizon: 8,
            diffusion_steps: 1000,
            sampling_steps: 50,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad("width must be a positive multiple of heads");
        }
        if self.d_ctx == 0 || self.d_ctx % CONTEXT_HEADS != 0 || self.d_ctx % 2 != 0 {
            return bad("d_ctx must be a positive multiple of 4");
        }
        if self.point_width == 0 || self.knn_k == 0 || self.n_points == 0 {
            return bad("point_width, knn_k and n_points must be positive");
        }
        if !(self.pool_tau > 0.0) {
            return bad("pool_tau must be positive");
        }
        if self.context == 0 || self.horizon == 0 {
            return bad("context and horizon must be positive");
        }
        if self.sampling_steps == 0 || self.sampling_steps > self.diffusion_steps {
            return bad("need 1 <= sampling_steps <= diffusion_steps");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lin {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockIds {
    pub ada: Lin,
    pub qkv: Lin,
    pub proj: Lin,
    pub fc1: Lin,
    pub fc2: Lin,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageIds {
    pub mlp: Lin,
    pub film: Lin,
}

/// Indices of every named array in [`ModelParams::tensors`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub ctx_in: Lin,
    pub ctx_time_scale: usize,
    pub ctx_q: Lin,
    pub ctx_k: Lin,
    pub ctx_v: Lin,
    pub ctx_o: Lin,
    pub pt_in1: Lin,
    pub pt_in2: Lin,
    pub stages: Vec<StageIds>,
    pub pool_q: Lin,
    pub geom_out: Lin,
    pub embed: Lin,
    pub pos: usize,
    pub token_type: usize,
    pub signed_time: Lin,
    pub temb1: Lin,
    pub temb2: Lin,
    pub blocks: Vec<BlockIds>,
    pub final_ada: Lin,
    pub head: Lin,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    FanIn,
    Zero,
    One,
    Table,
}

struct Registry {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
}

impl Registry {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push((rows, cols));
        self.inits.push(init);
        self.names.len() - 1
    }

    fn lin(&mut self, name: &str, i: usize, o: usize) -> Lin {
        Lin { w: self.add(format!("{name}.w"), i, o, Init::FanIn), b: self.add(format!("{name}.b"), 1, o, Init::Zero) }
    }

    fn zero_lin(&mut self, name: &str, i: usize, o: usize) -> Lin {
        Lin { w: self.add(format!("{name}.w"), i, o, Init::Zero), b: self.add(format!("{name}.b"), 1, o, Init::Zero) }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Registry) {
    let mut r = Registry { names: vec![], shapes: vec![], inits: vec![] };
    let (dc, w, p) = (cfg.d_ctx, cfg.width, cfg.point_width);
    let ctx_in = r.lin("ctx.in", 13, dc);
    let ctx_time_scale = r.add("ctx.time_scale".into(), 1, 1, Init::One);
    let ctx_q = r.lin("ctx.attn.q", dc, dc);
    let ctx_k = r.lin("ctx.attn.k", dc, dc);
    let ctx_v = r.lin("ctx.attn.v", dc, dc);
    let ctx_o = r.lin("ctx.attn.o", dc, dc);
    let pt_in1 = r.lin("scene.point.fc1", 6, p);
    let pt_in2 = r.lin("scene.point.fc2", p, p);
    let stages = (0..2)
        .map(|s| StageIds { mlp: r.lin(&format!("scene.stage{s}.mlp"), 2 * p, p), film: r.lin(&format!("scene.stage{s}.film"), dc, 2 * p) })
        .collect();
    let pool_q = r.lin("scene.pool.query", dc, p);
    let geom_out = r.lin("scene.out", p, D_GEOM);
    let embed = r.lin("dit.embed", 9, w);
    let pos = r.add("dit.pos".into(), cfg.context + cfg.horizon, w, Init::Table);
    let token_type = r.add("dit.token_type".into(), 2, w, Init::Table);
    let signed_time = r.lin("dit.signed_time", SIGNED_TIME_DIM, w);
    let temb1 = r.lin("dit.temb.fc1", TIME_EMBED_DIM + D_GEOM, w);
    let temb2 = r.lin("dit.temb.fc2", w, w);
    let blocks = (0..cfg.blocks)
        .map(|b| BlockIds {
            ada: r.zero_lin(&format!("dit.block{b}.ada"), w, 6 * w),
            qkv: r.lin(&format!("dit.block{b}.attn.qkv"), w, 3 * w),
            proj: r.lin(&format!("dit.block{b}.attn.proj"), w, w),
            fc1: r.lin(&format!("dit.block{b}.mlp.fc1"), w, MLP_RATIO * w),
            fc2: r.lin(&format!("dit.block{b}.mlp.fc2"), MLP_RATIO * w, w),
        })
        .collect();
    let final_ada = r.zero_lin("dit.final.ada", w, 2 * w);
    let head = r.zero_lin("dit.head", w, 9);
    let layout = Layout {
        ctx_in,
        ctx_time_scale,
        ctx_q,
        ctx_k,
        ctx_v,
        ctx_o,
        pt_in1,
        pt_in2,
        stages,
        pool_q,
        geom_out,
        embed,
        pos,
        token_type,
        signed_time,
        temb1,
        temb2,
        blocks,
        final_ada,
        head,
    };
    (layout, r)
}

/// Rounds to the nearest `f32` so parameters survive checkpointing exactly.
pub fn to_f32_grid(x: f64) -> f64 {
    x as f32 as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layout: Layout,
    names: Vec<String>,
    zero_init: Vec<bool>,
    pub tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Seeded initialization: weights `U(±1/√fan_in)`, biases 0, tables
    /// `U(±1/√width)`, AdaLN modulation and output head exactly 0.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, reg) = build_layout(config);
        let tensors = reg
            .shapes
            .iter()
            .zip(&reg.inits)
            .enumerate()
            .map(|(i, (&(rows, cols), init))| {
                let bound = match init {
                    Init::FanIn => 1.0 / (rows as f64).sqrt(),
                    Init::Table => 1.0 / (cols as f64).sqrt(),
                    Init::Zero => return Tensor::zeros(rows, cols),
                    Init::One => return Tensor::filled(rows, cols, 1.0),
                };
                let mut rng = stream_for(seed, &[i as u64]);
                Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| to_f32_grid(rng.random_range(-bound..bound))).collect())
            })
            .collect();
        let zero_init = reg.inits.iter().map(|i| *i == Init::Zero).collect();
        Ok(Self { config: config.clone(), layout, names: reg.names, zero_init, tensors })
    }

    /// Rebuilds a parameter set from named arrays (checkpoint loading).
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        let mut p = Self::init(config, 0)?;
        if named.len() != p.names.len() {
            return Err(ModelError::ShapeMismatch(format!("{} arrays, layout has {}", named.len(), p.names.len())));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != p.names[i] || t.shape() != p.tensors[i].shape() {
                return Err(ModelError::ShapeMismatch(format!(
                    "array {i}: got {name} {:?}, expected {} {:?}",
                    t.shape(),
                    p.names[i],
                    p.tensors[i].shape()
                )));
            }
            p.tensors[i] = t;
        }
        Ok(p)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn is_zero_init(&self, id: usize) -> bool {
        self.zero_init[id]
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.tensors.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect()
    }

    /// Replaces the exactly-zero initial arrays with seeded values
    /// `U(±scale/√rows)` so every path carries gradient (used before
    /// finite-difference checks).
    pub fn jitter_zero_init(&mut self, scale: f64, seed: u64) {
        for (i, t) in self.tensors.iter_mut().enumerate() {
            if self.zero_init[i] {
                let bound = scale / (t.rows as f64).sqrt();
                let mut rng = stream_for(seed, &[0x5a, i as u64]);
                for v in &mut t.data {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
    }
}

/// Sin/cos features of `x` over `dim/2` geometric frequencies.
pub fn sinusoid(x: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for j in 0..half {
        let freq = (-(10000f64.ln()) * j as f64 / half as f64).exp();
        out[j] = (x * freq).sin();
        out[half + j] = (x * freq).cos();
    }
    out
}

/// Precomputed geometry for the scene encoder.
#[derive(Debug, Clone)]
pub struct SceneInput {
    pub points: Tensor,
    pub neighbors: Vec<usize>,
    pub k: usize,
    pub centroid_dist: Tensor,
}

impl SceneInput {
    /// `k`-nearest neighbors (self included, ties by index) on the camera
    /// coordinates; distance of every point to `centroid`.
    pub fn new(points: &[[f64; 6]], centroid: [f64; 3], knn_k: usize) -> Result<Self, ModelError> {
        let n = points.len();
        if n == 0 {
            return Err(ModelError::ShapeMismatch("empty point cloud".into()));
        }
        let k = knn_k.min(n);
        let d2 = |a: &[f64; 6], b: &[f64; 6]| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>();
        let mut neighbors = Vec::with_capacity(n * k);
        let mut order: Vec<usize> = (0..n).collect();
        for p in points {
            order.sort_by(|&a, &b| d2(p, &points[a]).total_cmp(&d2(p, &points[b])).then(a.cmp(&b)));
            neighbors.extend_from_slice(&order[..k]);
        }
        let dist = points
            .iter()
            .map(|p| (0..3).map(|c| (p[c] - centroid[c]).powi(2)).sum::<f64>().sqrt())
            .collect();
        Ok(Self {
            points: Tensor::from_rows(points),
            neighbors,
            k,
            centroid_dist: Tensor::from_vec(n, 1, dist),
        })
    }

    /// Uses at most `cfg.n_points` points, taken at an even stride.
    pub fn for_window(w: &TrajectoryWindow, cfg: &ModelConfig) -> Result<Self, ModelError> {
        let c = w.anchor_pose().translation;
        let all = &w.anchor_points;
        if all.len() <= cfg.n_points {
            return Self::new(all, [c.x, c.y, c.z], cfg.knn_k);
        }
        let pts: Vec<[f64; 6]> = (0..cfg.n_points).map(|i| all[i * all.len() / cfg.n_points]).collect();
        Self::new(&pts, [c.x, c.y, c.z], cfg.knn_k)
    }
}

/// Binds parameters into a graph, either as differentiable leaves or as
/// constants.
pub struct Net<'p> {
    pub params: &'p ModelParams,
    track: bool,
}

/// Intermediate values of one DiT pass, for inspection.
pub struct DitTrace {
    pub output: Var,
    pub block_io: Vec<(Var, Var)>,
}

impl<'p> Net<'p> {
    pub fn trainable(params: &'p ModelParams) -> Self {
        Self { params, track: true }
    }

    pub fn frozen(params: &'p ModelParams) -> Self {
        Self { params, track: false }
    }

    fn get(&self, g: &mut Graph<'p>, id: usize) -> Var {
        let t = &self.params.tensors[id];
        if self.track {
            g.param(id, t)
        } else {
            g.constant_ref(t)
        }
    }

    fn lin(&self, g: &mut Graph<'p>, x: Var, l: Lin) -> Var {
        let w = self.get(g, l.w);
        let b = self.get(g, l.b);
        g.linear(x, w, b)
    }

    /// `tokens: C×9` standardized, `boxes: C×4` → `1×D_ctx`.
    pub fn context(&self, g: &mut Graph<'p>, tokens: Var, boxes: Var) -> Var {
        let l = &self.params.layout;
        let dc = self.params.config.d_ctx;
        let c = g.shape(tokens).0;
        let x = g.concat_cols(&[tokens, boxes]);
        let e = self.lin(g, x, l.ctx_in);
        let rel: Vec<Vec<f64>> = (0..c).map(|k| sinusoid(k as f64 - (c - 1) as f64, dc)).collect();
        let rel = g.constant(Tensor::from_rows(&rel));
        let scale = self.get(g, l.ctx_time_scale);
        let rel = g.mul(rel, scale);
        let e = g.add(e, rel);
        let anchor = g.slice_rows(e, c - 1, 1);
        let q = self.lin(g, anchor, l.ctx_q);
        let k = self.lin(g, e, l.ctx_k);
        let v = self.lin(g, e, l.ctx_v);
        let att = attention(g, q, k, v, CONTEXT_HEADS);
        let o = self.lin(g, att, l.ctx_o);
        g.add(anchor, o)
    }

    /// Returns `(z_geom: 1×512, pooling weights: 1×N)`.
    pub fn scene(&self, g: &mut Graph<'p>, scene: &SceneInput, ctx: Var) -> (Var, Var) {
        let l = &self.params.layout;
        let cfg = &self.params.config;
        let p = cfg.point_width;
        let x = g.constant(scene.points.clone());
        let h = self.lin(g, x, l.pt_in1);
        let h = g.gelu(h);
        let mut h = self.lin(g, h, l.pt_in2);
        for st in &l.stages {
            let agg = g.group_max(h, &scene.neighbors, scene.k);
            let cat = g.concat_cols(&[h, agg]);
            let m = self.lin(g, cat, st.mlp);
            let m = g.gelu(m);
            let film = self.lin(g, ctx, st.film);
            let gamma = g.slice_cols(film, 0, p);
            let beta = g.slice_cols(film, p, p);
            let gamma = g.add_scalar(gamma, 1.0);
            let m = g.mul(m, gamma);
            h = g.add(m, beta);
        }
        let q = self.lin(g, ctx, l.pool_q);
        let dist = g.constant(scene.centroid_dist.clone());
        let weights = pool_weights(g, h, q, dist, cfg.pool_tau);
        let pooled = g.matmul(weights, h);
        (self.lin(g, pooled, l.geom_out), weights)
    }

    /// Predicted `v` for the `H` noised tokens given clean standardized
    /// context tokens and the scene embedding.
    pub fn dit(&self, g: &mut Graph<'p>, y_t: Var, t: usize, ctx_tokens: Var, z_geom: Var) -> DitTrace {
        let l = &self.params.layout;
        let cfg = &self.params.config;
        let w = cfg.width;
        let c = g.shape(ctx_tokens).0;
        let h = g.shape(y_t).0;
        let n = c + h;

        let seq = g.concat_rows(&[ctx_tokens, y_t]);
        let mut x = self.lin(g, seq, l.embed);
        let pos = self.get(g, l.pos);
        let pos = g.slice_rows(pos, 0, n);
        x = g.add(x, pos);
        let table = self.get(g, l.token_type);
        let kinds: Vec<usize> = (0..n).map(|i| usize::from(i >= c)).collect();
        let types = g.gather_rows(table, &kinds);
        x = g.add(x, types);
        let rel: Vec<Vec<f64>> = (0..n).map(|i| sinusoid(i as f64 - (c - 1) as f64, SIGNED_TIME_DIM)).collect();
        let rel = g.constant(Tensor::from_rows(&rel));
        let rel = self.lin(g, rel, l.signed_time);
        x = g.add(x, rel);

        let temb = g.constant(Tensor::row(&sinusoid(t as f64, TIME_EMBED_DIM)));
        let cond = g.concat_cols(&[temb, z_geom]);
        let cond = self.lin(g, cond, l.temb1);
        let cond = g.silu(cond);
        let cond = self.lin(g, cond, l.temb2);
        let cond_act = g.silu(cond);

        let mut block_io = Vec::with_capacity(l.blocks.len());
        for b in &l.blocks {
            let input = x;
            let m = self.lin(g, cond_act, b.ada);
            let part = |g: &mut Graph<'p>, i: usize| g.slice_cols(m, i * w, w);
            let (sh1, sc1, g1, sh2, sc2, g2) =
                (part(g, 0), part(g, 1), part(g, 2), part(g, 3), part(g, 4), part(g, 5));

            let xn = modulate(g, x, sh1, sc1);
            let qkv = self.lin(g, xn, b.qkv);
            let q = g.slice_cols(qkv, 0, w);
            let k = g.slice_cols(qkv, w, w);
            let v = g.slice_cols(qkv, 2 * w, w);
            let a = attention(g, q, k, v, cfg.heads);
            let a = self.lin(g, a, b.proj);
            let a = g.mul(a, g1);
            x = g.add(x, a);

            let xn = modulate(g, x, sh2, sc2);
            let f = self.lin(g, xn, b.fc1);
            let f = g.gelu(f);
            let f = self.lin(g, f, b.fc2);
            let f = g.mul(f, g2);
            x = g.add(x, f);
            block_io.push((input, x));
        }

        let m = self.lin(g, cond_act, l.final_ada);
        let sh = g.slice_cols(m, 0, w);
        let sc = g.slice_cols(m, w, w);
        let xn = modulate(g, x, sh, sc);
        let out = self.lin(g, xn, l.head);
        DitTrace { output: g.slice_rows(out, c, h), block_io }
    }
}

/// Object-biased attention pooling weights `1×N`:
/// `softmax_i(q·f_i/√d − dist_i/τ)` for features `N×d`, query `1×d` and
/// centroid distances `N×1`.
pub fn pool_weights(g: &mut Graph<'_>, feats: Var, query: Var, dist: Var, tau: f64) -> Var {
    let d = g.shape(feats).1;
    let qt = g.transpose(query);
    let logits = g.matmul(feats, qt);
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    let bias = g.scale(dist, -1.0 / tau);
    let logits = g.add(logits, bias);
    let logits = g.transpose(logits);
    g.softmax_rows(logits)
}

/// `LN(x) ⊙ (1 + scale) + shift` with a non-affine layer norm.
fn modulate(g: &mut Graph<'_>, x: Var, shift: Var, scale: Var) -> Var {
    let xn = g.layer_norm_rows(x, LN_EPS);
    let s = g.add_scalar(scale, 1.0);
    let y = g.mul(xn, s);
    g.add(y, shift)
}

/// Multi-head scaled dot-product attention, no mask.
fn attention(g: &mut Graph<'_>, q: Var, k: Var, v: Var, heads: usize) -> Var {
    let w = g.shape(q).1;
    let dh = w / heads;
    let kt = g.transpose(k);
    let outs: Vec<Var> = (0..heads)
        .map(|hd| {
            let qh = g.slice_cols(q, hd * dh, dh);
            let kh = g.slice_rows(kt, hd * dh, dh);
            let vh = g.slice_cols(v, hd * dh, dh);
            let s = g.matmul(qh, kh);
            let s = g.scale(s, 1.0 / (dh as f64).sqrt());
            let a = g.softmax_rows(s);
            g.matmul(a, vh)
        })
        .collect();
    if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    }
}

pub fn tokens_tensor(tokens: &[TokenArray]) -> Tensor {
    Tensor::from_rows(tokens)
}

pub fn tensor_tokens(t: &Tensor) -> Vec<TokenArray> {
    assert_eq!(t.cols, 9);
    (0..t.rows).map(|r| t.row_slice(r).try_into().unwrap()).collect()
}

/// Everything the denoiser is conditioned on besides `(y_t, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub ctx: Vec<f64>,
    pub z_geom: Vec<f64>,
    pub context_tokens: Vec<TokenArray>,
    pub boxes: Vec<NormBox>,
}

fn check_context(tokens: &[TokenArray], boxes: &[NormBox], params: &ModelParams) -> Result<(), ModelError> {
    if tokens.is_empty() || tokens.len() != boxes.len() {
        return Err(ModelError::ShapeMismatch(format!("{} context tokens, {} boxes", tokens.len(), boxes.len())));
    }
    if tokens.len() > params.config.context {
        return Err(ModelError::ShapeMismatch(format!(
            "{} context tokens exceed configured C={}",
            tokens.len(),
            params.config.context
        )));
    }
    Ok(())
}

pub fn encode_context(tokens: &[TokenArray], boxes: &[NormBox], params: &ModelParams) -> Result<Vec<f64>, ModelError> {
    check_context(tokens, boxes, params)?;
    let mut g = Graph::new();
    let net = Net::frozen(params);
    let t = g.constant(tokens_tensor(tokens));
    let b = g.constant(Tensor::from_rows(boxes));
    let ctx = net.context(&mut g, t, b);
    Ok(g.value(ctx).data.clone())
}

/// Returns `z_geom` and the per-point pooling weights.
pub fn encode_scene_with_weights(
    scene: &SceneInput,
    ctx: &[f64],
    params: &ModelParams,
) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    if ctx.len() != params.config.d_ctx || scene.points.cols != 6 {
        return Err(ModelError::ShapeMismatch("scene encoder inputs".into()));
    }
    let mut g = Graph::new();
    let net = Net::frozen(params);
    let c = g.constant(Tensor::row(ctx));
    let (z, w) = net.scene(&mut g, scene, c);
    Ok((g.value(z).data.clone(), g.value(w).data.clone()))
}

pub fn encode_scene(
    points: &[[f64; 6]],
    ctx: &[f64],
    centroid: [f64; 3],
    params: &ModelParams,
) -> Result<Vec<f64>, ModelError> {
    let scene = SceneInput::new(points, centroid, params.config.knn_k)?;
    encode_scene_with_weights(&scene, ctx, params).map(|(z, _)| z)
}

fn check_dit(y_t: &[TokenArray], cond: &Conditioning, params: &ModelParams) -> Result<(), ModelError> {
    check_context(&cond.context_tokens, &cond.boxes, params)?;
    let cfg = &params.config;
    if y_t.is_empty() || y_t.len() > cfg.horizon {
        return Err(ModelError::ShapeMismatch(format!("{} future tokens, configured H={}", y_t.len(), cfg.horizon)));
    }
    if cond.z_geom.len() != D_GEOM {
        return Err(ModelError::ShapeMismatch(format!("z_geom has {} entries", cond.z_geom.len())));
    }
    Ok(())
}

pub fn dit_forward(
    y_t: &[TokenArray],
    t: usize,
    cond: &Conditioning,
    params: &ModelParams,
) -> Result<Vec<TokenArray>, ModelError> {
    dit_forward_traced(y_t, t, cond, params).map(|(v, _)| v)
}

/// Like [`dit_forward`], also returning each block's `(input, output)`.
pub fn dit_forward_traced(
    y_t: &[TokenArray],
    t: usize,
    cond: &Conditioning,
    params: &ModelParams,
) -> Result<(Vec<TokenArray>, Vec<(Tensor, Tensor)>), ModelError> {
    check_dit(y_t, cond, params)?;
    let mut g = Graph::new();
    let net = Net::frozen(params);
    let y = g.constant(tokens_tensor(y_t));
    let ct = g.constant(tokens_tensor(&cond.context_tokens));
    let z = g.constant(Tensor::row(&cond.z_geom));
    let tr = net.dit(&mut g, y, t, ct, z);
    let io = tr.block_io.iter().map(|&(a, b)| (g.value(a).clone(), g.value(b).clone())).collect();
    Ok((tensor_tokens(g.value(tr.output)), io))
}

/// Standardized context tokens and boxes of a window, plus its encodings.
pub fn condition(window: &TrajectoryWindow, params: &ModelParams, stats: &TokenStats) -> Result<Conditioning, ModelError> {
    let context_tokens = standardize(&tokenize(&window.context_poses)?, stats)?;
    let ctx = encode_context(&context_tokens, &window.context_boxes, params)?;
    let scene = SceneInput::for_window(window, &params.config)?;
    let (z_geom, _) = encode_scene_with_weights(&scene, &ctx, params)?;
    Ok(Conditioning { ctx, z_geom, context_tokens, boxes: window.context_boxes.clone() })
}

/// Decodes destandardized tokens, substituting the identity rotation for
/// degenerate 6D outputs.
pub fn decode_tokens(tokens: &[TokenArray]) -> Vec<PoseSE3> {
    tokens
        .iter()
        .map(|t| {
            let tok = PoseToken9::from_array(t);
            depth_denormalize(&tok).unwrap_or_else(|e| {
                warn!("{e}; substituting identity rotation");
                let z = tok.s.exp();
                PoseSE3::new(Rotation::identity(), nalgebra::Vector3::new(tok.u * z, tok.v * z, z))
            })
        })
        .collect()
}

/// Samples standardized future tokens for an already-encoded condition.
pub fn sample_tokens(
    cond: &Conditioning,
    horizon: usize,
    params: &ModelParams,
    schedule: &DiffusionSchedule,
    seed: u64,
) -> Result<Vec<TokenArray>, ModelError> {
    ddim_sample(schedule, horizon, seed, |y: &[TokenArray], t| dit_forward(y, t, cond, params))
}

/// One deterministic DDIM sample of the future trajectory in the anchor
/// camera frame.
pub fn predict_trajectory(
    window: &TrajectoryWindow,
    params: &ModelParams,
    stats: &TokenStats,
    schedule: &DiffusionSchedule,
    seed: u64,
) -> Result<Vec<PoseSE3>, ModelError> {
    let cond = condition(window, params, stats)?;
    let y = sample_tokens(&cond, window.horizon(), params, schedule, seed)?;
    Ok(decode_tokens(&destandardize(&y, stats)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub array: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    /// Relative error, or 0 when both sides are below 1e-10.
    pub fn rel_err(&self) -> f64 {
        if self.analytic.abs() < 1e-10 && self.numeric.abs() < 1e-10 {
            0.0
        } else {
            relative_error(self.analytic, self.numeric)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub probes: Vec<Probe>,
    /// Probes resampled because the `±h` evaluations took different
    /// discrete branches (max-pool winner or hinge side).
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.rel_err().total_cmp(&b.rel_err()))
    }
}

pub const FD_STEP: f64 = 2e-3;

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compares analytic gradients with fourth-order central differences
/// (`±h`, `±2h`) at `probes` sampled scalars, at least one per non-empty
/// array. `eval` returns the
/// loss, its gradient per array, and a fingerprint of the discrete choices
/// made during the pass (see `Graph::fingerprint`). A probe whose four
/// evaluations disagree on that fingerprint straddles a kink and is
/// replaced by another index of the same array.
pub fn gradient_check<F>(values: &[Tensor], eval: F, probes: usize, seed: u64) -> GradCheckReport
where
    F: Fn(&[Tensor]) -> (f64, Vec<Tensor>, u64),
{
    let (_, grads, _) = eval(values);
    let mut rng = stream_for(seed, &[0x6c]);
    let nonempty: Vec<usize> = (0..values.len()).filter(|&i| !values[i].is_empty()).collect();
    let per_array = probes.div_ceil(nonempty.len().max(1));
    let mut report = GradCheckReport { max_rel_err: 0.0, probes: Vec::new(), skipped_kinks: 0 };
    let mut work = values.to_vec();
    for &i in &nonempty {
        let mut done = 0;
        let mut attempts = 0;
        while done < per_array && attempts < per_array * 20 {
            attempts += 1;
            let j = rng.random_range(0..values[i].len());
            let x = values[i].data[j];
            let mut f = [0.0; 4];
            let mut kinks = [0u64; 4];
            for (k, off) in [-2.0, -1.0, 1.0, 2.0].iter().enumerate() {
                work[i].data[j] = x + off * FD_STEP;
                (f[k], _, kinks[k]) = eval(&work);
            }
            work[i].data[j] = x;
            if kinks.iter().any(|&k| k != kinks[0]) {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (f[0] - 8.0 * f[1] + 8.0 * f[2] - f[3]) / (12.0 * FD_STEP);
            let probe = Probe { array: i, index: j, analytic: grads[i].data[j], numeric };
            report.max_rel_err = report.max_rel_err.max(probe.rel_err());
            report.probes.push(probe);
            done += 1;
        }
    }
    report
}
