//! Training loop, Adam, and the context/horizon ablation sweep.

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{Checkpoint, CheckpointHeader};
use crate::losses::{sample_loss, LossBreakdown, LossError, LossWeights, PreparedSample};
use crate::metrics::{evaluate_batch, MetricReport, MetricsError};
use crate::model::{
    gradient_check, predict_trajectory, to_f32_grid, GradCheckReport, ModelConfig, ModelError, ModelParams,
};
use crate::rng::{gaussian_tokens, stream_for};
use crate::schedule::{build_schedule, DiffusionSchedule};
use crate::tensor::Tensor;
use crate::tokens::{tokenize, StatsAccumulator, TokenError, TokenStats, TrajectoryWindow};

const TAG_SHUFFLE: u64 = 1;
const TAG_NOISE: u64 = 2;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("data mismatch: {0}")]
    DataMismatch(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: usize, what: String },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Batches whose tokens fit the standardization statistics.
    pub warmup_batches: usize,
    /// Log the running loss every this many steps (0 disables).
    pub eval_every: usize,
    pub context: usize,
    pub horizon: usize,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            steps: 2000,
            learning_rate: 1e-3,
            adam_betas: [0.9, 0.999],
            adam_eps: 1e-8,
            grad_clip_norm: 1.0,
            seed: 0,
            warmup_batches: crate::tokens::DEFAULT_WARMUP_BATCHES,
            eval_every: 100,
            context: 3,
            horizon: 8,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.batch_size == 0 || self.warmup_batches == 0 || self.context == 0 || self.horizon == 0 {
            return bad("batch_size, warmup_batches, context and horizon must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.adam_eps > 0.0) || !(self.grad_clip_norm > 0.0) {
            return bad("learning rate, eps and clip norm must be positive");
        }
        if self.adam_betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad("adam betas must lie in [0, 1)");
        }
        Ok(())
    }
}

/// One loss-curve row: batch means of the raw terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub step: usize,
    pub loss: LossBreakdown,
}

pub const CURVE_HEADER: &str = "step,loss,loss_v,loss_aux,loss_vel,loss_acc,loss_zmin";

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut s = format!("{CURVE_HEADER}\n");
    for r in rows {
        let l = &r.loss;
        s.push_str(&format!("{},{},{},{},{},{},{}\n", r.step, l.total, l.v, l.aux, l.vel, l.acc, l.zmin));
    }
    s
}

/// Index sequence over repeated seeded shuffles of `n` items.
pub struct BatchStream {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchStream {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        Self { n, batch, seed, epoch: 0, order: Vec::new(), pos: 0 }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.order.len() {
                self.order = (0..self.n).collect();
                self.order.shuffle(&mut stream_for(self.seed, &[TAG_SHUFFLE, self.epoch]));
                self.epoch += 1;
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Fits statistics on the tokens (context and future) of the first
/// `warmup_batches` batches of the training order, then freezes them.
pub fn fit_stats(windows: &[TrajectoryWindow], cfg: &TrainConfig) -> Result<TokenStats, TrainError> {
    let mut acc = StatsAccumulator::new();
    let mut batches = BatchStream::new(windows.len(), cfg.batch_size, cfg.seed);
    for _ in 0..cfg.warmup_batches {
        let mut tokens = Vec::new();
        for i in batches.next_batch() {
            let w = &windows[i];
            tokens.extend(tokenize(&w.context_poses)?);
            tokens.extend(tokenize(&w.future_poses)?);
        }
        acc.push_batch(&tokens)?;
    }
    Ok(acc.freeze(cfg.warmup_batches)?)
}

pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    lr: f64,
    betas: [f64; 2],
    eps: f64,
}

impl Adam {
    pub fn new(params: &ModelParams, cfg: &TrainConfig) -> Self {
        Self {
            m: params.zero_grads(),
            v: params.zero_grads(),
            t: 0,
            lr: cfg.learning_rate,
            betas: cfg.adam_betas,
            eps: cfg.adam_eps,
        }
    }

    /// Bias-corrected Adam step; results are kept on the `f32` grid.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor]) {
        self.t += 1;
        let [b1, b2] = self.betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (((p, g), m), v) in params.tensors.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                let update = self.lr * (m.data[i] / c1) / ((v.data[i] / c2).sqrt() + self.eps);
                p.data[i] = to_f32_grid(p.data[i] - update);
            }
        }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|t| &t.data).map(|g| g * g).sum::<f64>().sqrt()
}

/// Scales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flat_map(|t| &mut t.data) {
            *g *= s;
        }
    }
    norm
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub curve: Vec<CurveRow>,
}

fn check_windows(windows: &[TrajectoryWindow], cfg: &TrainConfig, model: &ModelConfig) -> Result<(), TrainError> {
    if windows.is_empty() {
        return Err(TrainError::DataMismatch("no training windows".into()));
    }
    if model.context != cfg.context || model.horizon != cfg.horizon {
        return Err(TrainError::DataMismatch(format!(
            "model is configured for C={} H={}, training for C={} H={}",
            model.context, model.horizon, cfg.context, cfg.horizon
        )));
    }
    for w in windows {
        if w.context_len() != cfg.context || w.horizon() != cfg.horizon {
            return Err(TrainError::DataMismatch(format!(
                "window {} has C={} H={}, expected C={} H={}",
                w.clip_id,
                w.context_len(),
                w.horizon(),
                cfg.context,
                cfg.horizon
            )));
        }
    }
    Ok(())
}

/// Trains from a fresh initialization seeded by `cfg.seed`. The result is
/// a pure function of the windows and both configs.
pub fn train(windows: &[TrajectoryWindow], model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    check_windows(windows, cfg, model)?;
    let mut params = ModelParams::init(model, cfg.seed)?;
    let stats = fit_stats(windows, cfg)?;
    let schedule = build_schedule(model.diffusion_steps, model.sampling_steps).map_err(LossError::from)?;
    let prepared: Vec<PreparedSample> = windows
        .par_iter()
        .map(|w| PreparedSample::new(w, &stats, model))
        .collect::<Result<_, _>>()?;
    let mut adam = Adam::new(&params, cfg);
    let mut batches = BatchStream::new(windows.len(), cfg.batch_size, cfg.seed);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = batches.next_batch();
        let (grads, loss) = batch_gradients(&params, &prepared, &idx, step, &schedule, &stats, cfg)?;
        curve.push(CurveRow { step, loss });
        let mut grads = grads;
        let norm = clip_grad_norm(&mut grads, cfg.grad_clip_norm);
        if !norm.is_finite() {
            return Err(TrainError::NonFinite { step, what: "gradient norm".into() });
        }
        adam.step(&mut params, &grads);
        debug!("step {step} loss {:.6} grad norm {norm:.4}", loss.total);
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            let lo = curve.len().saturating_sub(cfg.eval_every);
            let mean = curve[lo..].iter().map(|r| r.loss.total).sum::<f64>() / (curve.len() - lo) as f64;
            info!("step {} mean loss {mean:.6}", step + 1);
        }
    }
    let header = CheckpointHeader { config: model.clone(), stats, seed: cfg.seed, step: cfg.steps as u64 };
    Ok(TrainOutput { checkpoint: Checkpoint { header, params }, curve })
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len() as f64;
    let f = |g: fn(&LossBreakdown) -> f64| items.iter().map(g).sum::<f64>() / n;
    LossBreakdown {
        total: f(|l| l.total),
        v: f(|l| l.v),
        aux: f(|l| l.aux),
        vel: f(|l| l.vel),
        acc: f(|l| l.acc),
        zmin: f(|l| l.zmin),
    }
}

/// Mean loss and gradient over one batch. Per-sample passes run in
/// parallel; the reduction follows batch order.
fn batch_gradients(
    params: &ModelParams,
    prepared: &[PreparedSample],
    idx: &[usize],
    step: usize,
    schedule: &DiffusionSchedule,
    stats: &TokenStats,
    cfg: &TrainConfig,
) -> Result<(Vec<Tensor>, LossBreakdown), TrainError> {
    let results: Vec<_> = idx
        .par_iter()
        .enumerate()
        .map(|(slot, &i)| {
            let mut rng = stream_for(cfg.seed, &[TAG_NOISE, step as u64, slot as u64]);
            let t = rng.random_range(0..schedule.steps);
            let eps = gaussian_tokens(&mut rng, cfg.horizon);
            sample_loss(params, &prepared[i], t, &eps, schedule, stats, &cfg.loss_weights, true)
        })
        .collect::<Result<_, _>>()?;
    let mut grads = params.zero_grads();
    let mut losses = Vec::with_capacity(results.len());
    for r in &results {
        if !r.breakdown.total.is_finite() {
            return Err(TrainError::NonFinite { step, what: format!("loss {:?}", r.breakdown) });
        }
        r.grads.accumulate_into(&mut grads);
        losses.push(r.breakdown);
    }
    let scale = 1.0 / idx.len() as f64;
    for g in grads.iter_mut().flat_map(|t| &mut t.data) {
        *g *= scale;
    }
    Ok((grads, mean_breakdown(&losses)))
}

/// One DDIM sample per window from a trained checkpoint.
pub fn evaluate_checkpoint(ck: &Checkpoint, windows: &[TrajectoryWindow], seed: u64) -> Result<MetricReport, TrainError> {
    let cfg = &ck.params.config;
    let schedule = build_schedule(cfg.diffusion_steps, cfg.sampling_steps).map_err(LossError::from)?;
    evaluate_batch(
        windows,
        |w, s| Ok::<_, TrainError>(predict_trajectory(w, &ck.params, &ck.header.stats, &schedule, s)?),
        seed,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub context: usize,
    pub horizon: usize,
    pub report: MetricReport,
}

pub const ABLATION_HEADER: &str = "C,H,ade,fde,des,are,fre,res,n";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let v = r.report.values();
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.context, r.horizon, v[0], v[1], v[2], v[3], v[4], v[5], r.report.n_samples
        ));
    }
    s
}

/// Trains and evaluates one model per feasible `(C, H)` cell. Training and
/// validation windows carry the largest context and horizon; each cell
/// keeps the last `C` observed frames and crops the future to `H`. Cells
/// exceeding the data are skipped.
pub fn ablation_sweep(
    train_windows: &[TrajectoryWindow],
    val_windows: &[TrajectoryWindow],
    contexts: &[usize],
    horizons: &[usize],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Vec<AblationRow>, TrainError> {
    let max_c = train_windows.iter().chain(val_windows).map(TrajectoryWindow::context_len).min().unwrap_or(0);
    let max_h = train_windows.iter().chain(val_windows).map(TrajectoryWindow::horizon).min().unwrap_or(0);
    let mut rows = Vec::new();
    for &c in contexts {
        for &h in horizons {
            if c == 0 || h == 0 || c > max_c || h > max_h {
                info!("skipping infeasible cell C={c} H={h}");
                continue;
            }
            let trim = |ws: &[TrajectoryWindow]| -> Result<Vec<TrajectoryWindow>, TrainError> {
                Ok(ws.iter().map(|w| w.trimmed(c, h)).collect::<Result<_, _>>()?)
            };
            let m = ModelConfig { context: c, horizon: h, ..model.clone() };
            let tc = TrainConfig { context: c, horizon: h, ..cfg.clone() };
            let out = train(&trim(train_windows)?, &m, &tc)?;
            let report = evaluate_checkpoint(&out.checkpoint, &trim(val_windows)?, cfg.seed)?;
            info!("C={c} H={h} ADE {:.4}", report.ade);
            rows.push(AblationRow { context: c, horizon: h, report });
        }
    }
    Ok(rows)
}

/// Central-difference check of the full model and total loss on one
/// window. Zero-initialized arrays are jittered first so every path
/// carries gradient; statistics are fitted on the window itself.
pub fn model_gradient_check(
    model: &ModelConfig,
    window: &TrajectoryWindow,
    t: usize,
    probes: usize,
    seed: u64,
) -> Result<GradCheckReport, TrainError> {
    model.validate()?;
    let mut params = ModelParams::init(model, seed)?;
    params.jitter_zero_init(0.05, seed);
    let mut acc = StatsAccumulator::new();
    acc.push_batch(&tokenize(&window.context_poses)?)?;
    acc.push_batch(&tokenize(&window.future_poses)?)?;
    let stats = acc.freeze(2)?;
    let schedule = build_schedule(model.diffusion_steps, model.sampling_steps).map_err(LossError::from)?;
    let sample = PreparedSample::new(window, &stats, model)?;
    let eps = gaussian_tokens(&mut stream_for(seed, &[TAG_NOISE]), window.horizon());
    let weights = LossWeights::default();
    let base = sample_loss(&params, &sample, t, &eps, &schedule, &stats, &weights, false)?;
    if !base.breakdown.total.is_finite() {
        return Err(TrainError::NonFinite { step: 0, what: "gradient-check loss".into() });
    }
    let eval = |v: &[Tensor]| {
        let mut q = params.clone();
        q.tensors = v.to_vec();
        let out = sample_loss(&q, &sample, t, &eps, &schedule, &stats, &weights, true).expect("validated sample");
        let mut grads = q.zero_grads();
        out.grads.accumulate_into(&mut grads);
        (out.breakdown.total, grads, out.fingerprint)
    };
    Ok(gradient_check(&params.tensors, eval, probes, seed))
}
