use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use foresight_core::curation::{curate_stream, synthetic_stream, CurateParams, CurationError, FrameRecord, StreamConfig};
use foresight_core::io::{read_windows, write_windows, Checkpoint, IoError, WindowRecord, CHECKPOINT_MAGIC, POINTS_MAGIC};
use foresight_core::metrics::{
    baseline_constant_pose, baseline_constant_velocity, evaluate_batch, evaluate_best_of, MetricReport, MetricsError,
    METRIC_NAMES,
};
use foresight_core::model::{predict_trajectory, ModelConfig, ModelError};
use foresight_core::schedule::build_schedule;
use foresight_core::se3::PoseSE3;
use foresight_core::synth::{generate_window, generate_windows, DatasetConfig, SynthError};
use foresight_core::tokens::{TokenError, TrajectoryWindow};
use foresight_core::trainer::{
    ablation_csv, ablation_sweep, curve_csv, model_gradient_check, train as run_training, TrainConfig, TrainError,
};
use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::svg::overlay;
use crate::{AblateArgs, CurateArgs, EvalArgs, GradcheckArgs, InspectArgs, SampleArgs, SynthGenArgs, SynthKind, TrainArgs};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            TrainError::Model(m) => m.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidSpec(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CurationError> for CliError {
    fn from(e: CurationError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TokenError> for CliError {
    fn from(e: TokenError) -> Self {
        CliError::Data(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Model and training sections of a run config file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn load_windows(path: &Path) -> Result<Vec<TrajectoryWindow>> {
    let w = read_windows(path)?;
    if w.is_empty() {
        return Err(CliError::Data(format!("{}: no windows", path.display())));
    }
    Ok(w)
}

fn check_finite(what: &str, r: &MetricReport) -> Result<()> {
    if r.values().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("non-finite {what} metrics")))
    }
}

pub fn synth_gen(a: SynthGenArgs) -> Result<()> {
    ensure_dir(&a.out)?;
    if a.kind == SynthKind::Stream {
        let mut cfg: StreamConfig = match &a.config {
            Some(p) => read_json(p)?,
            None => StreamConfig::default(),
        };
        if let Some(c) = a.count {
            cfg.clips = c;
        }
        if let Some(s) = a.seed {
            cfg.seed = s;
        }
        let frames = synthetic_stream(&cfg);
        let mut out = String::new();
        for f in &frames {
            out.push_str(&serde_json::to_string(f).expect("serializable frame"));
            out.push('\n');
        }
        let path = a.out.join(format!("{}.jsonl", a.stem.as_deref().unwrap_or("stream")));
        write_file(&path, out.as_bytes())?;
        println!("{}", path.display());
        return Ok(());
    }
    let mut cfg = match (&a.config, a.kind) {
        (Some(p), _) => read_json(p)?,
        (None, SynthKind::ConstantVelocity) => DatasetConfig::constant_velocity(1000, 0),
        (None, SynthKind::Bimodal) => DatasetConfig::bimodal(1000, 0),
        (None, _) => DatasetConfig { count: 1000, ..DatasetConfig::default() },
    };
    if let Some(c) = a.count {
        cfg.count = c;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(c) = a.context {
        cfg.context = c;
    }
    if let Some(h) = a.horizon {
        cfg.horizon = h;
    }
    if let Some(n) = a.points {
        cfg.n_points = n;
    }
    cfg.validate()?;
    let windows = generate_windows(&cfg)?;
    let path = write_windows(&a.out, a.stem.as_deref().unwrap_or(&cfg.clip_prefix), &windows)?;
    info!("wrote {} windows", windows.len());
    println!("{}", path.display());
    Ok(())
}

fn read_stream(path: &Path) -> Result<Vec<FrameRecord>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

pub fn curate(a: CurateArgs) -> Result<()> {
    let mut p: CurateParams = match &a.config {
        Some(path) => read_json(path)?,
        None => CurateParams::default(),
    };
    if let Some(c) = a.context {
        p.context = c;
    }
    if let Some(h) = a.horizon {
        p.horizon = h;
    }
    if p.context == 0 || p.horizon == 0 {
        return Err(CliError::Usage("C and H must be positive".into()));
    }
    p.link.min_len = p.context + p.horizon;
    let frames = read_stream(&a.input)?;
    let (windows, stats) = curate_stream(&frames, &p)?;
    ensure_dir(&a.out)?;
    let path = write_windows(&a.out, "windows", &windows)?;
    write_file(&a.out.join("funnel.csv"), stats.to_csv().as_bytes())?;
    print!("{}", stats.to_csv());
    info!("wrote {}", path.display());
    Ok(())
}

fn run_config(path: Option<&PathBuf>, seed: Option<u64>, steps: Option<usize>, c: Option<usize>, h: Option<usize>) -> Result<RunConfig> {
    let mut rc: RunConfig = match path {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        rc.train.seed = s;
    }
    if let Some(s) = steps {
        rc.train.steps = s;
    }
    if let Some(c) = c {
        rc.train.context = c;
        rc.model.context = c;
    }
    if let Some(h) = h {
        rc.train.horizon = h;
        rc.model.horizon = h;
    }
    rc.model.validate()?;
    rc.train.validate()?;
    Ok(rc)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let rc = run_config(a.config.as_ref(), a.seed, a.steps, a.context, a.horizon)?;
    let windows = load_windows(&a.data)?;
    let out = run_training(&windows, &rc.model, &rc.train)?;
    ensure_dir(&a.out)?;
    out.checkpoint.save(&a.out.join("checkpoint.ofck"))?;
    write_file(&a.out.join("curve.csv"), curve_csv(&out.curve).as_bytes())?;
    if let Some(last) = out.curve.last() {
        println!("final loss {:.6}", last.loss.total);
    }
    Ok(())
}

#[derive(Serialize)]
struct SampleOutput<'a> {
    clip_id: &'a str,
    seed: u64,
    /// Poses as `[x, y, z, a1, a2, a3, b1, b2, b3]` in the anchor camera.
    context: Vec<[f64; 9]>,
    ground_truth: Vec<[f64; 9]>,
    samples: Vec<Vec<[f64; 9]>>,
}

fn rows(poses: &[PoseSE3]) -> Vec<[f64; 9]> {
    poses.iter().map(PoseSE3::to_array9).collect()
}

fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

pub fn sample(a: SampleArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let windows = load_windows(&a.data)?;
    let w = match &a.window {
        Some(id) => windows
            .iter()
            .find(|w| &w.clip_id == id)
            .ok_or_else(|| CliError::Data(format!("no window with clip id {id}")))?,
        None => &windows[0],
    };
    let cfg = &ck.params.config;
    if w.context_len() != cfg.context {
        return Err(CliError::Data(format!("window has C={}, checkpoint expects {}", w.context_len(), cfg.context)));
    }
    let w = &w.trimmed(cfg.context, w.horizon().min(cfg.horizon))?;
    let schedule = build_schedule(cfg.diffusion_steps, cfg.sampling_steps).map_err(ModelError::from)?;
    let samples: Vec<Vec<PoseSE3>> = (0..a.samples as u64)
        .map(|i| predict_trajectory(w, &ck.params, &ck.header.stats, &schedule, foresight_core::rng::derive_seed(a.seed, &[i])))
        .collect::<std::result::Result<_, _>>()?;
    if samples.iter().flatten().any(|p| !p.translation.iter().all(|v| v.is_finite())) {
        return Err(CliError::Numeric("non-finite sampled pose".into()));
    }
    let doc = SampleOutput {
        clip_id: &w.clip_id,
        seed: a.seed,
        context: rows(&w.context_poses),
        ground_truth: rows(&w.future_poses),
        samples: samples.iter().map(|s| rows(s)).collect(),
    };
    ensure_dir(&a.out)?;
    let stem = file_stem(&w.clip_id);
    let json = serde_json::to_string_pretty(&doc).expect("serializable sample");
    write_file(&a.out.join(format!("{stem}.json")), format!("{json}\n").as_bytes())?;
    write_file(&a.out.join(format!("{stem}.svg")), overlay(w, &samples).as_bytes())?;
    println!("{}", a.out.join(format!("{stem}.json")).display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut windows = load_windows(&a.data)?;
    if let Some(h) = a.horizon {
        windows = windows.iter().map(|w| w.trimmed(w.context_len(), h)).collect::<std::result::Result<_, _>>()?;
    }
    let mut rows: Vec<(String, MetricReport)> = Vec::new();
    if let Some(path) = &a.checkpoint {
        let ck = Checkpoint::load(path)?;
        let cfg = ck.params.config.clone();
        let schedule = build_schedule(cfg.diffusion_steps, cfg.sampling_steps).map_err(ModelError::from)?;
        for w in &windows {
            if w.context_len() != cfg.context || w.horizon() > cfg.horizon {
                return Err(CliError::Data(format!(
                    "window {} has C={} H={}, checkpoint supports C={} H≤{}",
                    w.clip_id,
                    w.context_len(),
                    w.horizon(),
                    cfg.context,
                    cfg.horizon
                )));
            }
        }
        let predict = |w: &TrajectoryWindow, s: u64| predict_trajectory(w, &ck.params, &ck.header.stats, &schedule, s);
        let report = if a.samples > 1 {
            evaluate_best_of::<_, CliErrorWrap>(&windows, |w, s| Ok(predict(w, s)?), a.seed, a.samples)
        } else {
            evaluate_batch::<_, CliErrorWrap>(&windows, |w, s| Ok(predict(w, s)?), a.seed)
        }
        .map_err(|e| e.0)?;
        check_finite("model", &report)?;
        rows.push(("model".into(), report));
    }
    let cp = evaluate_batch::<_, MetricsError>(&windows, |w, _| Ok(baseline_constant_pose(w)), a.seed)?;
    let cv = evaluate_batch::<_, MetricsError>(&windows, |w, _| Ok(baseline_constant_velocity(w)), a.seed)?;
    rows.push(("constant_pose".into(), cp));
    rows.push(("constant_velocity".into(), cv));

    let mut csv = format!("predictor,{},n\n", METRIC_NAMES.join(","));
    for (name, r) in &rows {
        let v = r.values();
        csv.push_str(&format!("{name},{},{},{},{},{},{},{}\n", v[0], v[1], v[2], v[3], v[4], v[5], r.n_samples));
    }
    let json: serde_json::Map<String, serde_json::Value> =
        rows.iter().map(|(n, r)| (n.clone(), serde_json::to_value(r).expect("serializable report"))).collect();
    ensure_dir(&a.out)?;
    write_file(&a.out.join("metrics.csv"), csv.as_bytes())?;
    let text = serde_json::to_string_pretty(&json).expect("serializable metrics");
    write_file(&a.out.join("metrics.json"), format!("{text}\n").as_bytes())?;
    print!("{csv}");
    Ok(())
}

/// Carries a `CliError` through the metric drivers' error bound.
struct CliErrorWrap(CliError);

impl From<MetricsError> for CliErrorWrap {
    fn from(e: MetricsError) -> Self {
        CliErrorWrap(e.into())
    }
}

impl From<ModelError> for CliErrorWrap {
    fn from(e: ModelError) -> Self {
        CliErrorWrap(e.into())
    }
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let rc = run_config(a.config.as_ref(), a.seed, a.steps, None, None)?;
    let tr = load_windows(&a.train)?;
    let val = load_windows(&a.val)?;
    let rows = ablation_sweep(&tr, &val, &a.contexts, &a.horizons, &rc.model, &rc.train)?;
    for r in &rows {
        check_finite("ablation", &r.report)?;
    }
    ensure_dir(&a.out)?;
    let csv = ablation_csv(&rows);
    write_file(&a.out.join("ablation.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

#[derive(Serialize)]
struct GradcheckOutput {
    max_rel_err: f64,
    probes: usize,
    skipped_kinks: usize,
    worst_parameter: Option<String>,
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let rc = run_config(a.config.as_ref(), None, None, None, None)?;
    let m = &rc.model;
    let ds = DatasetConfig {
        context: m.context,
        horizon: m.horizon,
        n_points: m.n_points,
        ..DatasetConfig::constant_velocity(1, a.seed)
    };
    let window = generate_window(&ds, 0)?;
    if a.timestep >= m.diffusion_steps {
        return Err(CliError::Usage(format!("timestep must be below {}", m.diffusion_steps)));
    }
    let report = model_gradient_check(m, &window, a.timestep, a.samples, a.seed)?;
    if !report.max_rel_err.is_finite() {
        return Err(CliError::Numeric("non-finite gradient error".into()));
    }
    let names = foresight_core::model::ModelParams::init(m, a.seed)?.names().to_vec();
    let out = GradcheckOutput {
        max_rel_err: report.max_rel_err,
        probes: report.probes.len(),
        skipped_kinks: report.skipped_kinks,
        worst_parameter: report.worst().map(|p| names[p.array].clone()),
    };
    let text = serde_json::to_string_pretty(&out).expect("serializable report");
    if let Some(path) = &a.out {
        write_file(path, format!("{text}\n").as_bytes())?;
    }
    println!("{text}");
    Ok(())
}

pub fn inspect(a: InspectArgs) -> Result<()> {
    let bytes = fs::read(&a.file).map_err(|e| CliError::Data(format!("{}: {e}", a.file.display())))?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let text = describe(&a.file, &bytes)?;
    out.write_all(text.as_bytes()).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(())
}

fn describe(path: &Path, bytes: &[u8]) -> Result<String> {
    let mut s = String::new();
    if bytes.starts_with(CHECKPOINT_MAGIC) {
        let ck = Checkpoint::from_bytes(bytes)?;
        s.push_str(&format!("checkpoint: seed {} step {}\n", ck.header.seed, ck.header.step));
        s.push_str(&format!("model: {}\n", serde_json::to_string(&ck.header.config).expect("serializable config")));
        s.push_str(&format!("token mu: {:?}\ntoken sigma: {:?}\n", ck.header.stats.mu(), ck.header.stats.sigma()));
        s.push_str(&format!("{} arrays, {} scalars\n", ck.params.tensors.len(), ck.params.scalar_count()));
        for (name, t) in ck.params.names().iter().zip(&ck.params.tensors) {
            let rms = (t.data.iter().map(|v| v * v).sum::<f64>() / t.data.len().max(1) as f64).sqrt();
            s.push_str(&format!("  {name:<28} {:>4}x{:<4} rms {rms:.4e}\n", t.rows, t.cols));
        }
        return Ok(s);
    }
    if bytes.starts_with(POINTS_MAGIC) {
        let mut off = 0;
        let mut blocks = 0;
        let mut points = 0;
        while off < bytes.len() {
            let p = foresight_core::io::decode_points(bytes, off)?;
            off += 10 + 24 * p.len();
            blocks += 1;
            points += p.len();
        }
        s.push_str(&format!("point blocks: {blocks}, points: {points}\n"));
        return Ok(s);
    }
    let text = std::str::from_utf8(bytes).map_err(|_| CliError::Data(format!("{}: unrecognized binary file", path.display())))?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    if serde_json::from_str::<WindowRecord>(first).is_ok() {
        let windows = read_windows(path)?;
        s.push_str(&format!("{} windows\n", windows.len()));
        for w in &windows {
            let a = w.anchor_pose().translation;
            let f = w.future_poses.last().map_or(a, |p| p.translation);
            s.push_str(&format!(
                "  {} C={} H={} fps {} points {} label {} anchor [{:.3}, {:.3}, {:.3}] displacement {:.4} m\n",
                w.clip_id,
                w.context_len(),
                w.horizon(),
                w.fps,
                w.anchor_points.len(),
                w.label.as_deref().unwrap_or("-"),
                a.x,
                a.y,
                a.z,
                (f - a).norm()
            ));
        }
        return Ok(s);
    }
    if serde_json::from_str::<FrameRecord>(first).is_ok() {
        let frames = read_stream(path)?;
        let mut clips: Vec<&str> = frames.iter().map(|f| f.clip_id.as_str()).collect();
        clips.dedup();
        let comps: usize = frames.iter().map(|f| f.components.len()).sum();
        s.push_str(&format!("detection stream: {} frames, {} clips, {comps} components\n", frames.len(), clips.len()));
        return Ok(s);
    }
    s.push_str(text);
    Ok(s)
}
