//! Synthetic rigid-object clips: motion primitives, pinhole boxes, anchor
//! point clouds, and whole datasets.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{quantize_points, write_windows, IoError};
use crate::rng::{derive_seed, gaussian, stream, stream_for};
use crate::se3::{PoseSE3, Rotation};
use crate::tokens::{build_window, NormBox, TokenError, TrajectoryWindow, WindowSource};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("object corner at depth {z} is not in front of the camera")]
    BehindCamera { z: f64 },
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    Static,
    Lift,
    Slide,
    ArcRotate,
    Place,
    PickPlace,
}

impl PrimitiveKind {
    pub fn name(self) -> &'static str {
        match self {
            PrimitiveKind::Static => "static",
            PrimitiveKind::Lift => "lift",
            PrimitiveKind::Slide => "slide",
            PrimitiveKind::ArcRotate => "arc_rotate",
            PrimitiveKind::Place => "place",
            PrimitiveKind::PickPlace => "pick_place",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ramp {
    #[default]
    ConstantVelocity,
    CosineRamp,
}

impl Ramp {
    /// Fraction of the motion completed at normalized time `tau ∈ [0, 1]`.
    pub fn progress(self, tau: f64) -> f64 {
        let tau = tau.clamp(0.0, 1.0);
        match self {
            Ramp::ConstantVelocity => tau,
            // Integral of the (1 − cos 2πτ) velocity profile.
            Ramp::CosineRamp => tau - (2.0 * PI * tau).sin() / (2.0 * PI),
        }
    }
}

/// A parameterized rigid motion in world coordinates (camera frame 0,
/// y down, z forward). Motion runs over inter-frame steps
/// `start .. start + duration`; the object rests before and after.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionPrimitive {
    pub kind: PrimitiveKind,
    /// Meters. Lift/place: vertical travel; slide: along `axis`;
    /// arc_rotate: pivot offset; pick_place: both the lift height and the
    /// carry distance.
    pub distance: f64,
    /// Radians. Rotation about `axis` for arc_rotate, about the vertical
    /// otherwise.
    pub angle: f64,
    pub axis: Vector3<f64>,
    pub start: usize,
    pub duration: usize,
    pub ramp: Ramp,
}

impl MotionPrimitive {
    pub fn new(kind: PrimitiveKind, distance: f64, duration: usize) -> Self {
        Self { kind, distance, angle: 0.0, axis: Vector3::x(), start: 0, duration, ramp: Ramp::ConstantVelocity }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.duration == 0 {
            return Err(SynthError::InvalidSpec("primitive duration must be at least 1".into()));
        }
        if !(self.distance >= 0.0) || !self.angle.is_finite() {
            return Err(SynthError::InvalidSpec(format!("distance {} / angle {}", self.distance, self.angle)));
        }
        if !(self.axis.norm() > 1e-12) {
            return Err(SynthError::InvalidSpec("zero motion axis".into()));
        }
        Ok(())
    }

    /// Object-to-world pose after `step` inter-frame steps (frame index).
    pub fn pose_at(&self, start_pose: &PoseSE3, step: usize) -> PoseSE3 {
        let tau = (step as f64 - self.start as f64) / self.duration as f64;
        let axis = self.axis.normalize();
        let up = -Vector3::y();
        let c0 = start_pose.translation;
        let r0 = start_pose.rotation;
        let yaw = |s: f64| Rotation::from_axis_angle(Vector3::y(), s * self.angle).compose(&r0);
        match self.kind {
            PrimitiveKind::Static => *start_pose,
            PrimitiveKind::Lift => {
                let s = self.ramp.progress(tau);
                PoseSE3::new(yaw(s), c0 + up * (s * self.distance))
            }
            PrimitiveKind::Slide => {
                let s = self.ramp.progress(tau);
                PoseSE3::new(yaw(s), c0 + axis * (s * self.distance))
            }
            PrimitiveKind::Place => {
                // Starts `distance` above the rest pose and lowers onto it.
                let s = self.ramp.progress(tau);
                PoseSE3::new(yaw(s), c0 + up * ((1.0 - s) * self.distance))
            }
            PrimitiveKind::ArcRotate => {
                let s = self.ramp.progress(tau);
                let mut perp = axis.cross(&Vector3::y());
                if perp.norm() < 1e-9 {
                    perp = Vector3::x();
                }
                let pivot = c0 + perp.normalize() * self.distance;
                let rot = Rotation::from_axis_angle(axis, s * self.angle);
                PoseSE3::new(rot.compose(&r0), pivot + rot.apply(&(c0 - pivot)))
            }
            PrimitiveKind::PickPlace => {
                let phase = |i: f64| self.ramp.progress(3.0 * tau - i);
                let (lift, carry, lower) = (phase(0.0), phase(1.0), phase(2.0));
                let mut horiz = Vector3::new(axis.x, 0.0, axis.z);
                if horiz.norm() < 1e-9 {
                    horiz = Vector3::x();
                }
                let t = c0 + up * (self.distance * (lift - lower)) + horiz.normalize() * (self.distance * carry);
                PoseSE3::new(yaw(carry), t)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    /// Full box side lengths in meters.
    pub object_extent: [f64; 3],
    /// Object-to-world pose at frame 0.
    pub object_start: PoseSE3,
    /// World `y` of the table plane (y points down).
    pub table_height: f64,
    /// Half-sizes of the sampled table patch along world x and z, centered
    /// below the starting object.
    pub table_extent: [f64; 2],
    pub intrinsics: [f64; 4],
    pub image_size: [usize; 2],
    /// Camera-to-world per frame; `None` means a static camera at the
    /// world origin.
    pub camera_motion: Option<Vec<PoseSE3>>,
    /// Per-axis translation jitter std (m) and rotation jitter std (rad).
    pub jitter: [f64; 2],
}

impl SceneSpec {
    pub fn new(object_extent: [f64; 3], object_start: PoseSE3) -> Self {
        Self {
            object_extent,
            table_height: object_start.translation.y + object_extent[1] / 2.0,
            object_start,
            table_extent: [0.4, 0.4],
            intrinsics: DEFAULT_INTRINSICS,
            image_size: DEFAULT_IMAGE_SIZE,
            camera_motion: None,
            jitter: [0.0, 0.0],
        }
    }

    pub fn validate(&self, frames: usize) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if !(self.object_start.translation.z > 0.0) {
            return bad(format!("object start depth {}", self.object_start.translation.z));
        }
        if self.intrinsics.iter().any(|v| !(*v > 0.0)) {
            return bad(format!("intrinsics {:?}", self.intrinsics));
        }
        if self.object_extent.iter().any(|v| !(*v > 0.0)) || self.image_size.contains(&0) {
            return bad("object extent and image size must be positive".into());
        }
        if self.jitter.iter().any(|v| !(*v >= 0.0)) {
            return bad(format!("jitter {:?}", self.jitter));
        }
        if let Some(cams) = &self.camera_motion {
            if cams.len() < frames {
                return bad(format!("{} camera poses for {frames} frames", cams.len()));
            }
        }
        Ok(())
    }

    pub fn camera(&self, k: usize) -> PoseSE3 {
        self.camera_motion.as_ref().map_or_else(PoseSE3::identity, |c| c[k])
    }
}

pub const DEFAULT_INTRINSICS: [f64; 4] = [500.0, 500.0, 320.0, 240.0];
pub const DEFAULT_IMAGE_SIZE: [usize; 2] = [640, 480];
pub const DEFAULT_FPS: f64 = 6.0;
/// Share of anchor points drawn from the object surface.
pub const OBJECT_POINT_FRACTION: f64 = 0.6;

#[derive(Debug, Clone)]
pub struct SynthTrajectory {
    /// Observed (jittered) object pose in each frame's camera.
    pub object_poses: Vec<PoseSE3>,
    pub camera_to_world: Vec<PoseSE3>,
    /// Noise-free object-to-world poses.
    pub world_poses: Vec<PoseSE3>,
}

fn small_rotation<R: Rng>(rng: &mut R, std: f64) -> Rotation {
    let w = Vector3::new(gaussian(rng), gaussian(rng), gaussian(rng)) * std;
    let angle = w.norm();
    if angle == 0.0 {
        Rotation::identity()
    } else {
        Rotation::from_axis_angle(w, angle)
    }
}

/// Produces `C + H` frames. Jitter for frame `k` is drawn from a stream
/// keyed by `(seed, k)`, so two calls sharing a seed share their noise.
pub fn generate_trajectory(
    primitive: &MotionPrimitive,
    scene: &SceneSpec,
    c: usize,
    h: usize,
    seed: u64,
) -> Result<SynthTrajectory, SynthError> {
    primitive.validate()?;
    let frames = c + h;
    scene.validate(frames)?;
    let mut out = SynthTrajectory { object_poses: vec![], camera_to_world: vec![], world_poses: vec![] };
    for k in 0..frames {
        let world = primitive.pose_at(&scene.object_start, k);
        let cam = scene.camera(k);
        let mut obs = cam.inverse().compose(&world);
        let [jt, jr] = scene.jitter;
        if jt > 0.0 || jr > 0.0 {
            let mut rng = stream_for(seed, &[k as u64]);
            let dt = Vector3::new(gaussian(&mut rng), gaussian(&mut rng), gaussian(&mut rng)) * jt;
            let dr = small_rotation(&mut rng, jr);
            obs = PoseSE3::new(dr.compose(&obs.rotation), obs.translation + dt);
        }
        out.world_poses.push(world);
        out.camera_to_world.push(cam);
        out.object_poses.push(obs);
    }
    Ok(out)
}

fn box_corners(extent: &[f64; 3]) -> impl Iterator<Item = Vector3<f64>> + '_ {
    (0..8).map(move |i| {
        let s = |b: usize| if i >> b & 1 == 1 { 0.5 } else { -0.5 };
        Vector3::new(s(0) * extent[0], s(1) * extent[1], s(2) * extent[2])
    })
}

/// Normalized `[cx, cy, w, h]` of the projected bounding box, clipped to
/// the image.
pub fn project_box(
    pose: &PoseSE3,
    extent: &[f64; 3],
    intrinsics: &[f64; 4],
    image_size: [usize; 2],
) -> Result<NormBox, SynthError> {
    let [fx, fy, cx, cy] = *intrinsics;
    let (w, h) = (image_size[0] as f64, image_size[1] as f64);
    let (mut u0, mut v0, mut u1, mut v1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for corner in box_corners(extent) {
        let p = pose.transform_point(&corner);
        if !(p.z > 0.0) {
            return Err(SynthError::BehindCamera { z: p.z });
        }
        let u = fx * p.x / p.z + cx;
        let v = fy * p.y / p.z + cy;
        u0 = u0.min(u);
        u1 = u1.max(u);
        v0 = v0.min(v);
        v1 = v1.max(v);
    }
    let (a, b) = ((u0 / w).clamp(0.0, 1.0), (u1 / w).clamp(0.0, 1.0));
    let (c, d) = ((v0 / h).clamp(0.0, 1.0), (v1 / h).clamp(0.0, 1.0));
    Ok([(a + b) / 2.0, (c + d) / 2.0, b - a, d - c])
}

/// `n` points: the first `round(0.6 n)` on the object's box faces (area
/// weighted), the rest on the table patch. Each row is anchor-camera xyz
/// followed by coordinates in the anchor object frame.
pub fn sample_pointcloud(
    scene: &SceneSpec,
    anchor_pose: &PoseSE3,
    anchor_camera: &PoseSE3,
    n: usize,
    seed: u64,
) -> Vec<[f64; 6]> {
    let mut rng = stream(seed);
    let n_obj = (OBJECT_POINT_FRACTION * n as f64).round() as usize;
    let inv_anchor = anchor_pose.inverse();
    let inv_cam = anchor_camera.inverse();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n_obj {
        out.push(box_surface_point(&mut rng, &scene.object_extent, anchor_pose));
    }
    for _ in n_obj..n {
        let x0 = scene.object_start.translation;
        let wpt = Vector3::new(
            x0.x + rng.random_range(-scene.table_extent[0]..=scene.table_extent[0]),
            scene.table_height,
            x0.z + rng.random_range(-scene.table_extent[1]..=scene.table_extent[1]),
        );
        let cam = inv_cam.transform_point(&wpt);
        let obj = inv_anchor.transform_point(&cam);
        out.push([cam.x, cam.y, cam.z, obj.x, obj.y, obj.z]);
    }
    out
}

/// One area-weighted point on the faces of a box of full side lengths
/// `extent` placed at `pose`, as camera xyz then object-frame xyz.
pub fn box_surface_point<R: Rng>(rng: &mut R, extent: &[f64; 3], pose: &PoseSE3) -> [f64; 6] {
    let e = extent;
    let areas = [e[1] * e[2], e[0] * e[2], e[0] * e[1]];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    let mut axis = 2;
    for (j, a) in areas.iter().enumerate() {
        if pick < *a {
            axis = j;
            break;
        }
        pick -= a;
    }
    let mut o = Vector3::zeros();
    for j in 0..3 {
        o[j] = if j == axis {
            if rng.random_bool(0.5) { e[j] / 2.0 } else { -e[j] / 2.0 }
        } else {
            rng.random_range(-e[j] / 2.0..=e[j] / 2.0)
        };
    }
    let cam = pose.transform_point(&o);
    [cam.x, cam.y, cam.z, o.x, o.y, o.z]
}

/// When a primitive runs within the window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Timing {
    /// Every inter-frame step of the window.
    Full,
    /// The `H` steps following the anchor frame.
    Future,
    /// Random start and duration inside the window.
    #[default]
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixEntry {
    pub primitive: PrimitiveKind,
    #[serde(default = "one")]
    pub weight: f64,
    /// Uniform range, meters.
    #[serde(default = "default_distance")]
    pub distance: [f64; 2],
    /// Uniform range, radians.
    #[serde(default)]
    pub angle: [f64; 2],
    /// Fixed motion axis; a random unit vector when absent.
    #[serde(default)]
    pub axis: Option<[f64; 3]>,
    #[serde(default)]
    pub ramp: Ramp,
    #[serde(default)]
    pub timing: Timing,
}

fn one() -> f64 {
    1.0
}

fn default_distance() -> [f64; 2] {
    [0.1, 0.25]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgoMotion {
    /// Camera speed range, meters per frame.
    pub speed: [f64; 2],
    /// Camera yaw-rate range, radians per frame.
    pub yaw_rate: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub count: usize,
    pub context: usize,
    pub horizon: usize,
    pub fps: f64,
    pub n_points: usize,
    pub mix: Vec<MixEntry>,
    /// Per-axis translation jitter std (m).
    pub jitter_trans: f64,
    /// Rotation jitter std (rad).
    pub jitter_rot: f64,
    pub ego_motion: Option<EgoMotion>,
    /// Pairs of windows sharing one static context, one continuing with a
    /// lift and one with a slide along +x.
    pub bimodal: bool,
    pub seed: u64,
    pub clip_prefix: String,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 100,
            context: 3,
            horizon: 8,
            fps: DEFAULT_FPS,
            n_points: 512,
            mix: vec![
                MixEntry::new(PrimitiveKind::Static),
                MixEntry::new(PrimitiveKind::Lift),
                MixEntry::new(PrimitiveKind::Slide),
                MixEntry { angle: [0.3, 1.2], ..MixEntry::new(PrimitiveKind::ArcRotate) },
                MixEntry::new(PrimitiveKind::Place),
                MixEntry { angle: [-0.8, 0.8], ..MixEntry::new(PrimitiveKind::PickPlace) },
            ],
            jitter_trans: 0.002,
            jitter_rot: 0.01,
            ego_motion: None,
            bimodal: false,
            seed: 0,
            clip_prefix: "synth".into(),
        }
    }
}

impl MixEntry {
    pub fn new(primitive: PrimitiveKind) -> Self {
        Self {
            primitive,
            weight: 1.0,
            distance: default_distance(),
            angle: [0.0, 0.0],
            axis: None,
            ramp: Ramp::ConstantVelocity,
            timing: Timing::Random,
        }
    }
}

/// Bimodal distances, meters.
pub const BIMODAL_DISTANCE: [f64; 2] = [0.15, 0.25];

impl DatasetConfig {
    /// Toy set where every object slides along a random direction at
    /// constant velocity for the whole window.
    pub fn constant_velocity(count: usize, seed: u64) -> Self {
        Self {
            count,
            seed,
            mix: vec![MixEntry { distance: [0.1, 0.3], timing: Timing::Full, ..MixEntry::new(PrimitiveKind::Slide) }],
            clip_prefix: "cv".into(),
            ..Self::default()
        }
    }

    pub fn bimodal(count: usize, seed: u64) -> Self {
        Self { count, seed, bimodal: true, mix: vec![], clip_prefix: "bimodal".into(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.into()));
        if self.context == 0 || self.horizon == 0 || self.n_points == 0 {
            return bad("context, horizon and n_points must be positive");
        }
        if !(self.fps > 0.0) {
            return bad("fps must be positive");
        }
        if !self.bimodal {
            if self.mix.is_empty() || self.mix.iter().map(|m| m.weight).sum::<f64>() <= 0.0 {
                return bad("primitive mix needs positive total weight");
            }
            for m in &self.mix {
                if !(m.weight >= 0.0) || !(m.distance[0] >= 0.0 && m.distance[0] <= m.distance[1]) {
                    return bad("mix weights and distance ranges must be non-negative and ordered");
                }
                if m.angle[0] > m.angle[1] {
                    return bad("angle range must be ordered");
                }
            }
        }
        if self.jitter_trans < 0.0 || self.jitter_rot < 0.0 {
            return bad("jitter must be non-negative");
        }
        Ok(())
    }
}

fn range<R: Rng>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[1] > r[0] { rng.random_range(r[0]..r[1]) } else { r[0] }
}

fn random_unit<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(gaussian(rng), gaussian(rng), gaussian(rng));
        if v.norm() > 1e-6 {
            return v.normalize();
        }
    }
}

fn random_scene<R: Rng>(rng: &mut R, cfg: &DatasetConfig) -> SceneSpec {
    let extent = [rng.random_range(0.05..0.12), rng.random_range(0.05..0.12), rng.random_range(0.05..0.12)];
    let table = 0.25;
    let start = PoseSE3::new(
        Rotation::from_axis_angle(Vector3::y(), rng.random_range(-PI..PI)),
        Vector3::new(rng.random_range(-0.15..0.15), table - extent[1] / 2.0, rng.random_range(0.7..1.1)),
    );
    let mut scene = SceneSpec::new(extent, start);
    scene.jitter = [cfg.jitter_trans, cfg.jitter_rot];
    scene
}

fn ego_cameras<R: Rng>(rng: &mut R, ego: &EgoMotion, frames: usize) -> Vec<PoseSE3> {
    let dir = random_unit(rng);
    let speed = range(rng, ego.speed);
    let yaw = range(rng, ego.yaw_rate) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    (0..frames)
        .map(|k| {
            PoseSE3::new(Rotation::from_axis_angle(Vector3::y(), yaw * k as f64), dir * (speed * k as f64))
        })
        .collect()
}

fn pick_entry<'a, R: Rng>(rng: &mut R, mix: &'a [MixEntry]) -> &'a MixEntry {
    let total: f64 = mix.iter().map(|m| m.weight).sum();
    let mut x = rng.random_range(0.0..total);
    for m in mix {
        if x < m.weight {
            return m;
        }
        x -= m.weight;
    }
    mix.last().unwrap()
}

fn primitive_for<R: Rng>(rng: &mut R, m: &MixEntry, c: usize, h: usize) -> MotionPrimitive {
    let steps = c + h - 1;
    let (start, duration) = match m.timing {
        Timing::Full => (0, steps),
        Timing::Future => (c - 1, h),
        Timing::Random => {
            let start = rng.random_range(0..steps);
            (start, rng.random_range(1..=steps - start))
        }
    };
    let axis = match m.axis {
        Some(a) => Vector3::from(a),
        None => random_unit(rng),
    };
    MotionPrimitive {
        kind: m.primitive,
        distance: range(rng, m.distance),
        angle: range(rng, m.angle),
        axis,
        start,
        duration,
        ramp: m.ramp,
    }
}

fn assemble(
    cfg: &DatasetConfig,
    clip_id: &str,
    scene: &SceneSpec,
    prim: &MotionPrimitive,
    noise_seed: u64,
    point_seed: u64,
) -> Result<TrajectoryWindow, SynthError> {
    let (c, h) = (cfg.context, cfg.horizon);
    let traj = generate_trajectory(prim, scene, c, h, noise_seed)?;
    let boxes = traj
        .object_poses
        .iter()
        .map(|p| project_box(p, &scene.object_extent, &scene.intrinsics, scene.image_size))
        .collect::<Result<Vec<_>, _>>()?;
    let anchor = c - 1;
    let mut points = sample_pointcloud(
        scene,
        &traj.object_poses[anchor],
        &traj.camera_to_world[anchor],
        cfg.n_points,
        point_seed,
    );
    quantize_points(&mut points);
    let src = WindowSource {
        clip_id,
        fps: cfg.fps,
        intrinsics: scene.intrinsics,
        object_poses: &traj.object_poses,
        camera_to_world: &traj.camera_to_world,
        boxes: &boxes,
    };
    let mut w = build_window(&src, 0, c, h, points)?;
    w.label = Some(prim.kind.name().to_string());
    w.validate()?;
    Ok(w)
}

const MAX_ATTEMPTS: u64 = 64;

/// Window `index` of the dataset; a pure function of `(cfg, index)`.
/// Draws that produce an invalid window (object behind the camera) are
/// redrawn with the next attempt seed.
pub fn generate_window(cfg: &DatasetConfig, index: usize) -> Result<TrajectoryWindow, SynthError> {
    let (c, h) = (cfg.context, cfg.horizon);
    let mut last = None;
    for attempt in 0..MAX_ATTEMPTS {
        let result = if cfg.bimodal {
            let pair = (index / 2) as u64;
            let lift = index % 2 == 0;
            let mut rng = stream_for(cfg.seed, &[pair, attempt]);
            let mut scene = random_scene(&mut rng, cfg);
            if let Some(ego) = &cfg.ego_motion {
                scene.camera_motion = Some(ego_cameras(&mut rng, ego, c + h));
            }
            let distance = range(&mut rng, BIMODAL_DISTANCE);
            let noise_seed = derive_seed(cfg.seed, &[pair, attempt, 1]);
            let point_seed = derive_seed(cfg.seed, &[pair, attempt, 2]);
            let kind = if lift { PrimitiveKind::Lift } else { PrimitiveKind::Slide };
            let prim = MotionPrimitive { start: c - 1, ramp: Ramp::CosineRamp, ..MotionPrimitive::new(kind, distance, h) };
            let id = format!("{}-{:06}-{}", cfg.clip_prefix, index, kind.name());
            assemble(cfg, &id, &scene, &prim, noise_seed, point_seed)
        } else {
            let mut rng = stream_for(cfg.seed, &[index as u64, attempt]);
            let mut scene = random_scene(&mut rng, cfg);
            if let Some(ego) = &cfg.ego_motion {
                scene.camera_motion = Some(ego_cameras(&mut rng, ego, c + h));
            }
            let entry = pick_entry(&mut rng, &cfg.mix);
            let prim = primitive_for(&mut rng, entry, c, h);
            let id = format!("{}-{:06}", cfg.clip_prefix, index);
            let noise_seed = derive_seed(cfg.seed, &[index as u64, attempt, 1]);
            let point_seed = derive_seed(cfg.seed, &[index as u64, attempt, 2]);
            assemble(cfg, &id, &scene, &prim, noise_seed, point_seed)
        };
        match result {
            Ok(w) => return Ok(w),
            Err(e @ (SynthError::BehindCamera { .. } | SynthError::Token(_))) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap())
}

pub fn generate_windows(cfg: &DatasetConfig) -> Result<Vec<TrajectoryWindow>, SynthError> {
    cfg.validate()?;
    (0..cfg.count).into_par_iter().map(|i| generate_window(cfg, i)).collect()
}

/// Writes `<stem>.jsonl` and its point sidecar into `dir`.
pub fn generate_dataset(cfg: &DatasetConfig, dir: &Path, stem: &str) -> Result<PathBuf, SynthError> {
    let windows = generate_windows(cfg)?;
    Ok(write_windows(dir, stem, &windows)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints() {
        for r in [Ramp::ConstantVelocity, Ramp::CosineRamp] {
            assert_eq!(r.progress(0.0), 0.0);
            assert!((r.progress(1.0) - 1.0).abs() < 1e-15);
            assert_eq!(r.progress(2.0), r.progress(1.0));
        }
    }

    #[test]
    fn corners_cover_the_box() {
        let c: Vec<_> = box_corners(&[2.0, 4.0, 6.0]).collect();
        assert_eq!(c.len(), 8);
        assert!(c.iter().all(|v| v.x.abs() == 1.0 && v.y.abs() == 2.0 && v.z.abs() == 3.0));
    }
}
