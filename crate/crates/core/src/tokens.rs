//! Depth-normalized pose tokens, frozen channel standardization, and the
//! anchor-frame trajectory window.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::se3::{reexpress_in_anchor, rot6d_decode, rot6d_encode, PoseSE3, Rot6D, Se3Error};

/// Smallest depth accepted for tokenization, in meters.
pub const Z_MIN_DATA: f64 = 1e-4;
/// Lower bound applied to every fitted channel deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Batches observed before statistics may be frozen.
pub const DEFAULT_WARMUP_BATCHES: usize = 50;

pub const TOKEN_DIM: usize = 9;

pub type TokenArray = [f64; TOKEN_DIM];
/// Normalized `[cx, cy, w, h]` box.
pub type NormBox = [f64; 4];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TokenError {
    #[error("pose depth {z} is below the tokenization floor")]
    NonPositiveDepth { z: f64 },
    #[error(transparent)]
    Rotation(#[from] Se3Error),
    #[error("standardization statistics are already frozen")]
    AlreadyFrozen,
    #[error("standardization statistics are not frozen")]
    UnfrozenStats,
    #[error("need {needed} warmup batches before freezing, saw {got}")]
    TooFewBatches { needed: usize, got: usize },
    #[error("window needs {needed} frames from offset {start}, clip has {got}")]
    NotEnoughFrames { needed: usize, start: usize, got: usize },
    #[error("invalid window: {0}")]
    InvalidWindow(String),
}

/// `[u, v, s, a1, a2, a3, b1, b2, b3]` with `u = x/z`, `v = y/z`, `s = ln z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseToken9 {
    pub u: f64,
    pub v: f64,
    pub s: f64,
    pub r6: Rot6D,
}

impl PoseToken9 {
    pub fn to_array(&self) -> TokenArray {
        let r = self.r6.to_array();
        [self.u, self.v, self.s, r[0], r[1], r[2], r[3], r[4], r[5]]
    }

    pub fn from_array(a: &TokenArray) -> Self {
        Self { u: a[0], v: a[1], s: a[2], r6: Rot6D::from_slice(&a[3..9]) }
    }
}

pub fn depth_normalize(p: &PoseSE3) -> Result<PoseToken9, TokenError> {
    let t = &p.translation;
    if !(t.z >= Z_MIN_DATA) || !t.x.is_finite() || !t.y.is_finite() || !t.z.is_finite() {
        return Err(TokenError::NonPositiveDepth { z: t.z });
    }
    Ok(PoseToken9 { u: t.x / t.z, v: t.y / t.z, s: t.z.ln(), r6: rot6d_encode(&p.rotation) })
}

pub fn depth_denormalize(y: &PoseToken9) -> Result<PoseSE3, TokenError> {
    let z = y.s.exp();
    let rotation = rot6d_decode(&y.r6)?;
    Ok(PoseSE3::new(rotation, Vector3::new(y.u * z, y.v * z, z)))
}

/// Channel-wise mean and population deviation. Only obtainable frozen,
/// through [`StatsAccumulator::freeze`] or deserialization of frozen stats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    mu: TokenArray,
    sigma: TokenArray,
    frozen: bool,
}

impl TokenStats {
    /// Identity statistics (`μ = 0`, `σ = 1`).
    pub fn identity() -> Self {
        Self { mu: [0.0; TOKEN_DIM], sigma: [1.0; TOKEN_DIM], frozen: true }
    }

    /// Frozen statistics from explicit values; `sigma` is floored.
    pub fn from_parts(mu: TokenArray, sigma: TokenArray) -> Self {
        Self { mu, sigma: sigma.map(|s| s.max(SIGMA_FLOOR)), frozen: true }
    }

    pub fn mu(&self) -> &TokenArray {
        &self.mu
    }

    pub fn sigma(&self) -> &TokenArray {
        &self.sigma
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }
}

/// Streaming per-channel moments over warmup batches.
#[derive(Debug, Clone, Default)]
pub struct StatsAccumulator {
    count: u64,
    mean: TokenArray,
    m2: TokenArray,
    batches: usize,
    frozen: bool,
}

impl StatsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn batches_seen(&self) -> usize {
        self.batches
    }

    pub fn push_batch(&mut self, tokens: &[TokenArray]) -> Result<(), TokenError> {
        if self.frozen {
            return Err(TokenError::AlreadyFrozen);
        }
        for tok in tokens {
            self.count += 1;
            let n = self.count as f64;
            for c in 0..TOKEN_DIM {
                let d = tok[c] - self.mean[c];
                self.mean[c] += d / n;
                self.m2[c] += d * (tok[c] - self.mean[c]);
            }
        }
        self.batches += 1;
        Ok(())
    }

    pub fn freeze(&mut self, min_batches: usize) -> Result<TokenStats, TokenError> {
        if self.frozen {
            return Err(TokenError::AlreadyFrozen);
        }
        if self.batches < min_batches || self.count == 0 {
            return Err(TokenError::TooFewBatches { needed: min_batches.max(1), got: self.batches });
        }
        self.frozen = true;
        let n = self.count as f64;
        let sigma = std::array::from_fn(|c| (self.m2[c] / n).sqrt().max(SIGMA_FLOOR));
        Ok(TokenStats { mu: self.mean, sigma, frozen: true })
    }
}

/// Fits frozen statistics over all tokens of the warmup batches.
pub fn fit_standardization(batches: &[Vec<TokenArray>], min_batches: usize) -> Result<TokenStats, TokenError> {
    let mut acc = StatsAccumulator::new();
    for b in batches {
        acc.push_batch(b)?;
    }
    acc.freeze(min_batches)
}

pub fn standardize(tokens: &[TokenArray], stats: &TokenStats) -> Result<Vec<TokenArray>, TokenError> {
    if !stats.frozen {
        return Err(TokenError::UnfrozenStats);
    }
    Ok(tokens
        .iter()
        .map(|t| std::array::from_fn(|c| (t[c] - stats.mu[c]) / stats.sigma[c]))
        .collect())
}

pub fn destandardize(tokens: &[TokenArray], stats: &TokenStats) -> Result<Vec<TokenArray>, TokenError> {
    if !stats.frozen {
        return Err(TokenError::UnfrozenStats);
    }
    Ok(tokens
        .iter()
        .map(|t| std::array::from_fn(|c| t[c] * stats.sigma[c] + stats.mu[c]))
        .collect())
}

pub fn tokenize(poses: &[PoseSE3]) -> Result<Vec<TokenArray>, TokenError> {
    poses.iter().map(|p| depth_normalize(p).map(|t| t.to_array())).collect()
}

/// One sample: `C` observed frames and `H` future frames, every pose in
/// the camera frame of the last observed (anchor) frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryWindow {
    pub clip_id: String,
    pub fps: f64,
    /// `[fx, fy, cx, cy]` in pixels.
    pub intrinsics: [f64; 4],
    pub context_poses: Vec<PoseSE3>,
    pub context_boxes: Vec<NormBox>,
    pub future_poses: Vec<PoseSE3>,
    /// Camera-frame xyz followed by anchor-object-frame xyz, meters.
    pub anchor_points: Vec<[f64; 6]>,
    /// Generator metadata (primitive name); absent for curated windows.
    pub label: Option<String>,
}

impl TrajectoryWindow {
    pub fn context_len(&self) -> usize {
        self.context_poses.len()
    }

    pub fn horizon(&self) -> usize {
        self.future_poses.len()
    }

    pub fn anchor_pose(&self) -> &PoseSE3 {
        self.context_poses.last().expect("window without context")
    }

    pub fn validate(&self) -> Result<(), TokenError> {
        let bad = |m: String| Err(TokenError::InvalidWindow(m));
        if self.context_poses.is_empty() || self.future_poses.is_empty() {
            return bad("empty context or horizon".into());
        }
        if self.context_boxes.len() != self.context_poses.len() {
            return bad(format!(
                "{} boxes for {} context poses",
                self.context_boxes.len(),
                self.context_poses.len()
            ));
        }
        if self.anchor_points.is_empty() {
            return bad("anchor point cloud is empty".into());
        }
        for p in self.context_poses.iter().chain(&self.future_poses) {
            if !(p.translation.z > 0.0) {
                return Err(TokenError::NonPositiveDepth { z: p.translation.z });
            }
        }
        if self.context_boxes.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("box outside the unit square".into());
        }
        Ok(())
    }

    /// Keeps the last `c` observed frames and the first `h` future frames.
    /// The anchor (last observed frame) is unchanged.
    pub fn trimmed(&self, c: usize, h: usize) -> Result<TrajectoryWindow, TokenError> {
        if c == 0 || h == 0 || c > self.context_len() || h > self.horizon() {
            return Err(TokenError::InvalidWindow(format!(
                "cannot trim C={} H={} to C={c} H={h}",
                self.context_len(),
                self.horizon()
            )));
        }
        let skip = self.context_len() - c;
        Ok(TrajectoryWindow {
            context_poses: self.context_poses[skip..].to_vec(),
            context_boxes: self.context_boxes[skip..].to_vec(),
            future_poses: self.future_poses[..h].to_vec(),
            ..self.clone()
        })
    }
}

/// Per-frame observations of one object over a clip.
#[derive(Debug, Clone)]
pub struct WindowSource<'a> {
    pub clip_id: &'a str,
    pub fps: f64,
    pub intrinsics: [f64; 4],
    /// Object pose in each frame's own camera coordinates.
    pub object_poses: &'a [PoseSE3],
    /// Camera-to-world transform of each frame.
    pub camera_to_world: &'a [PoseSE3],
    pub boxes: &'a [NormBox],
}

/// Builds the window covering frames `start .. start + c + h`. The anchor is
/// frame `start + c − 1`; `anchor_points` must already be expressed in that
/// frame's camera.
pub fn build_window(
    src: &WindowSource<'_>,
    start: usize,
    c: usize,
    h: usize,
    anchor_points: Vec<[f64; 6]>,
) -> Result<TrajectoryWindow, TokenError> {
    let needed = start + c + h;
    let got = src.object_poses.len().min(src.camera_to_world.len()).min(src.boxes.len());
    if c == 0 || h == 0 || needed > got {
        return Err(TokenError::NotEnoughFrames { needed: c + h, start, got });
    }
    let anchor = src.camera_to_world[start + c - 1];
    let poses: Vec<PoseSE3> = (start..needed)
        .map(|i| reexpress_in_anchor(&src.object_poses[i], &src.camera_to_world[i], &anchor))
        .collect();
    for p in &poses {
        if !(p.translation.z >= Z_MIN_DATA) {
            return Err(TokenError::NonPositiveDepth { z: p.translation.z });
        }
    }
    Ok(TrajectoryWindow {
        clip_id: src.clip_id.to_string(),
        fps: src.fps,
        intrinsics: src.intrinsics,
        context_poses: poses[..c].to_vec(),
        context_boxes: src.boxes[start..start + c].to_vec(),
        future_poses: poses[c..].to_vec(),
        anchor_points,
        label: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::test_util::random_pose;
    use crate::se3::{geodesic_angle, Rotation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalize_examples() {
        let id = PoseSE3::from_translation(Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(depth_normalize(&id).unwrap().to_array(), [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let p = PoseSE3::from_translation(Vector3::new(0.5, -0.25, 2.0));
        let t = depth_normalize(&p).unwrap();
        assert_eq!((t.u, t.v), (0.25, -0.125));
        assert!((t.s - 0.693147).abs() < 1e-6);
        let behind = PoseSE3::from_translation(Vector3::new(0.0, 0.0, -1.0));
        assert!(matches!(depth_normalize(&behind), Err(TokenError::NonPositiveDepth { .. })));
        let tiny = PoseSE3::from_translation(Vector3::new(0.0, 0.0, 5e-5));
        assert!(depth_normalize(&tiny).is_err());
    }

    #[test]
    fn denormalize_examples() {
        let p = depth_denormalize(&PoseToken9::from_array(&[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0])).unwrap();
        assert_eq!(p.translation, Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(*p.rotation.matrix(), *Rotation::identity().matrix());
        let q = depth_denormalize(&PoseToken9::from_array(&[0.0, 0.0, -2.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0])).unwrap();
        assert!((q.translation.z - 0.135335).abs() < 1e-6);
        let bad = PoseToken9::from_array(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!(matches!(depth_denormalize(&bad), Err(TokenError::Rotation(_))));
    }

    #[test]
    fn normalize_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let p = random_pose(&mut rng);
            let back = depth_denormalize(&depth_normalize(&p).unwrap()).unwrap();
            assert!((back.translation - p.translation).abs().max() < 1e-9);
            assert!((back.rotation.matrix() - p.rotation.matrix()).abs().max() < 1e-9);
        }
        // Token side: arbitrary token with a valid rotation part.
        for _ in 0..200 {
            let p = random_pose(&mut rng);
            let mut tok = depth_normalize(&p).unwrap().to_array();
            tok[0] = rng.random_range(-2.0..2.0);
            tok[1] = rng.random_range(-2.0..2.0);
            tok[2] = rng.random_range(-3.0..2.0);
            let again = depth_normalize(&depth_denormalize(&PoseToken9::from_array(&tok)).unwrap()).unwrap();
            for (a, b) in again.to_array().iter().zip(tok) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn standardization_fit() {
        let tok = [0.3, -0.1, 0.5, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let stats = fit_standardization(&[vec![tok; 4], vec![tok; 2]], 2).unwrap();
        assert_eq!(*stats.mu(), tok);
        assert_eq!(*stats.sigma(), [SIGMA_FLOOR; 9]);

        let stats = fit_standardization(&[vec![[0.0; 9]], vec![[2.0; 9]]], 2).unwrap();
        assert_eq!(*stats.mu(), [1.0; 9]);
        assert_eq!(*stats.sigma(), [1.0; 9]);

        assert_eq!(
            fit_standardization(&[vec![tok]], DEFAULT_WARMUP_BATCHES),
            Err(TokenError::TooFewBatches { needed: 50, got: 1 })
        );
    }

    #[test]
    fn accumulator_refuses_after_freeze() {
        let mut acc = StatsAccumulator::new();
        acc.push_batch(&[[1.0; 9]]).unwrap();
        let stats = acc.freeze(1).unwrap();
        assert!(stats.is_frozen());
        assert_eq!(acc.push_batch(&[[1.0; 9]]), Err(TokenError::AlreadyFrozen));
        assert_eq!(acc.freeze(1), Err(TokenError::AlreadyFrozen));
    }

    #[test]
    fn standardize_cases() {
        let y = [[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]];
        assert_eq!(standardize(&y, &TokenStats::identity()).unwrap(), y.to_vec());
        let stats = TokenStats::from_parts(y[0], [2.0; 9]);
        assert_eq!(standardize(&y, &stats).unwrap(), vec![[0.0; 9]]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let mu = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
            let sigma = std::array::from_fn(|_| rng.random_range(1e-3..4.0));
            let stats = TokenStats::from_parts(mu, sigma);
            let toks: Vec<TokenArray> = (0..8).map(|_| std::array::from_fn(|_| rng.random_range(-5.0..5.0))).collect();
            let back = destandardize(&standardize(&toks, &stats).unwrap(), &stats).unwrap();
            for (a, b) in back.iter().flatten().zip(toks.iter().flatten()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn unfrozen_stats_are_rejected() {
        let stats = TokenStats { mu: [0.0; 9], sigma: [1.0; 9], frozen: false };
        assert_eq!(standardize(&[[0.0; 9]], &stats), Err(TokenError::UnfrozenStats));
        assert_eq!(destandardize(&[[0.0; 9]], &stats), Err(TokenError::UnfrozenStats));
    }

    fn source_fixture(cams: &[PoseSE3], obj_world: &PoseSE3) -> (Vec<PoseSE3>, Vec<NormBox>) {
        let poses = cams.iter().map(|c| c.inverse().compose(obj_world)).collect();
        (poses, vec![[0.5, 0.5, 0.1, 0.1]; cams.len()])
    }

    #[test]
    fn window_static_camera_static_object() {
        let cams = vec![PoseSE3::identity(); 11];
        let obj = PoseSE3::from_translation(Vector3::new(0.1, 0.0, 1.5));
        let (poses, boxes) = source_fixture(&cams, &obj);
        let src = WindowSource {
            clip_id: "c",
            fps: 6.0,
            intrinsics: [500.0, 500.0, 320.0, 240.0],
            object_poses: &poses,
            camera_to_world: &cams,
            boxes: &boxes,
        };
        let w = build_window(&src, 0, 3, 8, vec![[0.0; 6]]).unwrap();
        assert_eq!(w.context_len(), 3);
        assert_eq!(w.horizon(), 8);
        for p in w.context_poses.iter().chain(&w.future_poses) {
            assert_eq!(*p, obj);
        }
        w.validate().unwrap();
    }

    #[test]
    fn window_cancels_ego_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cams: Vec<PoseSE3> = (0..14)
            .map(|k| {
                let yaw = Rotation::from_axis_angle(Vector3::y(), 0.02 * k as f64);
                PoseSE3::new(yaw, Vector3::new(0.03 * k as f64, -0.01 * k as f64, rng.random_range(-0.05..0.05)))
            })
            .collect();
        let obj = PoseSE3::new(Rotation::from_axis_angle(Vector3::x(), 0.4), Vector3::new(0.2, 0.1, 1.2));
        let (poses, boxes) = source_fixture(&cams, &obj);
        let src = WindowSource {
            clip_id: "ego",
            fps: 6.0,
            intrinsics: [500.0, 500.0, 320.0, 240.0],
            object_poses: &poses,
            camera_to_world: &cams,
            boxes: &boxes,
        };
        let w = build_window(&src, 2, 3, 8, vec![[0.0; 6]]).unwrap();
        let all: Vec<_> = w.context_poses.iter().chain(&w.future_poses).collect();
        for p in &all {
            assert!((p.translation - all[0].translation).abs().max() < 1e-9);
            assert!(geodesic_angle(&p.rotation, &all[0].rotation) < 1e-9);
        }
        assert!(matches!(build_window(&src, 4, 3, 8, vec![]), Err(TokenError::NotEnoughFrames { .. })));
    }

    #[test]
    fn trimming_keeps_anchor() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = TrajectoryWindow {
            clip_id: "x".into(),
            fps: 6.0,
            intrinsics: [1.0, 1.0, 0.5, 0.5],
            context_poses: (0..10).map(|_| random_pose(&mut rng)).collect(),
            context_boxes: vec![[0.5; 4]; 10],
            future_poses: (0..32).map(|_| random_pose(&mut rng)).collect(),
            anchor_points: vec![[0.0; 6]],
            label: None,
        };
        let t = w.trimmed(3, 8).unwrap();
        assert_eq!(t.anchor_pose(), w.anchor_pose());
        assert_eq!(t.future_poses[..], w.future_poses[..8]);
        assert_eq!(t.context_poses[..], w.context_poses[7..]);
        assert!(w.trimmed(11, 8).is_err());
    }
}
