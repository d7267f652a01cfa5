//! Track curation over abstract detection streams: presence smoothing,
//! consensus masks, greedy IoU linking with de-duplication, scale locking,
//! re-registration segments, and window slicing with funnel accounting.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::quantize_points;
use crate::rng::{derive_seed, gaussian, hash_str, stream, stream_for};
use nalgebra::Vector3;
use rand::Rng;

use crate::se3::{PoseSE3, Rotation};
use crate::synth::{box_surface_point, project_box, DEFAULT_FPS, DEFAULT_IMAGE_SIZE, DEFAULT_INTRINSICS};
use crate::tokens::{build_window, NormBox, TokenError, TrajectoryWindow, WindowSource};

#[derive(Debug, Error, PartialEq)]
pub enum CurationError {
    #[error("mask dimensions {a:?} and {b:?} differ")]
    DimensionMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("consensus needs at least one mask")]
    EmptyWindow,
    #[error("no valid frames for scale estimation")]
    NoValidFrames,
    #[error("scale is already locked at {0}")]
    AlreadyLocked(f64),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinarySignal {
    pub values: Vec<bool>,
    pub fps: f64,
}

/// Runs of equal values as `(value, start, len)`.
fn runs(v: &[bool]) -> Vec<(bool, usize, usize)> {
    let mut out: Vec<(bool, usize, usize)> = Vec::new();
    for (i, &b) in v.iter().enumerate() {
        match out.last_mut() {
            Some(r) if r.0 == b => r.2 += 1,
            _ => out.push((b, i, 1)),
        }
    }
    out
}

pub const SMOOTHING_FRACTION: f64 = 0.05;

pub fn smoothing_threshold(clip_frames: usize) -> usize {
    ((SMOOTHING_FRACTION * clip_frames as f64).round() as usize).max(1)
}

/// Fills interior false gaps shorter than `m`, then drops true runs
/// shorter than `m`, with `m = max(1, round(0.05 · clip_frames))`.
pub fn run_length_smooth(signal: &BinarySignal, clip_frames: usize) -> BinarySignal {
    BinarySignal { values: smooth_with(&signal.values, smoothing_threshold(clip_frames)), fps: signal.fps }
}

pub fn smooth_with(values: &[bool], m: usize) -> Vec<bool> {
    let mut v = values.to_vec();
    let r = runs(&v);
    for (i, &(b, start, len)) in r.iter().enumerate() {
        let interior = i > 0 && i + 1 < r.len();
        if !b && interior && len < m {
            v[start..start + len].fill(true);
        }
    }
    for (b, start, len) in runs(&v) {
        if b && len < m {
            v[start..start + len].fill(false);
        }
    }
    v
}

/// Binary grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    /// Filled axis-aligned rectangle `[x0, x1) × [y0, y1)`, clipped.
    pub fn rect(width: usize, height: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        let mut m = Self::empty(width, height);
        for y in y0.min(height)..y1.min(height) {
            for x in x0.min(width)..x1.min(width) {
                m.bits[y * width + x] = true;
            }
        }
        m
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.contains(&true)
    }

    /// Normalized `[cx, cy, w, h]` of the set pixels; `None` if empty.
    pub fn bbox(&self) -> Option<NormBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for (i, _) in self.bits.iter().enumerate().filter(|(_, b)| **b) {
            let (x, y) = (i % self.width, i / self.width);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
        }
        if x0 == usize::MAX {
            return None;
        }
        let (w, h) = (self.width as f64, self.height as f64);
        Some([(x0 + x1) as f64 / 2.0 / w, (y0 + y1) as f64 / 2.0 / h, (x1 - x0) as f64 / w, (y1 - y0) as f64 / h])
    }

    /// `[start, len]` pairs of set runs in row-major order.
    pub fn to_rle(&self) -> Vec<[u32; 2]> {
        runs(&self.bits).into_iter().filter(|r| r.0).map(|(_, s, l)| [s as u32, l as u32]).collect()
    }

    pub fn from_rle(width: usize, height: usize, rle: &[[u32; 2]]) -> Result<Self, CurationError> {
        let mut m = Self::empty(width, height);
        for &[s, l] in rle {
            let (s, l) = (s as usize, l as usize);
            if s + l > m.bits.len() {
                return Err(CurationError::InvalidInput(format!("run {s}+{l} exceeds {width}x{height}")));
            }
            m.bits[s..s + l].fill(true);
        }
        Ok(m)
    }
}

fn same_dims(a: &Mask, b: &Mask) -> Result<(), CurationError> {
    if a.dims() != b.dims() {
        return Err(CurationError::DimensionMismatch { a: a.dims(), b: b.dims() });
    }
    Ok(())
}

/// Bitwise AND over the window.
pub fn consensus_mask(masks: &[&Mask]) -> Result<Mask, CurationError> {
    let first = masks.first().ok_or(CurationError::EmptyWindow)?;
    let mut out = (*first).clone();
    for m in &masks[1..] {
        same_dims(&out, m)?;
        for (o, b) in out.bits.iter_mut().zip(&m.bits) {
            *o &= *b;
        }
    }
    Ok(out)
}

pub fn iou(a: &Mask, b: &Mask) -> Result<f64, CurationError> {
    same_dims(a, b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.bits.iter().zip(&b.bits) {
        inter += (*x && *y) as usize;
        union += (*x || *y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dedup {
    Accept,
    Reject(usize),
}

/// `recent[i]` holds the last masks of active track `i`, most recent last;
/// only the final `window` are compared.
pub fn dedup(candidate: &Mask, recent: &[(usize, Vec<&Mask>)], dedup_iou: f64, window: usize) -> Dedup {
    let mut best: Option<(f64, usize)> = None;
    for (id, masks) in recent {
        for m in masks.iter().rev().take(window) {
            let v = iou(candidate, m).unwrap_or(0.0);
            if best.is_none_or(|(b, _)| v > b) {
                best = Some((v, *id));
            }
        }
    }
    match best {
        Some((v, id)) if v >= dedup_iou => Dedup::Reject(id),
        _ => Dedup::Accept,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkParams {
    pub iou_thresh: f64,
    /// Frames a track may go unmatched and still continue.
    pub gap_tol: usize,
    /// Minimum span in frames.
    pub min_len: usize,
    pub dedup_iou: f64,
    pub dedup_window: usize,
}

impl Default for LinkParams {
    fn default() -> Self {
        Self { iou_thresh: 0.5, gap_tol: 2, min_len: 11, dedup_iou: 0.7, dedup_window: 3 }
    }
}

/// A linked track: `members[k]` is the component index at frame
/// `start + k`, `None` inside gaps.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkedTrack {
    pub id: usize,
    pub start: usize,
    pub members: Vec<Option<usize>>,
}

impl LinkedTrack {
    pub fn span(&self) -> usize {
        self.members.len()
    }

    fn last_frame(&self) -> usize {
        self.start + self.members.len() - 1
    }

    fn last_component(&self) -> usize {
        self.members.iter().rev().flatten().next().copied().expect("track without members")
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinkResult {
    pub tracks: Vec<LinkedTrack>,
    /// Tracks discarded for being shorter than `min_len`.
    pub short: usize,
    /// Seed proposals rejected as duplicates of active tracks.
    pub duplicates: usize,
}

/// Greedy IoU association over ordered frames of components.
pub fn link_tracks(frames: &[Vec<Mask>], p: &LinkParams) -> Result<LinkResult, CurationError> {
    let mut all: Vec<LinkedTrack> = Vec::new();
    let mut duplicates = 0;
    for (f, comps) in frames.iter().enumerate() {
        let active: Vec<usize> = (0..all.len()).filter(|&i| f - all[i].last_frame() - 1 <= p.gap_tol).collect();
        let mut pairs = Vec::new();
        for &ti in &active {
            let t = &all[ti];
            let last = &frames[t.start + t.members.iter().rposition(Option::is_some).unwrap()][t.last_component()];
            for (ci, c) in comps.iter().enumerate() {
                let v = iou(last, c)?;
                if v >= p.iou_thresh {
                    pairs.push((v, ti, ci));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut track_used = vec![false; all.len()];
        let mut comp_used = vec![false; comps.len()];
        for (_, ti, ci) in pairs {
            if track_used[ti] || comp_used[ci] {
                continue;
            }
            track_used[ti] = true;
            comp_used[ci] = true;
            let t = &mut all[ti];
            while t.last_frame() + 1 < f {
                t.members.push(None);
            }
            t.members.push(Some(ci));
        }
        for (ci, c) in comps.iter().enumerate().filter(|(ci, _)| !comp_used[*ci]) {
            let recent: Vec<(usize, Vec<&Mask>)> = active
                .iter()
                .map(|&ti| {
                    let t = &all[ti];
                    let masks = t
                        .members
                        .iter()
                        .enumerate()
                        .filter(|(k, m)| m.is_some() && t.start + k + p.dedup_window > f)
                        .map(|(k, m)| &frames[t.start + k][m.unwrap()])
                        .collect();
                    (t.id, masks)
                })
                .collect();
            match dedup(c, &recent, p.dedup_iou, p.dedup_window) {
                Dedup::Accept => all.push(LinkedTrack { id: all.len(), start: f, members: vec![Some(ci)] }),
                Dedup::Reject(_) => duplicates += 1,
            }
        }
    }
    let before = all.len();
    let tracks: Vec<LinkedTrack> = all.into_iter().filter(|t| t.span() >= p.min_len).collect();
    Ok(LinkResult { short: before - tracks.len(), tracks, duplicates })
}

/// Weighted lower median of `r_obs / r_mesh`; the first estimate locks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScaleEstimator {
    locked: Option<f64>,
}

impl ScaleEstimator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn locked(&self) -> Option<f64> {
        self.locked
    }

    /// `observations` are `(r_obs, weight)`; entries with non-positive or
    /// non-finite values are ignored.
    pub fn estimate(&mut self, observations: &[(f64, f64)], r_mesh: f64) -> Result<f64, CurationError> {
        if let Some(s) = self.locked {
            return Err(CurationError::AlreadyLocked(s));
        }
        if !(r_mesh > 0.0) {
            return Err(CurationError::InvalidInput(format!("mesh radius {r_mesh}")));
        }
        let mut ratios: Vec<(f64, f64)> = observations
            .iter()
            .filter(|(r, w)| r.is_finite() && *r > 0.0 && w.is_finite() && *w > 0.0)
            .map(|(r, w)| (r / r_mesh, *w))
            .collect();
        if ratios.is_empty() {
            return Err(CurationError::NoValidFrames);
        }
        let s = weighted_lower_median(&mut ratios);
        self.locked = Some(s);
        Ok(s)
    }
}

/// Smallest value whose cumulative weight reaches half the total.
pub fn weighted_lower_median(items: &mut [(f64, f64)]) -> f64 {
    items.sort_by(|a, b| a.0.total_cmp(&b.0));
    let half = items.iter().map(|i| i.1).sum::<f64>() / 2.0;
    let mut acc = 0.0;
    for &(v, w) in items.iter() {
        acc += w;
        if acc >= half {
            return v;
        }
    }
    items.last().unwrap().0
}

pub const REREGISTRATION_IOU: f64 = 0.1;

/// A new segment begins at every frame whose projection IoU is below the
/// trigger.
pub fn segment_registrations(ious: &[f64]) -> Vec<Range<usize>> {
    segment_with(ious, REREGISTRATION_IOU)
}

pub fn segment_with(ious: &[f64], trigger: f64) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, &v) in ious.iter().enumerate() {
        if i > start && v < trigger {
            out.push(start..i);
            start = i;
        }
    }
    if !ious.is_empty() {
        out.push(start..ious.len());
    }
    out
}

/// A tracked object with everything needed to cut windows.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackRecord {
    pub track_id: usize,
    pub clip_id: String,
    pub fps: f64,
    /// Length of the whole source clip in frames.
    pub clip_frames: usize,
    /// Clip frame of the first tracked frame.
    pub start_frame: usize,
    pub intrinsics: [f64; 4],
    pub image_size: [usize; 2],
    pub masks: Vec<Option<Mask>>,
    /// Per-frame projection IoU; 0 in gaps.
    pub iou: Vec<f64>,
    /// Object pose in each frame's camera.
    pub poses: Vec<PoseSE3>,
    pub extrinsics: Vec<PoseSE3>,
    pub segments: Vec<Range<usize>>,
    /// Scaled mesh bounding box (full side lengths, meters).
    pub object_extent: [f64; 3],
}

impl TrackRecord {
    pub fn span(&self) -> usize {
        self.iou.len()
    }

    pub fn validate(&self) -> Result<(), CurationError> {
        let n = self.span();
        if n == 0 || self.masks.len() != n || self.poses.len() != n || self.extrinsics.len() != n {
            return Err(CurationError::InvalidInput(format!("track {} has ragged per-frame data", self.track_id)));
        }
        if self.iou.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CurationError::InvalidInput("IoU outside [0, 1]".into()));
        }
        let mut next = 0;
        for s in &self.segments {
            if s.start != next || s.end <= s.start {
                return Err(CurationError::InvalidInput("segments do not partition the span".into()));
            }
            next = s.end;
        }
        if next != n {
            return Err(CurationError::InvalidInput("segments do not cover the span".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SliceParams {
    pub max_clip_seconds: f64,
    pub min_iou: f64,
    pub max_iou_drop: f64,
    pub n_points: usize,
}

impl Default for SliceParams {
    fn default() -> Self {
        Self { max_clip_seconds: 10.0, min_iou: REREGISTRATION_IOU, max_iou_drop: 0.1, n_points: 256 }
    }
}

/// Slack for comparing IoU drops written as decimal literals.
const DROP_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SlicedWindow {
    /// Track-relative frame of the first context frame.
    pub start: usize,
    pub window: TrajectoryWindow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SliceCounts {
    pub pre_filter: usize,
    pub post_filter: usize,
}

/// True if frames `start .. start + len` pass the segment and IoU gates.
pub fn window_passes(track: &TrackRecord, start: usize, len: usize, p: &SliceParams) -> bool {
    let end = start + len;
    if !track.segments.iter().any(|s| s.start <= start && end <= s.end) {
        return false;
    }
    let iou = &track.iou[start..end];
    if iou.iter().any(|v| *v < p.min_iou) {
        return false;
    }
    iou.windows(2).all(|w| w[0] - w[1] <= p.max_iou_drop + DROP_SLACK)
}

pub fn slice_windows(
    track: &TrackRecord,
    c: usize,
    h: usize,
    p: &SliceParams,
) -> Result<(Vec<SlicedWindow>, SliceCounts), CurationError> {
    track.validate()?;
    if c == 0 || h == 0 {
        return Err(CurationError::InvalidInput("C and H must be positive".into()));
    }
    let len = c + h;
    if track.clip_frames as f64 / track.fps > p.max_clip_seconds || track.span() < len {
        return Ok((Vec::new(), SliceCounts::default()));
    }
    let boxes: Vec<NormBox> = track
        .masks
        .iter()
        .zip(&track.poses)
        .map(|(m, pose)| {
            m.as_ref()
                .and_then(Mask::bbox)
                .or_else(|| project_box(pose, &track.object_extent, &track.intrinsics, track.image_size).ok())
                .unwrap_or([0.5, 0.5, 0.0, 0.0])
        })
        .collect();
    let mut counts = SliceCounts { pre_filter: track.span() - len + 1, post_filter: 0 };
    let mut out = Vec::new();
    for start in 0..=track.span() - len {
        if !window_passes(track, start, len, p) {
            continue;
        }
        let clip_id = format!("{}-t{}-f{}", track.clip_id, track.track_id, track.start_frame + start);
        let anchor = start + c - 1;
        let mut rng = stream(hash_str(&clip_id));
        let mut points: Vec<[f64; 6]> = (0..p.n_points)
            .map(|_| box_surface_point(&mut rng, &track.object_extent, &track.poses[anchor]))
            .collect();
        quantize_points(&mut points);
        let src = WindowSource {
            clip_id: &clip_id,
            fps: track.fps,
            intrinsics: track.intrinsics,
            object_poses: &track.poses,
            camera_to_world: &track.extrinsics,
            boxes: &boxes,
        };
        match build_window(&src, start, c, h, points) {
            Ok(window) => {
                counts.post_filter += 1;
                out.push(SlicedWindow { start, window });
            }
            Err(TokenError::NonPositiveDepth { .. }) => {}
            Err(e) => return Err(CurationError::InvalidInput(e.to_string())),
        }
    }
    Ok((out, counts))
}

pub const FUNNEL_STAGES: [&str; 8] = [
    "segments",
    "selected_clips",
    "tracks",
    "filtered_tracks",
    "models",
    "pose_tracks",
    "pre_filter_windows",
    "post_filter_windows",
];

/// Per-stage counts. Filtering is monotone within three groups: clips
/// (segments → selected_clips), tracks (tracks → … → pose_tracks) and
/// windows (pre → post).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FunnelStats {
    pub segments: usize,
    pub selected_clips: usize,
    pub tracks: usize,
    pub filtered_tracks: usize,
    pub models: usize,
    pub pose_tracks: usize,
    pub pre_filter_windows: usize,
    pub post_filter_windows: usize,
}

impl FunnelStats {
    pub fn counts(&self) -> [usize; 8] {
        [
            self.segments,
            self.selected_clips,
            self.tracks,
            self.filtered_tracks,
            self.models,
            self.pose_tracks,
            self.pre_filter_windows,
            self.post_filter_windows,
        ]
    }

    pub fn add(&mut self, o: &FunnelStats) {
        self.segments += o.segments;
        self.selected_clips += o.selected_clips;
        self.tracks += o.tracks;
        self.filtered_tracks += o.filtered_tracks;
        self.models += o.models;
        self.pose_tracks += o.pose_tracks;
        self.pre_filter_windows += o.pre_filter_windows;
        self.post_filter_windows += o.post_filter_windows;
    }

    pub fn is_monotone(&self) -> bool {
        let c = self.counts();
        c[0] >= c[1] && c[2] >= c[3] && c[3] >= c[4] && c[4] >= c[5] && c[6] >= c[7]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,count\n");
        for (name, v) in FUNNEL_STAGES.iter().zip(self.counts()) {
            s.push_str(&format!("{name},{v}\n"));
        }
        s
    }
}

/// One detected component in one frame of the stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentRecord {
    pub rle: Vec<[u32; 2]>,
    /// Projection IoU of the tracked pose against this mask.
    pub iou: f64,
    /// Object pose in this frame's camera, `[x,y,z,a1..a3,b1..b3]`.
    pub pose: [f64; 9],
    /// Observed object radius from depth, meters.
    pub radius: f64,
    /// Inlier count backing `radius`.
    pub inliers: f64,
    /// Reconstructed mesh box at unit scale.
    pub mesh_extent: [f64; 3],
}

/// One frame of the detection stream (one JSONL line).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub clip_id: String,
    pub frame: usize,
    pub fps: f64,
    pub clip_frames: usize,
    pub intrinsics: [f64; 4],
    pub image_size: [usize; 2],
    pub mask_size: [usize; 2],
    pub hand: bool,
    /// Camera-to-world of this frame.
    pub extrinsics: [f64; 9],
    pub components: Vec<ComponentRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurateParams {
    pub context: usize,
    pub horizon: usize,
    pub link: LinkParams,
    pub slice: SliceParams,
    pub consensus_window: usize,
    /// Minimum share of tracked frames with a nonempty consensus mask
    /// (the clean-view predicate).
    pub min_consensus_fraction: f64,
}

impl Default for CurateParams {
    fn default() -> Self {
        Self {
            context: 3,
            horizon: 8,
            link: LinkParams::default(),
            slice: SliceParams::default(),
            consensus_window: 3,
            min_consensus_fraction: 0.5,
        }
    }
}

/// Clean-view gate on a linked track's masks.
pub fn clean_view(masks: &[Option<Mask>], window: usize, min_fraction: f64) -> bool {
    let w = window.max(1);
    let mut good = 0;
    for k in 0..masks.len() {
        let lo = (k + 1).saturating_sub(w);
        let win: Vec<&Mask> = masks[lo..=k].iter().flatten().collect();
        if win.len() == k + 1 - lo && consensus_mask(&win).is_ok_and(|m| !m.is_empty()) {
            good += 1;
        }
    }
    good as f64 >= min_fraction * masks.len() as f64
}

fn bad_record(clip: &str, e: impl std::fmt::Display) -> CurationError {
    CurationError::InvalidInput(format!("clip {clip}: {e}"))
}

/// Runs the whole pipeline on one clip's frames (ordered by frame index).
pub fn curate_clip(frames: &[FrameRecord], p: &CurateParams) -> Result<(Vec<TrajectoryWindow>, FunnelStats), CurationError> {
    let mut stats = FunnelStats { segments: 1, ..Default::default() };
    let Some(first) = frames.first() else {
        return Ok((Vec::new(), FunnelStats::default()));
    };
    let clip = first.clip_id.as_str();
    let fps = first.fps;
    let hands = BinarySignal { values: frames.iter().map(|f| f.hand).collect(), fps };
    let smoothed = run_length_smooth(&hands, first.clip_frames);
    if !smoothed.values.contains(&true) || first.clip_frames as f64 / fps > p.slice.max_clip_seconds {
        return Ok((Vec::new(), stats));
    }
    stats.selected_clips = 1;

    let [mw, mh] = first.mask_size;
    let masks: Vec<Vec<Mask>> = frames
        .iter()
        .map(|f| f.components.iter().map(|c| Mask::from_rle(mw, mh, &c.rle)).collect::<Result<_, _>>())
        .collect::<Result<_, _>>()?;
    let linked = link_tracks(&masks, &p.link)?;
    stats.tracks = linked.tracks.len() + linked.short;

    let mut windows = Vec::new();
    for t in &linked.tracks {
        let track_masks: Vec<Option<Mask>> =
            t.members.iter().enumerate().map(|(k, m)| m.map(|ci| masks[t.start + k][ci].clone())).collect();
        if !clean_view(&track_masks, p.consensus_window, p.min_consensus_fraction) {
            continue;
        }
        stats.filtered_tracks += 1;

        let comps: Vec<Option<&ComponentRecord>> =
            t.members.iter().enumerate().map(|(k, m)| m.map(|ci| &frames[t.start + k].components[ci])).collect();
        let seed = comps.iter().flatten().next().expect("linked track has a member");
        let mesh = seed.mesh_extent;
        let r_mesh = (mesh[0] * mesh[0] + mesh[1] * mesh[1] + mesh[2] * mesh[2]).sqrt() / 2.0;
        let obs: Vec<(f64, f64)> = comps.iter().flatten().map(|c| (c.radius, c.inliers)).collect();
        let scale = match ScaleEstimator::new().estimate(&obs, r_mesh) {
            Ok(s) => s,
            Err(CurationError::NoValidFrames | CurationError::InvalidInput(_)) => continue,
            Err(e) => return Err(e),
        };
        stats.models += 1;

        let mut poses = Vec::with_capacity(t.span());
        let mut iou = Vec::with_capacity(t.span());
        let mut last = None;
        for c in &comps {
            match c {
                Some(c) => {
                    let pose = PoseSE3::from_array9(&c.pose).map_err(|e| bad_record(clip, e))?;
                    last = Some(pose);
                    poses.push(pose);
                    iou.push(c.iou.clamp(0.0, 1.0));
                }
                None => {
                    poses.push(last.expect("gaps follow a matched frame"));
                    iou.push(0.0);
                }
            }
        }
        let extrinsics = (t.start..t.start + t.span())
            .map(|f| PoseSE3::from_array9(&frames[f].extrinsics).map_err(|e| bad_record(clip, e)))
            .collect::<Result<Vec<_>, _>>()?;
        let track = TrackRecord {
            track_id: t.id,
            clip_id: clip.to_string(),
            fps,
            clip_frames: first.clip_frames,
            start_frame: frames[t.start].frame,
            intrinsics: first.intrinsics,
            image_size: first.image_size,
            masks: track_masks,
            segments: segment_registrations(&iou),
            iou,
            poses,
            extrinsics,
            object_extent: mesh.map(|e| e * scale),
        };
        if track.span() < p.context + p.horizon {
            continue;
        }
        stats.pose_tracks += 1;
        let (ws, counts) = slice_windows(&track, p.context, p.horizon, &p.slice)?;
        stats.pre_filter_windows += counts.pre_filter;
        stats.post_filter_windows += counts.post_filter;
        windows.extend(ws.into_iter().map(|s| s.window));
    }
    Ok((windows, stats))
}

/// Groups frames by clip (first-appearance order), curates each clip in
/// parallel, and concatenates in clip order.
pub fn curate_stream(frames: &[FrameRecord], p: &CurateParams) -> Result<(Vec<TrajectoryWindow>, FunnelStats), CurationError> {
    use rayon::prelude::*;
    let mut order: Vec<&str> = Vec::new();
    let mut by_clip: BTreeMap<&str, Vec<&FrameRecord>> = BTreeMap::new();
    for f in frames {
        by_clip
            .entry(f.clip_id.as_str())
            .or_insert_with(|| {
                order.push(f.clip_id.as_str());
                Vec::new()
            })
            .push(f);
    }
    let results: Vec<_> = order
        .par_iter()
        .map(|id| {
            let mut clip: Vec<FrameRecord> = by_clip[id].iter().map(|f| (*f).clone()).collect();
            clip.sort_by_key(|f| f.frame);
            curate_clip(&clip, p)
        })
        .collect::<Result<_, _>>()?;
    let mut windows = Vec::new();
    let mut stats = FunnelStats::default();
    for (w, s) in results {
        windows.extend(w);
        stats.add(&s);
    }
    Ok((windows, stats))
}

/// Knobs for the synthetic detection stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub clips: usize,
    pub seed: u64,
    pub frames: [usize; 2],
    /// Share of clips longer than the clip-length gate.
    pub long_clip_rate: f64,
    /// Share of clips without any hand presence.
    pub idle_clip_rate: f64,
    pub mask_size: [usize; 2],
    /// Per-frame probability of a missing detection.
    pub dropout: f64,
    /// Per-frame probability of a projection-IoU collapse.
    pub reregister: f64,
    /// Per-frame probability of a duplicate proposal.
    pub duplicate: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            clips: 8,
            seed: 0,
            frames: [24, 48],
            long_clip_rate: 0.1,
            idle_clip_rate: 0.1,
            mask_size: [64, 48],
            dropout: 0.03,
            reregister: 0.03,
            duplicate: 0.05,
        }
    }
}

fn box_to_mask(b: &NormBox, w: usize, h: usize) -> Mask {
    let (fw, fh) = (w as f64, h as f64);
    let x0 = ((b[0] - b[2] / 2.0) * fw).floor().max(0.0) as usize;
    let y0 = ((b[1] - b[3] / 2.0) * fh).floor().max(0.0) as usize;
    let x1 = ((b[0] + b[2] / 2.0) * fw).ceil().max(0.0) as usize;
    let y1 = ((b[1] + b[3] / 2.0) * fh).ceil().max(0.0) as usize;
    Mask::rect(w, h, x0, y0, x1.max(x0 + 1), y1.max(y0 + 1))
}

/// Frames of one synthetic clip: one or two moving boxes seen by a slowly
/// panning camera, with dropouts, IoU collapses, duplicate proposals and a
/// noisy hand-presence trace.
pub fn synthetic_clip(cfg: &StreamConfig, index: usize) -> Vec<FrameRecord> {
    let mut rng = stream_for(cfg.seed, &[index as u64]);
    let clip_id = format!("clip-{index:05}");
    let long = rng.random::<f64>() < cfg.long_clip_rate;
    let idle = rng.random::<f64>() < cfg.idle_clip_rate;
    let n = if long {
        (cfg.max_frames_gate() + 1).max(cfg.frames[1])
    } else {
        rng.random_range(cfg.frames[0]..=cfg.frames[1])
    };
    let [mw, mh] = cfg.mask_size;
    let pan = rng.random_range(-0.01..0.01);
    let n_obj = 1 + rng.random_bool(0.4) as usize;
    struct Obj {
        start: PoseSE3,
        vel: Vector3<f64>,
        spin: f64,
        mesh: [f64; 3],
        scale: f64,
    }
    let objs: Vec<Obj> = (0..n_obj)
        .map(|o| {
            let x = if o == 0 { rng.random_range(-0.12..0.0) } else { rng.random_range(0.05..0.15) };
            let start = PoseSE3::new(
                Rotation::from_axis_angle(Vector3::y(), rng.random_range(-1.0..1.0)),
                Vector3::new(x, rng.random_range(-0.05..0.05), rng.random_range(0.6..0.9)),
            );
            let scale = rng.random_range(0.5..2.0);
            let size = [rng.random_range(0.05..0.1), rng.random_range(0.05..0.1), rng.random_range(0.05..0.1)];
            Obj {
                start,
                vel: Vector3::new(rng.random_range(-0.01..0.01), rng.random_range(-0.006..0.0), rng.random_range(-0.004..0.004)),
                spin: rng.random_range(-0.03..0.03),
                mesh: size.map(|e| e / scale),
                scale,
            }
        })
        .collect();
    let hand_run = if idle { 0..0 } else { 0..n };
    (0..n)
        .map(|f| {
            let mut fr = stream(derive_seed(cfg.seed, &[index as u64, f as u64 + 1]));
            let cam = PoseSE3::new(Rotation::from_axis_angle(Vector3::y(), pan * f as f64), Vector3::zeros());
            let mut components = Vec::new();
            for ob in &objs {
                if fr.random::<f64>() < cfg.dropout {
                    continue;
                }
                let world = PoseSE3::new(
                    Rotation::from_axis_angle(Vector3::y(), ob.spin * f as f64).compose(&ob.start.rotation),
                    ob.start.translation + ob.vel * f as f64,
                );
                let pose = cam.inverse().compose(&world);
                let extent = ob.mesh.map(|e| e * ob.scale);
                let Ok(b) = project_box(&pose, &extent, &DEFAULT_INTRINSICS, DEFAULT_IMAGE_SIZE) else { continue };
                let mask = box_to_mask(&b, mw, mh);
                if mask.is_empty() {
                    continue;
                }
                let iou = if fr.random::<f64>() < cfg.reregister {
                    fr.random_range(0.0..0.09)
                } else {
                    (0.85 + 0.01 * gaussian(&mut fr)).clamp(0.0, 1.0)
                };
                let r_mesh = (ob.mesh.iter().map(|e| e * e).sum::<f64>()).sqrt() / 2.0;
                let outlier = fr.random::<f64>() < 0.1;
                let radius = ob.scale * r_mesh * if outlier { fr.random_range(2.0..4.0) } else { 1.0 + 0.02 * gaussian(&mut fr) };
                let inliers = if outlier { fr.random_range(5.0..20.0) } else { fr.random_range(200.0..400.0) };
                let duplicate = fr.random::<f64>() < cfg.duplicate;
                let rec = ComponentRecord {
                    rle: mask.to_rle(),
                    iou,
                    pose: pose.to_array9(),
                    radius,
                    inliers,
                    mesh_extent: ob.mesh,
                };
                if duplicate {
                    components.push(ComponentRecord { iou: 0.0, ..rec.clone() });
                }
                components.push(rec);
            }
            if fr.random_bool(0.5) {
                components.reverse();
            }
            FrameRecord {
                clip_id: clip_id.clone(),
                frame: f,
                fps: DEFAULT_FPS,
                clip_frames: n,
                intrinsics: DEFAULT_INTRINSICS,
                image_size: DEFAULT_IMAGE_SIZE,
                mask_size: cfg.mask_size,
                hand: hand_run.contains(&f) && fr.random::<f64>() > 0.05,
                extrinsics: cam.to_array9(),
                components,
            }
        })
        .collect()
}

impl StreamConfig {
    fn max_frames_gate(&self) -> usize {
        (SliceParams::default().max_clip_seconds * DEFAULT_FPS) as usize
    }
}

pub fn synthetic_stream(cfg: &StreamConfig) -> Vec<FrameRecord> {
    use rayon::prelude::*;
    (0..cfg.clips).into_par_iter().map(|i| synthetic_clip(cfg, i)).collect::<Vec<_>>().concat()
}
