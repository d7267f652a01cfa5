//! On-disk formats: window JSONL with an `OFPC` point-cloud sidecar, and
//! `OFCK` model checkpoints.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, ModelError, ModelParams};
use crate::se3::PoseSE3;
use crate::tensor::Tensor;
use crate::tokens::{NormBox, TokenStats, TrajectoryWindow};

pub const POINTS_MAGIC: &[u8; 4] = b"OFPC";
pub const POINTS_VERSION: u16 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OFCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Fs { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Record { path: PathBuf, line: usize, msg: String },
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn fs_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Fs { path: path.to_path_buf(), source }
}

/// One JSONL line.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowRecord {
    pub clip_id: String,
    pub fps: f64,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "H")]
    pub h: usize,
    pub intrinsics: [f64; 4],
    pub context_poses: Vec<[f64; 9]>,
    pub context_boxes: Vec<NormBox>,
    pub future_poses: Vec<[f64; 9]>,
    pub points_file: String,
    pub points_offset: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// Appends one point block to `out`.
pub fn encode_points(points: &[[f64; 6]], out: &mut Vec<u8>) {
    out.extend_from_slice(POINTS_MAGIC);
    out.extend_from_slice(&POINTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(points.len() as u32).to_le_bytes());
    for p in points {
        for v in p {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
}

/// Decodes the block starting at `offset`.
pub fn decode_points(bytes: &[u8], offset: usize) -> Result<Vec<[f64; 6]>, IoError> {
    let bad = |m: &str| IoError::Format(format!("point block at {offset}: {m}"));
    let head = bytes.get(offset..offset + 10).ok_or_else(|| bad("truncated header"))?;
    if &head[..4] != POINTS_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != POINTS_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(head[6..10].try_into().unwrap()) as usize;
    let body = bytes.get(offset + 10..offset + 10 + count * 24).ok_or_else(|| bad("truncated body"))?;
    Ok(body
        .chunks_exact(24)
        .map(|c| std::array::from_fn(|i| f32::from_le_bytes(c[4 * i..4 * i + 4].try_into().unwrap()) as f64))
        .collect())
}

/// Rounds every coordinate to `f32`, the precision of the sidecar.
pub fn quantize_points(points: &mut [[f64; 6]]) {
    for p in points {
        for v in p {
            *v = *v as f32 as f64;
        }
    }
}

/// Writes `<stem>.jsonl` and `<stem>.ofpc` into `dir`; returns the JSONL path.
pub fn write_windows(dir: &Path, stem: &str, windows: &[TrajectoryWindow]) -> Result<PathBuf, IoError> {
    fs::create_dir_all(dir).map_err(fs_err(dir))?;
    let points_name = format!("{stem}.ofpc");
    let mut points = Vec::new();
    let mut lines = Vec::new();
    for w in windows {
        let offset = points.len() as u64;
        encode_points(&w.anchor_points, &mut points);
        let rec = WindowRecord {
            clip_id: w.clip_id.clone(),
            fps: w.fps,
            c: w.context_len(),
            h: w.horizon(),
            intrinsics: w.intrinsics,
            context_poses: w.context_poses.iter().map(PoseSE3::to_array9).collect(),
            context_boxes: w.context_boxes.clone(),
            future_poses: w.future_poses.iter().map(PoseSE3::to_array9).collect(),
            points_file: points_name.clone(),
            points_offset: offset,
            label: w.label.clone(),
        };
        lines.extend_from_slice(serde_json::to_string(&rec).expect("serializable record").as_bytes());
        lines.push(b'\n');
    }
    let pp = dir.join(&points_name);
    fs::write(&pp, points).map_err(fs_err(&pp))?;
    let jp = dir.join(format!("{stem}.jsonl"));
    fs::write(&jp, lines).map_err(fs_err(&jp))?;
    Ok(jp)
}

pub fn read_windows(path: &Path) -> Result<Vec<TrajectoryWindow>, IoError> {
    let file = fs::File::open(path).map_err(fs_err(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut sidecars: Vec<(String, Vec<u8>)> = Vec::new();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(fs_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec_err = |msg: String| IoError::Record { path: path.to_path_buf(), line: i + 1, msg };
        let rec: WindowRecord = serde_json::from_str(&line).map_err(|e| rec_err(e.to_string()))?;
        if rec.context_poses.len() != rec.c || rec.future_poses.len() != rec.h {
            return Err(rec_err(format!(
                "C={} H={} but {} context and {} future poses",
                rec.c,
                rec.h,
                rec.context_poses.len(),
                rec.future_poses.len()
            )));
        }
        if !sidecars.iter().any(|(n, _)| *n == rec.points_file) {
            let p = base.join(&rec.points_file);
            sidecars.push((rec.points_file.clone(), fs::read(&p).map_err(fs_err(&p))?));
        }
        let bytes = &sidecars.iter().find(|(n, _)| *n == rec.points_file).unwrap().1;
        let anchor_points = decode_points(bytes, rec.points_offset as usize).map_err(|e| rec_err(e.to_string()))?;
        let poses = |v: &[[f64; 9]]| -> Result<Vec<PoseSE3>, IoError> {
            v.iter().map(|a| PoseSE3::from_array9(a).map_err(|e| rec_err(e.to_string()))).collect()
        };
        let w = TrajectoryWindow {
            context_poses: poses(&rec.context_poses)?,
            future_poses: poses(&rec.future_poses)?,
            clip_id: rec.clip_id,
            fps: rec.fps,
            intrinsics: rec.intrinsics,
            context_boxes: rec.context_boxes,
            anchor_points,
            label: rec.label,
        };
        w.validate().map_err(|e| rec_err(e.to_string()))?;
        out.push(w);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub stats: TokenStats,
    pub seed: u64,
    /// Optimizer steps taken.
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ModelParams,
}

impl Checkpoint {
    /// Layout: magic, `u16` version, `u32` header length, JSON header,
    /// `u32` array count, then per array `u16` name length, name, `u32`
    /// rows, `u32` cols, `u64` blob offset; finally the blobs as LE `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("serializable header");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let p = &self.params;
        out.extend_from_slice(&(p.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in p.names().iter().zip(&p.tensors) {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols as u32).to_le_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.len() as u64;
        }
        for t in &p.tensors {
            for v in &t.data {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IoError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(IoError::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(IoError::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| IoError::Format(format!("checkpoint header: {e}")))?;
        let n = r.u32()? as usize;
        let mut table = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| IoError::Format("non-UTF-8 name".into()))?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let off = r.u64()? as usize;
            table.push((name, rows, cols, off));
        }
        let blobs = &bytes[r.pos..];
        let mut named = Vec::with_capacity(n);
        for (name, rows, cols, off) in table {
            let raw = blobs
                .get(off..off + 4 * rows * cols)
                .ok_or_else(|| IoError::Format(format!("blob for {name} out of range")))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
            named.push((name, Tensor::from_vec(rows, cols, data)));
        }
        let params = ModelParams::from_named(&header.config, named)?;
        Ok(Checkpoint { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(fs_err(dir))?;
        }
        let mut f = fs::File::create(path).map_err(fs_err(path))?;
        f.write_all(&self.to_bytes()).map_err(fs_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        Self::from_bytes(&fs::read(path).map_err(fs_err(path))?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| IoError::Format(format!("truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, IoError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
