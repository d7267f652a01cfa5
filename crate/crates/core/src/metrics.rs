//! Forecast metrics and the two heuristic baselines.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_seed, hash_str};
use crate::se3::{apply_increment, geodesic_angle, pose_increment, PoseSE3};
use crate::tokens::TrajectoryWindow;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction has {pred} poses, ground truth {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("cannot evaluate an empty trajectory")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub ade: f64,
    pub fde: f64,
    pub des: f64,
    /// Degrees.
    pub are: f64,
    pub fre: f64,
    pub res: f64,
    pub n_samples: usize,
}

pub const METRIC_NAMES: [&str; 6] = ["ade", "fde", "des", "are", "fre", "res"];

impl MetricReport {
    pub fn values(&self) -> [f64; 6] {
        [self.ade, self.fde, self.des, self.are, self.fre, self.res]
    }

    fn from_values(v: [f64; 6], n: usize) -> Self {
        MetricReport { ade: v[0], fde: v[1], des: v[2], are: v[3], fre: v[4], res: v[5], n_samples: n }
    }

    /// Sample-weighted mean of several reports.
    pub fn merge(reports: &[MetricReport]) -> MetricReport {
        let n: usize = reports.iter().map(|r| r.n_samples).sum();
        if n == 0 {
            return MetricReport::default();
        }
        let mut acc = [0.0; 6];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v * r.n_samples as f64;
            }
        }
        MetricReport::from_values(acc.map(|a| a / n as f64), n)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value,n\n");
        for (name, v) in METRIC_NAMES.iter().zip(self.values()) {
            s.push_str(&format!("{name},{v},{}\n", self.n_samples));
        }
        s
    }
}

/// Ordinary least-squares slope of `y` against `1..=n`; 0 when `n < 2`.
pub fn ols_slope(y: &[f64]) -> f64 {
    let n = y.len();
    if n < 2 {
        return 0.0;
    }
    let kbar = (n as f64 + 1.0) / 2.0;
    let ybar = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, &v) in y.iter().enumerate() {
        let dk = (i + 1) as f64 - kbar;
        sxy += dk * (v - ybar);
        sxx += dk * dk;
    }
    sxy / sxx
}

pub fn evaluate(pred: &[PoseSE3], gt: &[PoseSE3]) -> Result<MetricReport, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch { pred: pred.len(), gt: gt.len() });
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty);
    }
    let e: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| (p.translation - g.translation).norm()).collect();
    let r: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| geodesic_angle(&p.rotation, &g.rotation).to_degrees()).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(MetricReport {
        ade: mean(&e),
        fde: *e.last().unwrap(),
        des: ols_slope(&e),
        are: mean(&r),
        fre: *r.last().unwrap(),
        res: ols_slope(&r),
        n_samples: 1,
    })
}

pub fn window_seed(seed: u64, clip_id: &str) -> u64 {
    derive_seed(seed, &[hash_str(clip_id)])
}

/// Evaluates one prediction per window, in parallel, and averages.
pub fn evaluate_batch<P, E>(windows: &[TrajectoryWindow], predictor: P, seed: u64) -> Result<MetricReport, E>
where
    P: Fn(&TrajectoryWindow, u64) -> Result<Vec<PoseSE3>, E> + Sync,
    E: From<MetricsError> + Send,
{
    evaluate_best_of(windows, predictor, seed, 1)
}

/// Like [`evaluate_batch`] but keeps, per window, the lowest-ADE of `n`
/// samples (sample `j` uses seed `derive(window seed, j)`; `n = 1` uses the
/// window seed directly).
pub fn evaluate_best_of<P, E>(windows: &[TrajectoryWindow], predictor: P, seed: u64, n: usize) -> Result<MetricReport, E>
where
    P: Fn(&TrajectoryWindow, u64) -> Result<Vec<PoseSE3>, E> + Sync,
    E: From<MetricsError> + Send,
{
    let reports: Vec<MetricReport> = windows
        .par_iter()
        .map(|w| {
            let ws = window_seed(seed, &w.clip_id);
            let mut best: Option<MetricReport> = None;
            for j in 0..n.max(1) {
                let s = if n <= 1 { ws } else { derive_seed(ws, &[j as u64]) };
                let pred = predictor(w, s)?;
                let r = evaluate(&pred, &w.future_poses)?;
                if best.is_none_or(|b| r.ade < b.ade) {
                    best = Some(r);
                }
            }
            Ok(best.unwrap())
        })
        .collect::<Result<_, E>>()?;
    Ok(MetricReport::merge(&reports))
}

pub fn baseline_constant_pose(window: &TrajectoryWindow) -> Vec<PoseSE3> {
    vec![*window.anchor_pose(); window.horizon()]
}

pub fn baseline_constant_velocity(window: &TrajectoryWindow) -> Vec<PoseSE3> {
    let c = &window.context_poses;
    if c.len() < 2 {
        return baseline_constant_pose(window);
    }
    let inc = pose_increment(&c[c.len() - 2], &c[c.len() - 1]);
    let mut cur = *window.anchor_pose();
    (0..window.horizon())
        .map(|_| {
            cur = apply_increment(&cur, &inc);
            cur
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn line(n: usize, off: Vector3<f64>) -> Vec<PoseSE3> {
        (0..n).map(|k| PoseSE3::from_translation(Vector3::new(0.0, 0.0, 1.0 + 0.1 * k as f64) + off)).collect()
    }

    #[test]
    fn hand_cases() {
        let gt = line(8, Vector3::zeros());
        let r = evaluate(&gt, &gt).unwrap();
        assert_eq!(r.values(), [0.0; 6]);
        let r = evaluate(&line(8, Vector3::new(0.1, 0.0, 0.0)), &gt).unwrap();
        assert!((r.ade - 0.1).abs() < 1e-12 && (r.fde - 0.1).abs() < 1e-12);
        assert!(r.des.abs() < 1e-12);
        let pred: Vec<PoseSE3> = gt
            .iter()
            .enumerate()
            .map(|(k, p)| PoseSE3::from_translation(p.translation + Vector3::new(0.01 * (k + 1) as f64, 0.0, 0.0)))
            .collect();
        let r = evaluate(&pred, &gt).unwrap();
        assert!((r.ade - 0.045).abs() < 1e-12);
        assert!((r.fde - 0.08).abs() < 1e-12);
        assert!((r.des - 0.01).abs() < 1e-12);
        assert_eq!(evaluate(&gt[..3], &gt), Err(MetricsError::LengthMismatch { pred: 3, gt: 8 }));
        assert_eq!(ols_slope(&[4.0]), 0.0);
    }

    #[test]
    fn csv_layout() {
        let r = MetricReport { ade: 0.5, n_samples: 3, ..Default::default() };
        let csv = r.to_csv();
        assert!(csv.starts_with("metric,value,n\nade,0.5,3\n"));
        assert_eq!(csv.lines().count(), 7);
    }
}
