use std::fmt::Write;

use foresight_core::se3::PoseSE3;
use foresight_core::tokens::TrajectoryWindow;
use nalgebra::Vector3;

const AXIS_LEN: f64 = 0.03;
const AXIS_COLORS: [&str; 3] = ["#d62728", "#2ca02c", "#1f77b4"];

fn project(k: &[f64; 4], p: &Vector3<f64>) -> Option<(f64, f64)> {
    (p.z > 1e-6).then(|| (k[0] * p.x / p.z + k[2], k[1] * p.y / p.z + k[3]))
}

fn axes(s: &mut String, k: &[f64; 4], pose: &PoseSE3, opacity: f64) {
    let o = pose.translation;
    let Some((ox, oy)) = project(k, &o) else { return };
    let m = pose.rotation.matrix();
    for (i, color) in AXIS_COLORS.iter().enumerate() {
        let end = o + m.column(i) * AXIS_LEN;
        if let Some((x, y)) = project(k, &end) {
            let _ = writeln!(
                s,
                r#"<line x1="{ox:.2}" y1="{oy:.2}" x2="{x:.2}" y2="{y:.2}" stroke="{color}" stroke-width="2" stroke-opacity="{opacity:.3}"/>"#
            );
        }
    }
}

fn path(s: &mut String, k: &[f64; 4], poses: &[&PoseSE3], style: &str) {
    let pts: Vec<String> = poses
        .iter()
        .filter_map(|p| project(k, &p.translation))
        .map(|(x, y)| format!("{x:.2},{y:.2}"))
        .collect();
    if pts.len() > 1 {
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" {style}/>"#, pts.join(" "));
    }
}

/// Projected pose axes of the context, ground truth and samples; sampled
/// steps fade with distance from the anchor.
pub fn overlay(w: &TrajectoryWindow, samples: &[Vec<PoseSE3>]) -> String {
    let k = &w.intrinsics;
    let (width, height) = ((2.0 * k[2]).round().max(1.0), (2.0 * k[3]).round().max(1.0));
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(s, r#"<title>{}</title>"#, w.clip_id.replace('&', "&amp;").replace('<', "&lt;"));
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let b = w.context_boxes.last().copied().unwrap_or([0.5, 0.5, 0.0, 0.0]);
    let _ = writeln!(
        s,
        r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#7f7f7f" stroke-dasharray="4 3"/>"##,
        (b[0] - b[2] / 2.0) * width,
        (b[1] - b[3] / 2.0) * height,
        b[2] * width,
        b[3] * height
    );
    let h = samples.first().map_or(0, Vec::len).max(1);
    for traj in samples {
        let anchor = w.anchor_pose();
        let line: Vec<&PoseSE3> = std::iter::once(anchor).chain(traj.iter()).collect();
        path(&mut s, k, &line, r##"stroke="#9467bd" stroke-opacity="0.35" stroke-width="1""##);
        for (step, p) in traj.iter().enumerate() {
            let opacity = 0.9 - 0.75 * step as f64 / (h.max(2) - 1) as f64;
            axes(&mut s, k, p, opacity);
        }
    }
    let gt: Vec<&PoseSE3> = std::iter::once(w.anchor_pose()).chain(&w.future_poses).collect();
    path(&mut s, k, &gt, r##"stroke="#000000" stroke-width="1.5" stroke-dasharray="5 3""##);
    let ctx: Vec<&PoseSE3> = w.context_poses.iter().collect();
    path(&mut s, k, &ctx, r##"stroke="#7f7f7f" stroke-width="2""##);
    for p in &w.context_poses {
        axes(&mut s, k, p, 1.0);
    }
    s.push_str("</svg>\n");
    s
}
