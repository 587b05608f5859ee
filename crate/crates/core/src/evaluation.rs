//! Trajectory and map quality metrics: segment-wise relative pose errors,
//! Chamfer/Hausdorff distances, clutter ratio and a recall-style landmark
//! score (`rpcdl`, realized here as the fraction of estimated points within
//! the clutter threshold of the ground truth, i.e. one minus the clutter
//! ratio).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Se2;
use crate::simulator::TimedPose;

/// Default relative-error segment lengths for desk-scale runs, meters.
pub const DESK_SEGMENT_LENGTHS: [f64; 4] = [5.0, 10.0, 20.0, 40.0];
/// The standard long-range segment lengths, meters.
pub const KITTI_SEGMENT_LENGTHS: [f64; 8] =
    [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];
/// Distance past which an estimated landmark counts as clutter, meters.
pub const CLUTTER_THRESHOLD: f64 = 0.65;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentErrors {
    pub length: f64,
    pub translation_pct: f64,
    pub rotation_deg_per_100m: f64,
    pub segments: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OdomErrorReport {
    /// Mean over per-length means, percent.
    pub translation_pct: f64,
    /// Mean over per-length means, degrees per 100 m.
    pub rotation_deg_per_100m: f64,
    pub per_length: Vec<SegmentErrors>,
    pub segments_evaluated: usize,
    /// Set when the trajectory is shorter than the smallest segment.
    pub too_short: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapQualityReport {
    pub chamfer_m: f64,
    pub hausdorff_m: f64,
    pub clutter_ratio: f64,
    pub rpcdl: f64,
    /// Set when the estimated map was empty.
    pub empty_map: bool,
}

/// Time-align two pose streams by nearest timestamp (must agree within
/// 1 ms), returning index pairs.
fn align(est: &[TimedPose], gt: &[TimedPose]) -> Result<Vec<(usize, usize)>> {
    if est.is_empty() || gt.is_empty() {
        return Err(Error::invalid("relative_errors", "empty trajectory"));
    }
    let mut pairs = Vec::with_capacity(gt.len());
    let mut e = 0usize;
    for (gi, g) in gt.iter().enumerate() {
        while e + 1 < est.len()
            && (est[e + 1].t - g.t).abs() <= (est[e].t - g.t).abs()
        {
            e += 1;
        }
        if (est[e].t - g.t).abs() > 1e-3 {
            return Err(Error::invalid(
                "relative_errors",
                format!(
                    "no estimate within 1 ms of ground-truth time {:.6} (closest {:.6})",
                    g.t, est[e].t
                ),
            ));
        }
        pairs.push((e, gi));
    }
    Ok(pairs)
}

/// Segment-wise relative pose errors in the KITTI style: for every start
/// frame and segment length, compare the estimated and ground-truth relative
/// transforms over the first interval whose ground-truth path length exceeds
/// the segment length.
pub fn relative_errors(
    est: &[TimedPose],
    gt: &[TimedPose],
    segment_lengths: &[f64],
) -> Result<OdomErrorReport> {
    let pairs = align(est, gt)?;
    let est_poses: Vec<Se2> = pairs.iter().map(|&(e, _)| est[e].pose).collect();
    let gt_poses: Vec<Se2> = pairs.iter().map(|&(_, g)| gt[g].pose).collect();
    let n = gt_poses.len();
    let mut path = vec![0.0; n];
    for i in 1..n {
        let dx = gt_poses[i].x - gt_poses[i - 1].x;
        let dy = gt_poses[i].y - gt_poses[i - 1].y;
        path[i] = path[i - 1] + (dx * dx + dy * dy).sqrt();
    }

    let mut per_length = Vec::new();
    let mut total_segments = 0usize;
    for &len in segment_lengths {
        let mut tsum = 0.0;
        let mut rsum = 0.0;
        let mut count = 0usize;
        for i in 0..n {
            // First frame whose accumulated ground-truth path length
            // strictly exceeds the segment length.
            let target = path[i] + len;
            let j = match path[i..].iter().position(|&p| p > target) {
                Some(off) => i + off,
                None => break,
            };
            let seg = path[j] - path[i];
            let rel_gt = gt_poses[i].inverse().compose(&gt_poses[j]);
            let rel_est = est_poses[i].inverse().compose(&est_poses[j]);
            let err = rel_est.inverse().compose(&rel_gt);
            tsum += (err.x * err.x + err.y * err.y).sqrt() / seg * 100.0;
            rsum += err.yaw.abs().to_degrees() / seg * 100.0;
            count += 1;
        }
        if count > 0 {
            per_length.push(SegmentErrors {
                length: len,
                translation_pct: tsum / count as f64,
                rotation_deg_per_100m: rsum / count as f64,
                segments: count,
            });
            total_segments += count;
        }
    }
    let too_short = per_length.is_empty();
    let (t, r) = if too_short {
        (0.0, 0.0)
    } else {
        (
            per_length.iter().map(|s| s.translation_pct).sum::<f64>() / per_length.len() as f64,
            per_length.iter().map(|s| s.rotation_deg_per_100m).sum::<f64>()
                / per_length.len() as f64,
        )
    };
    Ok(OdomErrorReport {
        translation_pct: t,
        rotation_deg_per_100m: r,
        per_length,
        segments_evaluated: total_segments,
        too_short,
    })
}

fn nearest_sq(p: [f64; 2], set: &[[f64; 2]]) -> f64 {
    set.iter()
        .map(|q| {
            let dx = p[0] - q[0];
            let dy = p[1] - q[1];
            dx * dx + dy * dy
        })
        .fold(f64::INFINITY, f64::min)
}

/// Symmetric Chamfer distance: mean nearest-neighbor distance averaged over
/// both directions.
pub fn chamfer(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("chamfer", "point sets must be nonempty"));
    }
    let ab: f64 = a.iter().map(|&p| nearest_sq(p, b).sqrt()).sum::<f64>() / a.len() as f64;
    let ba: f64 = b.iter().map(|&p| nearest_sq(p, a).sqrt()).sum::<f64>() / b.len() as f64;
    Ok(0.5 * (ab + ba))
}

/// Symmetric Hausdorff distance: the larger of the two directed maxima of
/// nearest-neighbor distances.
pub fn hausdorff(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("hausdorff", "point sets must be nonempty"));
    }
    let ab = a
        .iter()
        .map(|&p| nearest_sq(p, b))
        .fold(0.0f64, f64::max)
        .sqrt();
    let ba = b
        .iter()
        .map(|&p| nearest_sq(p, a))
        .fold(0.0f64, f64::max)
        .sqrt();
    Ok(ab.max(ba))
}

/// Fraction of estimated points whose nearest ground-truth distance strictly
/// exceeds the threshold. An empty estimated map yields (0, flagged).
pub fn clutter_ratio(map: &[[f64; 2]], gt_map: &[[f64; 2]], threshold: f64) -> Result<(f64, bool)> {
    if gt_map.is_empty() {
        return Err(Error::invalid("clutter_ratio", "ground-truth map is empty"));
    }
    if map.is_empty() {
        return Ok((0.0, true));
    }
    let clutter = map
        .iter()
        .filter(|&&p| nearest_sq(p, gt_map).sqrt() > threshold)
        .count();
    Ok((clutter as f64 / map.len() as f64, false))
}

/// Fraction of estimated points within the threshold of the ground truth
/// (the complement of the clutter ratio at the same threshold). This is an
/// operational stand-in for the landmark-recall score reported alongside
/// the clutter ratio, not a reimplementation of the original definition.
pub fn rpcdl(map: &[[f64; 2]], gt_map: &[[f64; 2]], threshold: f64) -> Result<f64> {
    let (c, _) = clutter_ratio(map, gt_map, threshold)?;
    Ok(1.0 - c)
}

/// Combined map quality metrics at the standard clutter threshold.
pub fn map_quality(map: &[[f64; 2]], gt_map: &[[f64; 2]], threshold: f64) -> Result<MapQualityReport> {
    let (clutter, empty_map) = clutter_ratio(map, gt_map, threshold)?;
    let (chamfer_m, hausdorff_m) = if empty_map {
        (f64::INFINITY, f64::INFINITY)
    } else {
        (chamfer(map, gt_map)?, hausdorff(map, gt_map)?)
    };
    Ok(MapQualityReport {
        chamfer_m,
        hausdorff_m,
        clutter_ratio: clutter,
        rpcdl: 1.0 - clutter,
        empty_map,
    })
}

/// Full evaluation report, serialized to JSON by the command-line interface.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub odometry: OdomErrorReport,
    pub map: Option<MapQualityReport>,
}

/// Plot-ready CSV rows: one line per evaluated segment length.
pub fn report_csv(report: &OdomErrorReport) -> String {
    let mut out = String::from("length_m,translation_pct,rotation_deg_per_100m,segments\n");
    for s in &report.per_length {
        out.push_str(&format!(
            "{},{},{},{}\n",
            s.length, s.translation_pct, s.rotation_deg_per_100m, s.segments
        ));
    }
    out
}

/// Minimal SVG line chart of error versus segment length.
pub fn error_svg(report: &OdomErrorReport) -> String {
    let (w, h, pad) = (480.0, 320.0, 40.0);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    );
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    if !report.per_length.is_empty() {
        let xmax = report.per_length.iter().map(|s| s.length).fold(0.0, f64::max);
        let ymax = report
            .per_length
            .iter()
            .map(|s| s.translation_pct.max(s.rotation_deg_per_100m))
            .fold(1e-9, f64::max);
        let px = |x: f64| pad + (w - 2.0 * pad) * x / xmax;
        let py = |y: f64| h - pad - (h - 2.0 * pad) * y / ymax;
        for (key, color) in [("translation_pct", "#d62728"), ("rotation_deg_per_100m", "#1f77b4")] {
            let pts: Vec<String> = report
                .per_length
                .iter()
                .map(|s| {
                    let y = if key == "translation_pct" {
                        s.translation_pct
                    } else {
                        s.rotation_deg_per_100m
                    };
                    format!("{:.2},{:.2}", px(s.length), py(y))
                })
                .collect();
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
                pts.join(" ")
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{pad}\" y=\"20\" font-size=\"12\">translation % (red), rotation deg/100m (blue); x = segment length m</text>\n"
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
