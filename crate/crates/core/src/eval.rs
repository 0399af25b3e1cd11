//! Depth-quality metrics with median scaling, and trajectory drift.

use crate::align::median;
use crate::geometry::Pose;
use crate::raster::{Mask, RasterMap};
use crate::{Error, Result};

/// Depths are clamped to this before evaluation.
pub const DEFAULT_DEPTH_CAP: f64 = 80.0;

/// Segment lengths in scene units; a desk-scale stand-in for the usual
/// 100 m to 800 m road segments.
pub const DEFAULT_SEGMENTS: [f64; 3] = [2.0, 4.0, 8.0];

/// Label written next to odometry results: the drift protocol here is a
/// simplified variant of the KITTI one (every start frame, first frame at or
/// beyond the segment length, no interpolation).
pub const ODOMETRY_PROTOCOL: &str = "simplified-kitti";

pub const DEPTH_METRICS_HEADER: [&str; 7] = ["Abs Rel", "Sq Rel", "RMSE", "RMSE log", "d1", "d2", "d3"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl DepthMetrics {
    pub fn to_array(&self) -> [f64; 7] {
        [
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.delta1,
            self.delta2,
            self.delta3,
        ]
    }

    /// One CSV row in [`DEPTH_METRICS_HEADER`] order.
    pub fn csv_row(&self) -> Vec<String> {
        self.to_array().iter().map(f64::to_string).collect()
    }
}

fn masked_pairs(pred: &RasterMap, gt: &RasterMap, mask: &Mask) -> Result<Vec<(f64, f64)>> {
    if !pred.same_shape(gt) || pred.channels() != 1 {
        return Err(Error::ShapeMismatch("pred and gt must be single-channel maps of equal size".into()));
    }
    if mask.width() != gt.width() || mask.height() != gt.height() {
        return Err(Error::ShapeMismatch("mask does not match the depth maps".into()));
    }
    let pairs: Vec<(f64, f64)> = mask
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| (pred.data()[i], gt.data()[i]))
        .collect();
    if pairs.is_empty() {
        return Err(Error::EmptyMask);
    }
    if let Some(&(p, g)) = pairs.iter().find(|(p, g)| !(*p > 0.0 && *g > 0.0)) {
        return Err(Error::NonPositiveDepth(if p > 0.0 { g } else { p }));
    }
    Ok(pairs)
}

/// Rescales `pred` by `median(gt) / median(pred)` over the mask. Returns the
/// scaled map (every pixel scaled) and the factor.
pub fn median_scale(pred: &RasterMap, gt: &RasterMap, mask: &Mask) -> Result<(RasterMap, f64)> {
    let pairs = masked_pairs(pred, gt, mask)?;
    let mp = median(pairs.iter().map(|p| p.0).collect());
    let mg = median(pairs.iter().map(|p| p.1).collect());
    let s = mg / mp;
    Ok((pred.scale(s), s))
}

/// Standard depth metrics over the mask, after clamping both maps to `cap`.
/// The accuracy thresholds are strict: a ratio of exactly 1.25 fails d1.
pub fn depth_metrics(pred: &RasterMap, gt: &RasterMap, mask: &Mask, cap: f64) -> Result<DepthMetrics> {
    if !(cap > 0.0) {
        return Err(Error::Config(format!("depth cap must be > 0, got {cap}")));
    }
    let pairs = masked_pairs(pred, gt, mask)?;
    let n = pairs.len() as f64;
    let mut m = DepthMetrics {
        abs_rel: 0.0,
        sq_rel: 0.0,
        rmse: 0.0,
        rmse_log: 0.0,
        delta1: 0.0,
        delta2: 0.0,
        delta3: 0.0,
    };
    let thresholds = [1.25, 1.25f64.powi(2), 1.25f64.powi(3)];
    for &(p, g) in &pairs {
        let (p, g) = (p.min(cap), g.min(cap));
        let e = p - g;
        m.abs_rel += e.abs() / g;
        m.sq_rel += e * e / g;
        m.rmse += e * e;
        m.rmse_log += (p.ln() - g.ln()).powi(2);
        let r = (p / g).max(g / p);
        m.delta1 += f64::from(u8::from(r < thresholds[0]));
        m.delta2 += f64::from(u8::from(r < thresholds[1]));
        m.delta3 += f64::from(u8::from(r < thresholds[2]));
    }
    m.abs_rel /= n;
    m.sq_rel /= n;
    m.rmse = (m.rmse / n).sqrt();
    m.rmse_log = (m.rmse_log / n).sqrt();
    m.delta1 /= n;
    m.delta2 /= n;
    m.delta3 /= n;
    Ok(m)
}

// ---------------------------------------------------------------------------
// odometry

/// Drift averaged over all segments of one length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentDrift {
    pub length: f64,
    pub count: usize,
    /// Percent of segment length.
    pub t_err: f64,
    /// Degrees per unit length.
    pub r_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OdometryMetrics {
    /// Percent, averaged over every evaluated segment.
    pub t_err: f64,
    /// Degrees per unit length.
    pub r_err: f64,
    pub segments: Vec<SegmentDrift>,
}

pub const ODOMETRY_HEADER: [&str; 5] = ["protocol", "segment", "count", "t_err", "r_err"];

impl OdometryMetrics {
    /// One row per segment length, then an `all` row.
    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        let mut rows: Vec<Vec<String>> = self
            .segments
            .iter()
            .map(|s| {
                vec![
                    ODOMETRY_PROTOCOL.to_string(),
                    s.length.to_string(),
                    s.count.to_string(),
                    s.t_err.to_string(),
                    s.r_err.to_string(),
                ]
            })
            .collect();
        let total: usize = self.segments.iter().map(|s| s.count).sum();
        rows.push(vec![
            ODOMETRY_PROTOCOL.to_string(),
            "all".to_string(),
            total.to_string(),
            self.t_err.to_string(),
            self.r_err.to_string(),
        ]);
        rows
    }
}

/// Cumulative path length of the camera centres.
fn path_lengths(traj: &[Pose]) -> Vec<f64> {
    let mut acc = vec![0.0; traj.len()];
    for i in 1..traj.len() {
        acc[i] = acc[i - 1] + (traj[i].translation - traj[i - 1].translation).norm();
    }
    acc
}

/// Relative-pose drift between two camera-to-world trajectories.
///
/// For every start frame `i` and segment length `L`, the end frame is the
/// first `j` whose ground-truth path length from `i` reaches `L`. The error
/// is `inv(P_i^-1 P_j) (G_i^-1 G_j)`; its translation norm over `L` (in
/// percent) and rotation angle over `L` (in degrees) are averaged.
pub fn odometry_metrics(pred: &[Pose], gt: &[Pose], segment_lengths: &[f64]) -> Result<OdometryMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "trajectories have {} and {} poses",
            pred.len(),
            gt.len()
        )));
    }
    if gt.len() < 2 {
        return Err(Error::TrajectoryTooShort(format!("{} poses", gt.len())));
    }
    if segment_lengths.is_empty() || segment_lengths.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::Config("segment lengths must be nonempty and positive".into()));
    }
    let dist = path_lengths(gt);
    let mut segments = Vec::new();
    let (mut t_sum, mut r_sum, mut total) = (0.0, 0.0, 0usize);
    for &len in segment_lengths {
        let (mut t, mut r, mut count) = (0.0, 0.0, 0usize);
        for i in 0..gt.len() {
            // small slack so lengths built from float sums still match
            let Some(j) = (i + 1..gt.len()).find(|&j| dist[j] - dist[i] >= len * (1.0 - 1e-9)) else {
                break;
            };
            let rel_gt = gt[i].exp().inverse().compose(&gt[j].exp());
            let rel_pred = pred[i].exp().inverse().compose(&pred[j].exp());
            let e = rel_pred.inverse().compose(&rel_gt).to_pose();
            t += e.translation.norm() / len * 100.0;
            r += e.rotation_angle().to_degrees() / len;
            count += 1;
        }
        if count > 0 {
            t_sum += t;
            r_sum += r;
            total += count;
            segments.push(SegmentDrift {
                length: len,
                count,
                t_err: t / count as f64,
                r_err: r / count as f64,
            });
        }
    }
    if total == 0 {
        return Err(Error::TrajectoryTooShort(format!(
            "path length {} is shorter than every segment",
            dist[dist.len() - 1]
        )));
    }
    Ok(OdometryMetrics {
        t_err: t_sum / total as f64,
        r_err: r_sum / total as f64,
        segments,
    })
}

/// Scales every predicted translation by the single factor
/// `s = sum <t_pred, t_gt> / sum |t_pred|^2` minimizing the squared
/// translation error. Returns the aligned trajectory and `s`.
pub fn global_scale_align(pred: &[Pose], gt: &[Pose]) -> Result<(Vec<Pose>, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "trajectories have {} and {} poses",
            pred.len(),
            gt.len()
        )));
    }
    if gt.len() < 2 {
        return Err(Error::TrajectoryTooShort(format!("{} poses", gt.len())));
    }
    let num: f64 = pred.iter().zip(gt).map(|(p, g)| p.translation.dot(&g.translation)).sum();
    let den: f64 = pred.iter().map(|p| p.translation.norm_squared()).sum();
    if !(den > 0.0) {
        return Err(Error::Config("predicted trajectory has no translation to scale".into()));
    }
    let s = num / den;
    let aligned = pred
        .iter()
        .map(|p| Pose::new(p.axis_angle, p.translation * s))
        .collect();
    Ok((aligned, s))
}
