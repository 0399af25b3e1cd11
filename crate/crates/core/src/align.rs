//! Direct alignment: pose and depth recovered by minimizing the cross-view
//! loss, plus landscape and convergence-basin probes.
//!
//! Both optimizers work on the L1-only objective (see
//! [`LossConfig::l1_only`]) and run coarse-to-fine over a box pyramid whose
//! intrinsics follow [`Intrinsics::half_resolution`]. Photometric and
//! feature-metric problems share every optimizer setting; they differ only
//! in whether feature maps are attached to the views.

use nalgebra::{Matrix6, SVector, Vector2};
use rayon::prelude::*;

use crate::featurenet::{self, AutoencoderParams};
use crate::geometry::{self, Intrinsics, Pose, Rigid};
use crate::losses::{self, LossConfig, ViewBundle};
use crate::raster::{self, RasterMap};
use crate::synth::RenderedPair;
use crate::{Error, Result};

type Vector6 = SVector<f64, 6>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoseSolver {
    GradientDescent,
    GaussNewton,
}

/// Optimizer settings shared by both loss arms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignConfig {
    /// Pyramid levels, finest first; at least 1.
    pub levels: usize,
    pub loss: LossConfig,
    pub solver: PoseSolver,
    /// Iterations per pyramid level.
    pub pose_max_iters: usize,
    /// Stop when the twist update norm falls below this.
    pub pose_tol: f64,
    /// Residual floor of the IRLS weights `1 / max(|e|, delta)`.
    pub irls_delta: f64,
    /// Iterations per pyramid level.
    pub depth_max_iters: usize,
    /// Initial per-pixel step on log-depth.
    pub depth_step: f64,
    /// Per-pixel stop on `|d dl/dd|`.
    pub depth_grad_tol: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            loss: LossConfig::default(),
            solver: PoseSolver::GaussNewton,
            pose_max_iters: 30,
            pose_tol: 1e-8,
            irls_delta: 1e-6,
            depth_max_iters: 200,
            depth_step: 0.05,
            depth_grad_tol: 1e-9,
        }
    }
}

/// Default convergence tolerances.
pub const TAU_DEPTH: f64 = 0.01;
pub const TAU_ROT_DEG: f64 = 0.1;
/// Fraction of the median scene depth.
pub const TAU_TRANS_REL: f64 = 0.005;

/// One pyramid level of a problem.
#[derive(Clone, Debug)]
pub struct Level {
    pub k: Intrinsics,
    pub target: ViewBundle,
    pub sources: Vec<ViewBundle>,
    pub gt_depth: RasterMap,
}

/// A rendered pair prepared for alignment.
#[derive(Clone, Debug)]
pub struct AlignProblem {
    pub pair: RenderedPair,
    pub cfg: AlignConfig,
    levels: Vec<Level>,
}

fn downsample_views(v: &ViewBundle) -> Result<ViewBundle> {
    Ok(ViewBundle {
        image: raster::downsample2(&v.image)?,
        features: v.features.as_ref().map(raster::downsample2).transpose()?,
    })
}

impl AlignProblem {
    /// Photometric problem (no feature maps).
    pub fn photometric(pair: RenderedPair, cfg: AlignConfig) -> Result<Self> {
        Self::new(pair, None, cfg)
    }

    /// Feature-metric problem with features from `params`' encoder.
    pub fn feature_metric(pair: RenderedPair, params: &AutoencoderParams, cfg: AlignConfig) -> Result<Self> {
        Self::new(pair, Some(params), cfg)
    }

    pub fn new(pair: RenderedPair, features: Option<&AutoencoderParams>, mut cfg: AlignConfig) -> Result<Self> {
        if cfg.levels == 0 {
            return Err(Error::Config("pyramid levels must be >= 1".into()));
        }
        match features {
            None => {
                cfg.loss.use_feature_metric = false;
                cfg.loss.use_photometric = true;
            }
            Some(_) => cfg.loss.use_feature_metric = true,
        }
        cfg.loss.validate()?;
        let min = 3usize << (cfg.levels - 1);
        if pair.width() < min || pair.height() < min {
            return Err(Error::DimensionTooSmall {
                width: pair.width(),
                height: pair.height(),
                min,
            });
        }
        let phi = |img: &RasterMap| features.map(|p| featurenet::encode(p, img)).transpose();
        let mut level = Level {
            k: pair.k,
            target: ViewBundle {
                image: pair.target_image.clone(),
                features: phi(&pair.target_image)?,
            },
            sources: pair
                .source_images
                .iter()
                .map(|s| {
                    Ok(ViewBundle {
                        image: s.clone(),
                        features: phi(s)?,
                    })
                })
                .collect::<Result<_>>()?,
            gt_depth: pair.gt_depth.clone(),
        };
        let mut levels = Vec::with_capacity(cfg.levels);
        for l in 0..cfg.levels {
            if l > 0 {
                level = Level {
                    k: level.k.half_resolution(),
                    target: downsample_views(&level.target)?,
                    sources: level.sources.iter().map(downsample_views).collect::<Result<_>>()?,
                    gt_depth: raster::downsample2(&level.gt_depth)?,
                };
            }
            levels.push(level.clone());
        }
        Ok(Self { pair, cfg, levels })
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn uses_features(&self) -> bool {
        self.cfg.loss.use_feature_metric
    }

    /// Median of the ground-truth depth map.
    pub fn median_depth(&self) -> f64 {
        median(self.pair.gt_depth.data().to_vec())
    }

    /// L1-only loss at level 0 for the given depth and poses.
    pub fn loss(&self, depth: &RasterMap, poses: &[Pose]) -> Result<f64> {
        let l = &self.levels[0];
        Ok(losses::cross_view_loss(&l.target, &l.sources, &l.k, depth, poses, &self.cfg.loss.l1_only())?.total)
    }
}

pub(crate) fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Rotation error in degrees and translation error between two poses.
pub fn pose_error(estimate: &Pose, truth: &Pose) -> (f64, f64) {
    let d = estimate.compose(&truth.inverse());
    (d.rotation_angle().to_degrees(), (estimate.translation - truth.translation).norm())
}

// ---------------------------------------------------------------------------
// pose

/// One row of a pose optimization trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseTraceRow {
    pub level: usize,
    pub iter: usize,
    /// Loss of the trial state.
    pub loss: f64,
    pub accepted: bool,
    /// Loss of the current state after this iteration.
    pub accepted_loss: f64,
    pub lambda: f64,
    pub step_norm: f64,
}

pub const POSE_TRACE_HEADER: [&str; 7] = ["level", "iter", "loss", "accepted", "accepted_loss", "lambda", "step_norm"];

pub fn pose_trace_rows(trace: &[PoseTraceRow]) -> Vec<Vec<String>> {
    trace
        .iter()
        .map(|r| {
            vec![
                r.level.to_string(),
                r.iter.to_string(),
                r.loss.to_string(),
                u8::from(r.accepted).to_string(),
                r.accepted_loss.to_string(),
                r.lambda.to_string(),
                r.step_norm.to_string(),
            ]
        })
        .collect()
}

/// Mean L1 loss plus per-source normal equations and gradient.
struct PoseSystem {
    loss: f64,
    h: Vec<Matrix6<f64>>,
    b: Vec<Vector6>,
    grad: Vec<Vector6>,
}

// Per-row partial sums, reduced in row order for determinism.
#[derive(Clone)]
struct RowAcc {
    loss: f64,
    count: usize,
    h: Vec<Matrix6<f64>>,
    b: Vec<Vector6>,
    g: Vec<Vector6>,
}

impl RowAcc {
    fn new(s: usize) -> Self {
        Self {
            loss: 0.0,
            count: 0,
            h: vec![Matrix6::zeros(); s],
            b: vec![Vector6::zeros(); s],
            g: vec![Vector6::zeros(); s],
        }
    }
}

fn pose_system(level: &Level, depth: &RasterMap, poses: &[Pose], cfg: &AlignConfig, want_system: bool) -> Result<PoseSystem> {
    let lc = cfg.loss.l1_only();
    let warped: Vec<losses::WarpedSource> = level
        .sources
        .iter()
        .zip(poses)
        .map(|(s, p)| losses::warp_source(&level.target, s, &level.k, depth, p, lc.use_feature_metric))
        .collect();
    let rigids: Vec<Rigid> = poses.iter().map(Pose::exp).collect();
    let (w, h) = (depth.width(), depth.height());
    let ci = level.target.image.channels();
    let inv_ci = 1.0 / ci as f64;
    let ns = poses.len();
    let delta = cfg.irls_delta;

    // (weight, residual, image-plane derivative) per residual component
    let components = |i: usize, s: usize, out: &mut Vec<(f64, f64, Vector2<f64>)>| {
        out.clear();
        let ws = &warped[s];
        if lc.use_photometric {
            for c in 0..ci {
                let j = i * ci + c;
                out.push((
                    inv_ci,
                    ws.image.data()[j] - level.target.image.data()[j],
                    Vector2::new(ws.image_du.data()[j], ws.image_dv.data()[j]),
                ));
            }
        }
        if lc.use_feature_metric {
            let ft = level.target.features.as_ref().unwrap();
            let (fs, fu, fv) = (
                ws.features.as_ref().unwrap(),
                ws.features_du.as_ref().unwrap(),
                ws.features_dv.as_ref().unwrap(),
            );
            let cf = ft.channels();
            for c in 0..cf {
                let j = i * cf + c;
                out.push((1.0, fs.data()[j] - ft.data()[j], Vector2::new(fu.data()[j], fv.data()[j])));
            }
        }
    };

    let rows: Vec<Result<RowAcc>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut acc = RowAcc::new(ns);
            let mut comp = Vec::new();
            for x in 0..w {
                let i = y * w + x;
                let mut best: Option<(usize, f64)> = None;
                for s in 0..ns {
                    if !warped[s].valid.data()[i] {
                        continue;
                    }
                    components(i, s, &mut comp);
                    let v: f64 = comp.iter().map(|(c, e, _)| c * e.abs()).sum();
                    if best.is_none_or(|(_, b)| v < b) {
                        best = Some((s, v));
                    }
                }
                let Some((s, v)) = best else { continue };
                acc.loss += v;
                acc.count += 1;
                if !want_system {
                    continue;
                }
                components(i, s, &mut comp);
                if comp.iter().all(|(_, _, d)| *d == Vector2::zeros()) {
                    continue;
                }
                let jp = geometry::warp_jacobian_pose_rigid(&level.k, &rigids[s], x as f64, y as f64, depth.data()[i])?;
                for (c, e, d) in &comp {
                    let row: Vector6 = jp.transpose() * d;
                    let sg = if *e > 0.0 {
                        1.0
                    } else if *e < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    acc.g[s] += row * (c * sg);
                    let wt = c / e.abs().max(delta);
                    acc.h[s] += row * row.transpose() * wt;
                    acc.b[s] += row * (wt * e);
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = RowAcc::new(ns);
    for r in rows {
        let r = r?;
        total.loss += r.loss;
        total.count += r.count;
        for s in 0..ns {
            total.h[s] += r.h[s];
            total.b[s] += r.b[s];
            total.g[s] += r.g[s];
        }
    }
    if total.count == 0 {
        return Err(Error::EmptyValidSet);
    }
    let n = total.count as f64;
    let loss = total.loss / n;
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("non-finite pose loss {loss}")));
    }
    Ok(PoseSystem {
        loss,
        h: total.h,
        b: total.b,
        grad: total.g.into_iter().map(|g| g / n).collect(),
    })
}

/// Jointly refines every source pose with the depth held at ground truth.
pub fn optimize_poses(
    problem: &AlignProblem,
    init: &[Pose],
    max_iters: usize,
    tol: f64,
) -> Result<(Vec<Pose>, Vec<PoseTraceRow>)> {
    if init.len() != problem.pair.gt_poses.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} initial poses for {} sources",
            init.len(),
            problem.pair.gt_poses.len()
        )));
    }
    let cfg = &problem.cfg;
    let mut poses = init.to_vec();
    let mut trace = Vec::new();
    for (li, level) in problem.levels.iter().enumerate().rev() {
        let mut sys = pose_system(level, &level.gt_depth, &poses, cfg, true)?;
        let mut lambda = 1e-3;
        let mut gd_step = 1.0;
        for iter in 0..max_iters {
            let steps: Vec<Vector6> = match cfg.solver {
                PoseSolver::GaussNewton => sys
                    .h
                    .iter()
                    .zip(&sys.b)
                    .map(|(h, b)| {
                        let mut a = *h;
                        for d in 0..6 {
                            a[(d, d)] += lambda * h[(d, d)].max(1e-12);
                        }
                        a.cholesky().map_or(Vector6::zeros(), |c| -c.solve(b))
                    })
                    .collect(),
                PoseSolver::GradientDescent => sys.grad.iter().map(|g| -g * gd_step).collect(),
            };
            let step_norm = steps.iter().map(|s| s.norm_squared()).sum::<f64>().sqrt();
            if step_norm < tol || !step_norm.is_finite() {
                break;
            }
            let trial: Vec<Pose> = steps
                .iter()
                .zip(&poses)
                .map(|(s, p)| Pose::from_array((*s).into()).compose(p))
                .collect();
            let trial_loss = match pose_system(level, &level.gt_depth, &trial, cfg, false) {
                Ok(t) => t.loss,
                Err(Error::EmptyValidSet) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            let accepted = trial_loss < sys.loss;
            if accepted {
                poses = trial;
                sys = pose_system(level, &level.gt_depth, &poses, cfg, true)?;
                lambda = (lambda * 0.1).max(1e-12);
                gd_step *= 1.5;
            } else {
                lambda *= 10.0;
                gd_step *= 0.5;
            }
            trace.push(PoseTraceRow {
                level: li,
                iter,
                loss: trial_loss,
                accepted,
                accepted_loss: sys.loss,
                lambda,
                step_norm,
            });
            if lambda > 1e12 || gd_step < 1e-15 {
                break;
            }
        }
    }
    Ok((poses, trace))
}

/// Single-source form of [`optimize_poses`].
pub fn optimize_pose(
    problem: &AlignProblem,
    init: Pose,
    max_iters: usize,
    tol: f64,
) -> Result<(Pose, Vec<PoseTraceRow>)> {
    if problem.pair.gt_poses.len() != 1 {
        return Err(Error::Config("optimize_pose needs a single source view; use optimize_poses".into()));
    }
    let (p, t) = optimize_poses(problem, &[init], max_iters, tol)?;
    Ok((p[0], t))
}

/// Gradient of the level-0 L1 loss with respect to each source pose.
pub fn pose_gradient(problem: &AlignProblem, poses: &[Pose]) -> Result<Vec<Vector6>> {
    let l = &problem.levels[0];
    Ok(pose_system(l, &l.gt_depth, poses, &problem.cfg, true)?.grad)
}

// ---------------------------------------------------------------------------
// depth

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthTraceRow {
    pub level: usize,
    pub iter: usize,
    /// Mean per-pixel L1 loss over valid pixels before the update.
    pub mean_loss: f64,
    /// Pixels still being updated.
    pub active: usize,
    /// Pixels whose trial step was accepted.
    pub accepted: usize,
}

pub const DEPTH_TRACE_HEADER: [&str; 5] = ["level", "iter", "mean_loss", "active", "accepted"];

pub fn depth_trace_rows(trace: &[DepthTraceRow]) -> Vec<Vec<String>> {
    trace
        .iter()
        .map(|r| {
            vec![
                r.level.to_string(),
                r.iter.to_string(),
                r.mean_loss.to_string(),
                r.active.to_string(),
                r.accepted.to_string(),
            ]
        })
        .collect()
}

/// Per-pixel value and log-depth derivative of the L1 objective.
fn depth_eval(level: &Level, depth: &RasterMap, poses: &[Pose], cfg: &LossConfig) -> Result<Vec<Option<(f64, f64)>>> {
    let eval = losses::evaluate_l1(&level.target, &level.sources, &level.k, depth, poses, cfg)?;
    let w = depth.width();
    eval.pixels
        .iter()
        .enumerate()
        .map(|(i, px)| {
            px.map(|px| {
                let d = depth.data()[i];
                let j = geometry::warp_jacobian_depth_rigid(
                    &level.k,
                    &eval.rigids[px.source],
                    (i % w) as f64,
                    (i / w) as f64,
                    d,
                )?;
                Ok((px.value, d * px.d_pixel.dot(&j)))
            })
            .transpose()
        })
        .collect()
}

/// Per-pixel log-depth descent with the poses held at ground truth.
///
/// Each pixel's L1 loss depends only on its own depth, so pixels are updated
/// independently: `d <- d exp(-eta d dl/dd)`, with a per-pixel step `eta`
/// (starting at `step`) that grows on accepted moves and halves on rejected
/// ones. A pixel freezes once `|d dl/dd| < depth_grad_tol`. Coarser levels
/// pass their log-depth change to the next level by nearest-neighbour
/// upsampling.
pub fn optimize_depth(
    problem: &AlignProblem,
    init_depth: &RasterMap,
    max_iters: usize,
    step: f64,
) -> Result<(RasterMap, Vec<DepthTraceRow>)> {
    let l0 = &problem.levels[0];
    if !init_depth.same_dims(&l0.gt_depth) || init_depth.channels() != 1 {
        return Err(Error::ShapeMismatch("initial depth must match the target image".into()));
    }
    if let Some(&d) = init_depth.data().iter().find(|&&d| !(d > 0.0)) {
        return Err(Error::NonPositiveDepth(d));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Config(format!("depth step must be > 0, got {step}")));
    }
    let poses = &problem.pair.gt_poses;
    let cfg = problem.cfg.loss.l1_only();
    let nlev = problem.levels.len();
    // initial log-depth per level, by repeated box downsampling
    let mut inits = vec![init_depth.map(f64::ln)];
    for l in 1..nlev {
        inits.push(raster::downsample2(&inits[l - 1])?);
    }
    let mut carry: Option<RasterMap> = None; // log-depth change from the coarser level
    let mut trace = Vec::new();
    let mut result = None;
    for li in (0..nlev).rev() {
        let level = &problem.levels[li];
        let (w, h) = (level.gt_depth.width(), level.gt_depth.height());
        let mut logd = inits[li].clone();
        if let Some(c) = carry.take() {
            for y in 0..h {
                for x in 0..w {
                    let (cx, cy) = ((x / 2).min(c.width() - 1), (y / 2).min(c.height() - 1));
                    let v = logd.get(x, y, 0) + c.get(cx, cy, 0);
                    logd.set(x, y, 0, v);
                }
            }
        }
        let n = w * h;
        let mut eta = vec![step; n];
        let mut active = vec![true; n];
        for iter in 0..max_iters {
            let depth = logd.map(f64::exp);
            let cur = depth_eval(level, &depth, poses, &cfg)?;
            let mut sum = 0.0;
            let mut valid = 0usize;
            let mut trial = logd.clone();
            let mut moving = 0;
            for i in 0..n {
                let Some((v, g)) = cur[i] else {
                    continue;
                };
                if !v.is_finite() || !g.is_finite() {
                    return Err(Error::Diverged(format!("non-finite depth loss at pixel {i}")));
                }
                sum += v;
                valid += 1;
                if !active[i] {
                    continue;
                }
                if g.abs() < problem.cfg.depth_grad_tol || eta[i] < 1e-12 {
                    active[i] = false;
                    continue;
                }
                // cap a single move at a factor of e^0.5
                let delta = (-eta[i] * g).clamp(-0.5, 0.5);
                trial.data_mut()[i] += delta;
                moving += 1;
            }
            if moving == 0 {
                trace.push(DepthTraceRow {
                    level: li,
                    iter,
                    mean_loss: if valid > 0 { sum / valid as f64 } else { f64::NAN },
                    active: 0,
                    accepted: 0,
                });
                break;
            }
            let next = depth_eval(level, &trial.map(f64::exp), poses, &cfg)?;
            let mut accepted = 0;
            for i in 0..n {
                if trial.data()[i] == logd.data()[i] {
                    continue;
                }
                let better = matches!((cur[i], next[i]), (Some((v, _)), Some((vn, _))) if vn < v);
                if better {
                    logd.data_mut()[i] = trial.data()[i];
                    eta[i] *= 1.5;
                    accepted += 1;
                } else {
                    eta[i] *= 0.5;
                }
            }
            trace.push(DepthTraceRow {
                level: li,
                iter,
                mean_loss: if valid > 0 { sum / valid as f64 } else { f64::NAN },
                active: moving,
                accepted,
            });
        }
        if li == 0 {
            result = Some(logd.map(f64::exp));
        } else {
            // total change at this level, including what the coarser level passed down
            carry = Some(RasterMap::from_vec(
                w,
                h,
                1,
                logd.data().iter().zip(inits[li].data()).map(|(a, b)| a - b).collect(),
            )?);
        }
    }
    Ok((result.expect("level 0 runs last"), trace))
}

// ---------------------------------------------------------------------------
// probes

/// One sample of a landscape sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LandscapeRow {
    pub depth: f64,
    /// Photometric (L1 + SSIM) loss at the probed pixel; `None` if the pixel
    /// warps outside every source.
    pub loss_ph: Option<f64>,
    /// Feature-metric loss at the probed pixel; `None` without features.
    pub loss_fm: Option<f64>,
}

pub const LANDSCAPE_HEADER: [&str; 3] = ["depth", "loss_ph", "loss_fm"];

pub fn landscape_rows(rows: &[LandscapeRow]) -> Vec<Vec<String>> {
    let cell = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    rows.iter()
        .map(|r| vec![r.depth.to_string(), cell(r.loss_ph), cell(r.loss_fm)])
        .collect()
}

/// Sweeps the depth of one pixel over `depth_range` (inclusive, evenly
/// spaced) with every other pixel at ground truth and the poses fixed at
/// ground truth, recording that pixel's photometric and feature-metric loss.
pub fn landscape_probe(
    problem: &AlignProblem,
    pixel: (usize, usize),
    depth_range: (f64, f64),
    samples: usize,
) -> Result<Vec<LandscapeRow>> {
    let l = &problem.levels[0];
    let (w, h) = (l.gt_depth.width(), l.gt_depth.height());
    let (px, py) = pixel;
    if px >= w || py >= h {
        return Err(Error::InvalidPixel {
            u: px,
            v: py,
            width: w,
            height: h,
        });
    }
    if samples < 3 {
        return Err(Error::Config(format!("landscape needs >= 3 samples, got {samples}")));
    }
    let (a, b) = depth_range;
    if !(a > 0.0 && b > a && b.is_finite()) {
        return Err(Error::Config(format!("invalid depth range {a}:{b}")));
    }
    let base = problem.cfg.loss;
    let ph_cfg = LossConfig {
        use_photometric: true,
        use_feature_metric: false,
        ..base
    };
    let fm_cfg = LossConfig {
        use_photometric: false,
        use_feature_metric: true,
        ..base
    };
    let i = py * w + px;
    let pixel_min = |per: &[losses::SourceLoss]| -> Option<f64> {
        per.iter()
            .filter(|s| s.valid.data()[i])
            .map(|s| s.combined(i))
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.min(v))))
    };
    (0..samples)
        .into_par_iter()
        .map(|k| {
            let d = a + (b - a) * k as f64 / (samples - 1) as f64;
            let mut depth = l.gt_depth.clone();
            depth.data_mut()[i] = d;
            let poses = &problem.pair.gt_poses;
            let ph = losses::cross_view_per_source(&l.target, &l.sources, &l.k, &depth, poses, &ph_cfg)?;
            let fm = if problem.uses_features() {
                let per = losses::cross_view_per_source(&l.target, &l.sources, &l.k, &depth, poses, &fm_cfg)?;
                pixel_min(&per)
            } else {
                None
            };
            Ok(LandscapeRow {
                depth: d,
                loss_ph: pixel_min(&ph),
                loss_fm: fm,
            })
        })
        .collect()
}

/// What a basin sweep perturbs.
#[derive(Clone, Debug, PartialEq)]
pub enum BasinSpec {
    /// Whole depth map initialized to `k * gt`; one basin per listed pixel.
    DepthScale { pixels: Vec<(usize, usize)> },
    /// Source pose initialized to `exp(k * direction) * gt`; one basin.
    PoseRay { direction: [f64; 6] },
}

/// Convergence over a sweep of initializations.
#[derive(Clone, Debug, PartialEq)]
pub struct BasinReport {
    pub spec: BasinSpec,
    pub sweep: Vec<f64>,
    /// `[probe][sweep index]` final loss.
    pub losses: Vec<Vec<f64>>,
    /// `[probe][sweep index]` whether the run ended within tolerance.
    pub converged: Vec<Vec<bool>>,
    /// Per probe: span of the widest contiguous run of converged sweep
    /// values (0 for a single point or none).
    pub widths: Vec<f64>,
}

/// Span of the widest contiguous run of `true` in `converged` over `sweep`.
pub fn basin_width(sweep: &[f64], converged: &[bool]) -> f64 {
    let mut best = 0.0f64;
    let mut start: Option<usize> = None;
    for i in 0..=converged.len() {
        let on = i < converged.len() && converged[i];
        match (on, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                best = best.max(sweep[i - 1] - sweep[s]);
                start = None;
            }
            _ => {}
        }
    }
    best
}

/// Runs `run` from every sweep value; `run` returns `(error, loss)` and the
/// sweep point converges when `error <= tol`.
pub fn basin_sweep(
    sweep: &[f64],
    tol: f64,
    mut run: impl FnMut(f64) -> Result<(f64, f64)>,
) -> Result<(Vec<f64>, Vec<bool>, f64)> {
    let mut losses_out = Vec::with_capacity(sweep.len());
    let mut conv = Vec::with_capacity(sweep.len());
    for &k in sweep {
        let (err, loss) = run(k)?;
        losses_out.push(loss);
        conv.push(err <= tol);
    }
    let w = basin_width(sweep, &conv);
    Ok((losses_out, conv, w))
}

impl BasinReport {
    pub const HEADER: [&'static str; 6] = ["probe", "x", "y", "k", "loss", "converged"];

    /// One row per probe and sweep value.
    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        let mut rows = Vec::new();
        for (p, (ls, cs)) in self.losses.iter().zip(&self.converged).enumerate() {
            let (x, y) = match &self.spec {
                BasinSpec::DepthScale { pixels } => (pixels[p].0.to_string(), pixels[p].1.to_string()),
                BasinSpec::PoseRay { .. } => (String::new(), String::new()),
            };
            for ((k, l), c) in self.sweep.iter().zip(ls).zip(cs) {
                rows.push(vec![
                    p.to_string(),
                    x.clone(),
                    y.clone(),
                    k.to_string(),
                    l.to_string(),
                    u8::from(*c).to_string(),
                ]);
            }
        }
        rows
    }
}

/// Convergence basins: for depth, relative error `<= tol` per pixel; for a
/// pose ray, rotation and translation within `tol` times the defaults
/// ([`TAU_ROT_DEG`], [`TAU_TRANS_REL`] of the median depth); pass `tol = 1`
/// for the defaults.
pub fn basin_measure(problem: &AlignProblem, spec: &BasinSpec, sweep: &[f64], tol: f64) -> Result<BasinReport> {
    if sweep.is_empty() || sweep.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config("basin sweep must be nonempty and strictly increasing".into()));
    }
    let cfg = problem.cfg;
    match spec {
        BasinSpec::DepthScale { pixels } => {
            let gt = &problem.pair.gt_depth;
            let (w, h) = (gt.width(), gt.height());
            if let Some(&(x, y)) = pixels.iter().find(|&&(x, y)| x >= w || y >= h) {
                return Err(Error::InvalidPixel {
                    u: x,
                    v: y,
                    width: w,
                    height: h,
                });
            }
            if sweep[0] <= 0.0 {
                return Err(Error::Config("depth scale sweep must be positive".into()));
            }
            let runs: Vec<(RasterMap, Vec<Option<(f64, f64)>>)> = sweep
                .iter()
                .map(|&k| {
                    let (d, _) = optimize_depth(problem, &gt.scale(k), cfg.depth_max_iters, cfg.depth_step)?;
                    let l = &problem.levels[0];
                    let vals = depth_eval(l, &d, &problem.pair.gt_poses, &cfg.loss.l1_only())?;
                    Ok((d, vals))
                })
                .collect::<Result<_>>()?;
            let mut losses_out = Vec::new();
            let mut converged = Vec::new();
            let mut widths = Vec::new();
            for &(x, y) in pixels {
                let i = y * w + x;
                let ls: Vec<f64> = runs.iter().map(|(_, v)| v[i].map_or(f64::NAN, |(l, _)| l)).collect();
                let cs: Vec<bool> = runs
                    .iter()
                    .map(|(d, _)| ((d.data()[i] - gt.data()[i]) / gt.data()[i]).abs() <= tol)
                    .collect();
                widths.push(basin_width(sweep, &cs));
                losses_out.push(ls);
                converged.push(cs);
            }
            Ok(BasinReport {
                spec: spec.clone(),
                sweep: sweep.to_vec(),
                losses: losses_out,
                converged,
                widths,
            })
        }
        BasinSpec::PoseRay { direction } => {
            if problem.pair.gt_poses.len() != 1 {
                return Err(Error::Config("pose basin needs a single source view".into()));
            }
            let gt = problem.pair.gt_poses[0];
            let rot_tol = tol * TAU_ROT_DEG;
            let trans_tol = tol * TAU_TRANS_REL * problem.median_depth();
            let (ls, cs, width) = basin_sweep(sweep, 1.0, |k| {
                let d: Vec<f64> = direction.iter().map(|v| v * k).collect();
                let init = Pose::from_array(d.try_into().unwrap()).compose(&gt);
                let (p, trace) = optimize_pose(problem, init, cfg.pose_max_iters, cfg.pose_tol)?;
                let (er, et) = pose_error(&p, &gt);
                let loss = trace.last().map_or(f64::NAN, |t| t.accepted_loss);
                Ok(((er / rot_tol).max(et / trans_tol), loss))
            })?;
            Ok(BasinReport {
                spec: spec.clone(),
                sweep: sweep.to_vec(),
                losses: vec![ls],
                converged: vec![cs],
                widths: vec![width],
            })
        }
    }
}
