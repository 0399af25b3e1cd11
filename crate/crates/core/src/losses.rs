//! Cross-view (photometric and feature-metric) and single-view losses.
//!
//! Per-pixel conventions: photometric L1 and SSIM terms average over image
//! channels, the feature-metric L1 sums over feature channels, and derivative
//! operators act per channel before an L1 sum over channels.
//!
//! The analytic gradients [`cross_view_grad_depth`] and
//! [`cross_view_grad_pose`] differentiate the L1-only objective returned by
//! [`LossConfig::l1_only`]; they are exact derivatives of [`cross_view_loss`]
//! evaluated with that configuration (away from L1 kinks, sampling-cell
//! boundaries and argmin switches).

use std::path::Path;

use nalgebra::{SVector, Vector2};

use crate::geometry::{self, Intrinsics, Pose, Rigid};
use crate::raster::{self, grad1, grad2, sample_into, Mask, RasterMap};
use crate::{Error, Result};

/// Loss weights and switches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the discriminative term.
    pub alpha: f64,
    /// Weight of the convergent term.
    pub beta: f64,
    pub ssim_weight: f64,
    pub l1_weight: f64,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
    pub use_feature_metric: bool,
    pub use_photometric: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta: 1e-3,
            ssim_weight: 0.85,
            l1_weight: 0.15,
            ssim_c1: 0.01 * 0.01,
            ssim_c2: 0.03 * 0.03,
            use_feature_metric: true,
            use_photometric: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.alpha, self.beta, self.ssim_weight, self.l1_weight, self.ssim_c1, self.ssim_c2];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        if (self.ssim_weight + self.l1_weight - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "ssim_weight + l1_weight must be 1, got {}",
                self.ssim_weight + self.l1_weight
            )));
        }
        if !self.use_feature_metric && !self.use_photometric {
            return Err(Error::Config("at least one of the cross-view terms must be enabled".into()));
        }
        Ok(())
    }

    pub fn photometric_only() -> Self {
        Self {
            use_feature_metric: false,
            ..Self::default()
        }
    }

    pub fn feature_metric_only() -> Self {
        Self {
            use_photometric: false,
            ..Self::default()
        }
    }

    /// Same switches with the SSIM term dropped: the objective the analytic
    /// gradients and the optimizers work with.
    pub fn l1_only(&self) -> Self {
        Self {
            ssim_weight: 0.0,
            l1_weight: 1.0,
            ..*self
        }
    }
}

/// One named, weighted loss component.
#[derive(Clone, Debug, PartialEq)]
pub struct Term {
    pub name: String,
    pub value: f64,
    pub weight: f64,
}

/// Total, components and per-pixel breakdown of a loss evaluation.
///
/// `total` is the weighted sum of `per_term`. Invalid pixels hold 0 in
/// `per_pixel` and are excluded from the means.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub per_term: Vec<Term>,
    pub per_pixel: RasterMap,
    pub valid_count: usize,
}

impl LossReport {
    fn from_terms(per_term: Vec<Term>, per_pixel: RasterMap, valid_count: usize) -> Self {
        let total = per_term.iter().map(|t| t.weight * t.value).sum();
        Self {
            total,
            per_term,
            per_pixel,
            valid_count,
        }
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.per_term.iter().find(|t| t.name == name).map(|t| t.value)
    }

    /// Rows of `term,name,value`.
    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        let mut rows = vec![vec!["total".into(), "total".into(), self.total.to_string()]];
        for t in &self.per_term {
            rows.push(vec!["term".into(), t.name.clone(), t.value.to_string()]);
            rows.push(vec!["weight".into(), t.name.clone(), t.weight.to_string()]);
        }
        rows.push(vec!["count".into(), "valid_count".into(), self.valid_count.to_string()]);
        rows
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        raster::write_csv(path, &["term", "name", "value"], &self.csv_rows())
    }
}

fn check_mask(mask: &Mask, map: &RasterMap) -> Result<()> {
    mask.check_dims(map, "valid mask")
}

/// Per-pixel SSIM with 3x3 box statistics and the default stabilizers.
pub fn ssim(a: &RasterMap, b: &RasterMap) -> Result<RasterMap> {
    let cfg = LossConfig::default();
    ssim_with(a, b, cfg.ssim_c1, cfg.ssim_c2)
}

/// Per-pixel, per-channel SSIM over 3x3 windows (reflection at the border).
pub fn ssim_with(a: &RasterMap, b: &RasterMap, c1: f64, c2: f64) -> Result<RasterMap> {
    a.check_same_shape(b, "ssim")?;
    let (w, h, ch) = (a.width(), a.height(), a.channels());
    let mut out = RasterMap::zeros(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -1..=1 {
                    let yy = raster::reflect(y as isize + dy, h);
                    for dx in -1..=1 {
                        let xx = raster::reflect(x as isize + dx, w);
                        let va = a.get(xx, yy, c);
                        let vb = b.get(xx, yy, c);
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                let (mu_a, mu_b) = (sa / 9.0, sb / 9.0);
                let var_a = saa / 9.0 - mu_a * mu_a;
                let var_b = sbb / 9.0 - mu_b * mu_b;
                let cov = sab / 9.0 - mu_a * mu_b;
                let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
                let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
                out.set(x, y, c, (num / den).clamp(-1.0, 1.0));
            }
        }
    }
    Ok(out)
}

/// `0.15 * L1 + 0.85 * (1 - SSIM) / 2`, averaged over valid pixels.
pub fn photometric_loss(target: &RasterMap, synthesized: &RasterMap, valid: &Mask) -> Result<LossReport> {
    photometric_loss_with(target, synthesized, valid, &LossConfig::default())
}

pub fn photometric_loss_with(
    target: &RasterMap,
    synthesized: &RasterMap,
    valid: &Mask,
    cfg: &LossConfig,
) -> Result<LossReport> {
    target.check_same_shape(synthesized, "photometric loss")?;
    check_mask(valid, target)?;
    let (l1, dssim) = photometric_parts(target, synthesized, cfg)?;
    let n = valid.count();
    if n == 0 {
        return Err(Error::EmptyValidSet);
    }
    let mut per_pixel = RasterMap::zeros(target.width(), target.height(), 1);
    let (mut sum_l1, mut sum_ssim) = (0.0, 0.0);
    for (i, &ok) in valid.data().iter().enumerate() {
        if ok {
            sum_l1 += l1[i];
            sum_ssim += dssim[i];
            per_pixel.data_mut()[i] = cfg.l1_weight * l1[i] + cfg.ssim_weight * dssim[i];
        }
    }
    Ok(LossReport::from_terms(
        vec![
            Term {
                name: "l1".into(),
                value: sum_l1 / n as f64,
                weight: cfg.l1_weight,
            },
            Term {
                name: "ssim".into(),
                value: sum_ssim / n as f64,
                weight: cfg.ssim_weight,
            },
        ],
        per_pixel,
        n,
    ))
}

// Per-pixel channel-mean L1 and channel-mean (1 - SSIM) / 2; the SSIM part
// is skipped (zeros) when its weight is zero.
fn photometric_parts(target: &RasterMap, synthesized: &RasterMap, cfg: &LossConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let ch = target.channels() as f64;
    let l1: Vec<f64> = target
        .data()
        .chunks_exact(target.channels())
        .zip(synthesized.data().chunks_exact(target.channels()))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / ch)
        .collect();
    let dssim = if cfg.ssim_weight > 0.0 {
        let s = ssim_with(target, synthesized, cfg.ssim_c1, cfg.ssim_c2)?;
        s.data()
            .chunks_exact(target.channels())
            .map(|px| px.iter().map(|v| (1.0 - v) * 0.5).sum::<f64>() / ch)
            .collect()
    } else {
        vec![0.0; l1.len()]
    };
    Ok((l1, dssim))
}

/// Channel-summed L1 between feature maps, averaged over valid pixels.
pub fn feature_metric_loss(phi_t: &RasterMap, phi_s_warped: &RasterMap, valid: &Mask) -> Result<LossReport> {
    phi_t.check_same_shape(phi_s_warped, "feature-metric loss")?;
    check_mask(valid, phi_t)?;
    let n = valid.count();
    if n == 0 {
        return Err(Error::EmptyValidSet);
    }
    let mut per_pixel = RasterMap::zeros(phi_t.width(), phi_t.height(), 1);
    let mut sum = 0.0;
    let c = phi_t.channels();
    for (i, (a, b)) in phi_t
        .data()
        .chunks_exact(c)
        .zip(phi_s_warped.data().chunks_exact(c))
        .enumerate()
    {
        if valid.data()[i] {
            let v: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
            per_pixel.data_mut()[i] = v;
            sum += v;
        }
    }
    Ok(LossReport::from_terms(
        vec![Term {
            name: "fm".into(),
            value: sum / n as f64,
            weight: 1.0,
        }],
        per_pixel,
        n,
    ))
}

/// Image and optional feature map of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBundle {
    pub image: RasterMap,
    pub features: Option<RasterMap>,
}

impl ViewBundle {
    pub fn image_only(image: RasterMap) -> Self {
        Self { image, features: None }
    }

    pub fn with_features(image: RasterMap, features: RasterMap) -> Self {
        Self {
            image,
            features: Some(features),
        }
    }
}

/// A source view resampled into the target frame.
#[derive(Clone, Debug)]
pub struct WarpedSource {
    /// Source image at the warped coordinates (target values where invalid).
    pub image: RasterMap,
    pub image_du: RasterMap,
    pub image_dv: RasterMap,
    pub features: Option<RasterMap>,
    pub features_du: Option<RasterMap>,
    pub features_dv: Option<RasterMap>,
    pub valid: Mask,
}

fn validate_views(
    target: &ViewBundle,
    sources: &[ViewBundle],
    depth: &RasterMap,
    poses: &[Pose],
    cfg: &LossConfig,
) -> Result<()> {
    cfg.validate()?;
    if sources.is_empty() {
        return Err(Error::Config("cross-view loss needs at least one source view".into()));
    }
    if sources.len() != poses.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} source views but {} poses",
            sources.len(),
            poses.len()
        )));
    }
    if depth.channels() != 1 || !depth.same_dims(&target.image) {
        return Err(Error::ShapeMismatch("depth must be one channel with the target's dimensions".into()));
    }
    let check_features = |view: &ViewBundle| -> Result<()> {
        match &view.features {
            Some(f) if f.same_dims(&view.image) => Ok(()),
            Some(_) => Err(Error::ShapeMismatch("feature map dims differ from its image".into())),
            None if cfg.use_feature_metric => {
                Err(Error::Config("feature-metric loss enabled but a view has no feature map".into()))
            }
            None => Ok(()),
        }
    };
    check_features(target)?;
    for s in sources {
        s.image.check_same_shape(&target.image, "source image")?;
        check_features(s)?;
        if cfg.use_feature_metric {
            let (a, b) = (s.features.as_ref().unwrap(), target.features.as_ref().unwrap());
            a.check_same_shape(b, "source features")?;
        }
    }
    Ok(())
}

/// Resamples `source` at the target pixels warped by `depth` and `pose`.
pub fn warp_source(
    target: &ViewBundle,
    source: &ViewBundle,
    k: &Intrinsics,
    depth: &RasterMap,
    pose: &Pose,
    with_features: bool,
) -> WarpedSource {
    let rigid = pose.exp();
    let (w, h, ci) = (target.image.width(), target.image.height(), target.image.channels());
    let mut image = target.image.clone();
    let mut image_du = RasterMap::zeros(w, h, ci);
    let mut image_dv = RasterMap::zeros(w, h, ci);
    let feats = if with_features { source.features.as_ref() } else { None };
    let cf = feats.map_or(0, |f| f.channels());
    let mut features = feats.map(|_| target.features.clone().unwrap_or_else(|| RasterMap::zeros(w, h, cf)));
    let mut features_du = feats.map(|_| RasterMap::zeros(w, h, cf));
    let mut features_dv = feats.map(|_| RasterMap::zeros(w, h, cf));
    let mut valid = Mask::empty(w, h);
    let (mut vi, mut dui, mut dvi) = (vec![0.0; ci], vec![0.0; ci], vec![0.0; ci]);
    let (mut vf, mut duf, mut dvf) = (vec![0.0; cf], vec![0.0; cf], vec![0.0; cf]);
    for y in 0..h {
        for x in 0..w {
            let wp = geometry::warp_rigid(k, &rigid, x as f64, y as f64, depth.get(x, y, 0));
            if !wp.valid || !sample_into(&source.image, wp.u, wp.v, &mut vi, &mut dui, &mut dvi) {
                continue;
            }
            if let Some(f) = feats {
                sample_into(f, wp.u, wp.v, &mut vf, &mut duf, &mut dvf);
                let i = features.as_ref().unwrap().index(x, y, 0);
                features.as_mut().unwrap().data_mut()[i..i + cf].copy_from_slice(&vf);
                features_du.as_mut().unwrap().data_mut()[i..i + cf].copy_from_slice(&duf);
                features_dv.as_mut().unwrap().data_mut()[i..i + cf].copy_from_slice(&dvf);
            }
            let i = image.index(x, y, 0);
            image.data_mut()[i..i + ci].copy_from_slice(&vi);
            image_du.data_mut()[i..i + ci].copy_from_slice(&dui);
            image_dv.data_mut()[i..i + ci].copy_from_slice(&dvi);
            valid.set(x, y, true);
        }
    }
    WarpedSource {
        image,
        image_du,
        image_dv,
        features,
        features_du,
        features_dv,
        valid,
    }
}

/// Per-pixel cross-view loss of one source view.
#[derive(Clone, Debug)]
pub struct SourceLoss {
    pub photometric: RasterMap,
    pub feature_metric: RasterMap,
    pub valid: Mask,
}

impl SourceLoss {
    #[inline]
    pub fn combined(&self, i: usize) -> f64 {
        self.photometric.data()[i] + self.feature_metric.data()[i]
    }
}

/// Per-pixel photometric and feature-metric loss of every source, before the
/// minimum over sources.
pub fn cross_view_per_source(
    target: &ViewBundle,
    sources: &[ViewBundle],
    k: &Intrinsics,
    depth: &RasterMap,
    poses: &[Pose],
    cfg: &LossConfig,
) -> Result<Vec<SourceLoss>> {
    validate_views(target, sources, depth, poses, cfg)?;
    let (w, h) = (target.image.width(), target.image.height());
    sources
        .iter()
        .zip(poses)
        .map(|(src, pose)| {
            let ws = warp_source(target, src, k, depth, pose, cfg.use_feature_metric);
            let mut photometric = RasterMap::zeros(w, h, 1);
            let mut feature_metric = RasterMap::zeros(w, h, 1);
            if cfg.use_photometric {
                let (l1, dssim) = photometric_parts(&target.image, &ws.image, cfg)?;
                for (i, out) in photometric.data_mut().iter_mut().enumerate() {
                    if ws.valid.data()[i] {
                        *out = cfg.l1_weight * l1[i] + cfg.ssim_weight * dssim[i];
                    }
                }
            }
            if cfg.use_feature_metric {
                let (ft, fs) = (target.features.as_ref().unwrap(), ws.features.as_ref().unwrap());
                let c = ft.channels();
                for (i, out) in feature_metric.data_mut().iter_mut().enumerate() {
                    if ws.valid.data()[i] {
                        *out = (0..c).map(|j| (ft.data()[i * c + j] - fs.data()[i * c + j]).abs()).sum();
                    }
                }
            }
            Ok(SourceLoss {
                photometric,
                feature_metric,
                valid: ws.valid,
            })
        })
        .collect()
}

/// Index of the cheapest valid source per pixel; ties go to the lowest index.
fn argmin_sources(per_source: &[SourceLoss], n: usize) -> Vec<Option<usize>> {
    (0..n)
        .map(|i| {
            let mut best: Option<(usize, f64)> = None;
            for (s, sl) in per_source.iter().enumerate() {
                if !sl.valid.data()[i] {
                    continue;
                }
                let v = sl.combined(i);
                if best.is_none_or(|(_, b)| v < b) {
                    best = Some((s, v));
                }
            }
            best.map(|(s, _)| s)
        })
        .collect()
}

/// Occlusion-aware cross-view loss: per pixel, the cheapest valid source's
/// photometric plus feature-metric loss; averaged over pixels valid in at
/// least one source.
pub fn cross_view_loss(
    target: &ViewBundle,
    sources: &[ViewBundle],
    k: &Intrinsics,
    depth: &RasterMap,
    poses: &[Pose],
    cfg: &LossConfig,
) -> Result<LossReport> {
    let per_source = cross_view_per_source(target, sources, k, depth, poses, cfg)?;
    let (w, h) = (target.image.width(), target.image.height());
    let choice = argmin_sources(&per_source, w * h);
    let mut per_pixel = RasterMap::zeros(w, h, 1);
    let (mut sum_ph, mut sum_fm, mut n) = (0.0, 0.0, 0usize);
    for (i, c) in choice.iter().enumerate() {
        if let Some(s) = *c {
            let sl = &per_source[s];
            sum_ph += sl.photometric.data()[i];
            sum_fm += sl.feature_metric.data()[i];
            per_pixel.data_mut()[i] = sl.combined(i);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyValidSet);
    }
    let mut terms = Vec::new();
    if cfg.use_photometric {
        terms.push(Term {
            name: "ph".into(),
            value: sum_ph / n as f64,
            weight: 1.0,
        });
    }
    if cfg.use_feature_metric {
        terms.push(Term {
            name: "fm".into(),
            value: sum_fm / n as f64,
            weight: 1.0,
        });
    }
    Ok(LossReport::from_terms(terms, per_pixel, n))
}

/// L1 objective and its derivative with respect to the warped pixel, for the
/// selected source of one pixel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PixelResidual {
    pub source: usize,
    pub value: f64,
    pub d_pixel: Vector2<f64>,
}

/// Evaluates the L1-only objective per pixel together with the derivative
/// with respect to the warped coordinates, routed through the argmin source.
pub(crate) struct L1Evaluation {
    pub pixels: Vec<Option<PixelResidual>>,
    pub rigids: Vec<Rigid>,
    pub valid_count: usize,
}

// sign with sign(0) = 0
#[inline]
fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn evaluate_l1(
    target: &ViewBundle,
    sources: &[ViewBundle],
    k: &Intrinsics,
    depth: &RasterMap,
    poses: &[Pose],
    cfg: &LossConfig,
) -> Result<L1Evaluation> {
    let cfg = cfg.l1_only();
    validate_views(target, sources, depth, poses, &cfg)?;
    let (w, h) = (target.image.width(), target.image.height());
    let warped: Vec<WarpedSource> = sources
        .iter()
        .zip(poses)
        .map(|(s, p)| warp_source(target, s, k, depth, p, cfg.use_feature_metric))
        .collect();
    let ci = target.image.channels();
    let inv_ci = 1.0 / ci as f64;
    let mut pixels = Vec::with_capacity(w * h);
    let mut valid_count = 0;
    for i in 0..w * h {
        let mut best: Option<PixelResidual> = None;
        for (s, ws) in warped.iter().enumerate() {
            if !ws.valid.data()[i] {
                continue;
            }
            let mut value = 0.0;
            let mut d = Vector2::zeros();
            if cfg.use_photometric {
                for c in 0..ci {
                    let j = i * ci + c;
                    let r = ws.image.data()[j] - target.image.data()[j];
                    value += r.abs() * inv_ci;
                    let sg = sgn(r) * inv_ci;
                    d += Vector2::new(ws.image_du.data()[j], ws.image_dv.data()[j]) * sg;
                }
            }
            if cfg.use_feature_metric {
                let (ft, fs) = (target.features.as_ref().unwrap(), ws.features.as_ref().unwrap());
                let (fdu, fdv) = (ws.features_du.as_ref().unwrap(), ws.features_dv.as_ref().unwrap());
                let cf = ft.channels();
                for c in 0..cf {
                    let j = i * cf + c;
                    let r = fs.data()[j] - ft.data()[j];
                    value += r.abs();
                    let sg = sgn(r);
                    d += Vector2::new(fdu.data()[j], fdv.data()[j]) * sg;
                }
            }
            if best.is_none_or(|b| value < b.value) {
                best = Some(PixelResidual {
                    source: s,
                    value,
                    d_pixel: d,
                });
            }
        }
        if best.is_some() {
            valid_count += 1;
        }
        pixels.push(best);
    }
    Ok(L1Evaluation {
        pixels,
        rigids: poses.iter().map(Pose::exp).collect(),
        valid_count,
    })
}

/// Gradient of the L1-only cross-view loss (mean over valid pixels) with
/// respect to each pixel's depth.
pub fn cross_view_grad_depth(
    target: &ViewBundle,
    sources: &[ViewBundle],
    k: &Intrinsics,
    depth: &RasterMap,
    poses: &[Pose],
    cfg: &LossConfig,
) -> Result<RasterMap> {
    let eval = evaluate_l1(target, sources, k, depth, poses, cfg)?;
    if eval.valid_count == 0 {
        return Err(Error::EmptyValidSet);
    }
    let w = depth.width();
    let inv_n = 1.0 / eval.valid_count as f64;
    let mut grad = RasterMap::zeros(w, depth.height(), 1);
    for (i, px) in eval.pixels.iter().enumerate() {
        if let Some(px) = px {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let j = geometry::warp_jacobian_depth_rigid(k, &eval.rigids[px.source], x, y, depth.data()[i])?;
            grad.data_mut()[i] = px.d_pixel.dot(&j) * inv_n;
        }
    }
    Ok(grad)
}

/// Gradient of the L1-only cross-view loss with respect to a left twist
/// `(omega, t)` on each source pose; one 6-vector per source.
pub fn cross_view_grad_pose(
    target: &ViewBundle,
    sources: &[ViewBundle],
    k: &Intrinsics,
    depth: &RasterMap,
    poses: &[Pose],
    cfg: &LossConfig,
) -> Result<Vec<SVector<f64, 6>>> {
    let eval = evaluate_l1(target, sources, k, depth, poses, cfg)?;
    if eval.valid_count == 0 {
        return Err(Error::EmptyValidSet);
    }
    let w = depth.width();
    let inv_n = 1.0 / eval.valid_count as f64;
    let mut grads = vec![SVector::<f64, 6>::zeros(); sources.len()];
    for (i, px) in eval.pixels.iter().enumerate() {
        if let Some(px) = px {
            if px.d_pixel == Vector2::zeros() {
                continue;
            }
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let j = geometry::warp_jacobian_pose_rigid(k, &eval.rigids[px.source], x, y, depth.data()[i])?;
            grads[px.source] += j.transpose() * px.d_pixel * inv_n;
        }
    }
    Ok(grads)
}

/// Edge-aware smoothness of mean-normalized depth, first or second order.
pub fn smoothness_loss(depth: &RasterMap, image: &RasterMap, order: u8) -> Result<f64> {
    if depth.channels() != 1 || !depth.same_dims(image) {
        return Err(Error::ShapeMismatch("smoothness needs a one-channel depth with the image's dimensions".into()));
    }
    let op = match order {
        1 => grad1,
        2 => grad2,
        _ => return Err(Error::Config(format!("smoothness order must be 1 or 2, got {order}"))),
    };
    let mean = depth.mean();
    if !(mean > 0.0) {
        return Err(Error::NonPositiveMeanDepth(mean));
    }
    let dd = op(&depth.scale(1.0 / mean))?;
    let di = op(image)?;
    let edge = di.data().chunks_exact(image.channels()).map(|px| px.iter().map(|v| v.abs()).sum::<f64>());
    Ok(edge.zip(dd.data()).map(|(e, d)| (-e).exp() * d.abs()).sum())
}

/// Sum over scales of the mean per-pixel L1 between the input's box pyramid
/// and each reconstruction.
pub fn reconstruction_loss(input: &RasterMap, reconstructions: &[RasterMap]) -> Result<f64> {
    let mut level = input.clone();
    let mut total = 0.0;
    for (s, rec) in reconstructions.iter().enumerate() {
        if s > 0 {
            level = raster::downsample2(&level).map_err(|e| Error::ScaleChainMismatch {
                scale: s,
                reason: e.to_string(),
            })?;
        }
        if !rec.same_shape(&level) {
            return Err(Error::ScaleChainMismatch {
                scale: s,
                reason: format!(
                    "expected {}x{}x{}, got {}x{}x{}",
                    level.width(),
                    level.height(),
                    level.channels(),
                    rec.width(),
                    rec.height(),
                    rec.channels()
                ),
            });
        }
        let sum: f64 = level.data().iter().zip(rec.data()).map(|(a, b)| (a - b).abs()).sum();
        total += sum / level.pixel_count() as f64;
    }
    Ok(total)
}

/// Per-pixel texture weight `exp(-|grad1 I|_1)`.
pub fn texture_weight(image: &RasterMap) -> Result<RasterMap> {
    let g = grad1(image)?;
    Ok(g.channel_sum_abs().map(|v| (-v).exp()))
}

/// `-sum_p exp(-|grad1 I(p)|_1) |grad1 phi(p)|_1`.
pub fn discriminative_loss(phi: &RasterMap, image: &RasterMap) -> Result<f64> {
    if !phi.same_dims(image) {
        return Err(Error::ShapeMismatch("discriminative loss: feature and image dims differ".into()));
    }
    let weight = texture_weight(image)?;
    let g = grad1(phi)?.channel_sum_abs();
    Ok(-weight.data().iter().zip(g.data()).map(|(w, v)| w * v).sum::<f64>())
}

/// `sum_p |grad2 phi(p)|_1` over interior pixels.
pub fn convergent_loss(phi: &RasterMap) -> Result<f64> {
    Ok(grad2(phi)?.data().iter().map(|v| v.abs()).sum())
}

/// `L_rec + alpha L_dis + beta L_cvt`.
pub fn single_view_loss(
    input: &RasterMap,
    reconstructions: &[RasterMap],
    phi: &RasterMap,
    cfg: &LossConfig,
) -> Result<LossReport> {
    let rec = reconstruction_loss(input, reconstructions)?;
    let dis = discriminative_loss(phi, input)?;
    let cvt = convergent_loss(phi)?;
    let per_pixel = match reconstructions.first() {
        Some(r0) => {
            let diff: Vec<f64> = input.data().iter().zip(r0.data()).map(|(a, b)| (a - b).abs()).collect();
            RasterMap::from_vec(input.width(), input.height(), input.channels(), diff)?.channel_sum()
        }
        None => RasterMap::zeros(input.width(), input.height(), 1),
    };
    Ok(LossReport::from_terms(
        vec![
            Term {
                name: "rec".into(),
                value: rec,
                weight: 1.0,
            },
            Term {
                name: "dis".into(),
                value: dis,
                weight: cfg.alpha,
            },
            Term {
                name: "cvt".into(),
                value: cvt,
                weight: cfg.beta,
            },
        ],
        per_pixel,
        input.pixel_count(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn noise(w: usize, h: usize, c: usize, seed: u64) -> RasterMap {
        RasterMap::from_fn(w, h, c, |x, y, ch| {
            let k = (x as u64 * 73_856_093) ^ (y as u64 * 19_349_663) ^ (ch as u64 * 83_492_791) ^ seed;
            (k % 1000) as f64 / 1000.0
        })
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = LossConfig::default();
        assert_eq!((c.alpha, c.beta), (1e-3, 1e-3));
        assert_eq!((c.l1_weight, c.ssim_weight), (0.15, 0.85));
        c.validate().unwrap();
        let bad = LossConfig {
            l1_weight: 0.5,
            ..c
        };
        assert!(bad.validate().is_err());
        let none = LossConfig {
            use_photometric: false,
            use_feature_metric: false,
            ..c
        };
        assert!(none.validate().is_err());
        c.l1_only().validate().unwrap();
    }

    #[test]
    fn ssim_cases() {
        let a = noise(6, 5, 1, 1);
        assert!(ssim(&a, &a).unwrap().data().iter().all(|&v| (v - 1.0).abs() < 1e-12));

        // constant patches: mu_a = 0, mu_b = 1, no variance, so SSIM = c1 / (1 + c1)
        let z = RasterMap::constant(4, 4, 1, 0.0);
        let o = RasterMap::constant(4, 4, 1, 1.0);
        let c1 = 1e-4;
        let s = ssim(&z, &o).unwrap();
        assert!(s.data().iter().all(|&v| (v - c1 / (1.0 + c1)).abs() < 1e-15));

        let b = noise(6, 5, 1, 9);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!(ssim(&a, &RasterMap::zeros(5, 5, 1)).is_err());
    }

    #[test]
    fn photometric_cases() {
        let a = noise(7, 6, 1, 3);
        let full = Mask::full(7, 6);
        assert_eq!(photometric_loss(&a, &a, &full).unwrap().total, 0.0);

        let z = RasterMap::constant(4, 4, 1, 0.0);
        let o = RasterMap::constant(4, 4, 1, 1.0);
        let mut one = Mask::empty(4, 4);
        one.set(1, 1, true);
        let r = photometric_loss(&z, &o, &one).unwrap();
        assert_eq!(r.valid_count, 1);
        assert_eq!(r.term("l1").unwrap() * 0.15, 0.15);
        let c1 = 1e-4;
        let expected = 0.15 + 0.85 * (1.0 - c1 / (1.0 + c1)) / 2.0;
        assert!((r.total - expected).abs() < 1e-14);
        assert_eq!(r.per_pixel.get(0, 0, 0), 0.0);

        // no implicit normalization of intensities
        let b = noise(7, 6, 1, 5);
        let l1 = photometric_loss(&a, &b, &full).unwrap().term("l1").unwrap();
        let l255 = photometric_loss(&a.scale(255.0), &b.scale(255.0), &full)
            .unwrap()
            .term("l1")
            .unwrap();
        assert!((l255 - 255.0 * l1).abs() < 1e-9);

        assert!(matches!(
            photometric_loss(&a, &b, &Mask::empty(7, 6)),
            Err(Error::EmptyValidSet)
        ));
    }

    #[test]
    fn feature_metric_cases() {
        let a = noise(5, 4, 3, 11);
        let full = Mask::full(5, 4);
        assert_eq!(feature_metric_loss(&a, &a, &full).unwrap().total, 0.0);

        let mut b = a.clone();
        b.set(2, 1, 1, a.get(2, 1, 1) + 2.0);
        let r = feature_metric_loss(&a, &b, &full).unwrap();
        assert!((r.total - 2.0 / 20.0).abs() < 1e-15);

        let c = noise(5, 4, 3, 12);
        let perm = |m: &RasterMap| RasterMap::from_fn(5, 4, 3, |x, y, ch| m.get(x, y, (ch + 1) % 3));
        let l0 = feature_metric_loss(&a, &c, &full).unwrap().total;
        let l1 = feature_metric_loss(&perm(&a), &perm(&c), &full).unwrap().total;
        assert!((l0 - l1).abs() < 1e-14);
        assert!(feature_metric_loss(&a, &RasterMap::zeros(5, 4, 2), &full).is_err());
    }

    fn fixture() -> (Intrinsics, RasterMap) {
        let k = Intrinsics::new(10.0, 10.0, 4.0, 3.5).unwrap();
        (k, RasterMap::constant(9, 8, 1, 2.0))
    }

    #[test]
    fn cross_view_identity_is_zero() {
        let (k, depth) = fixture();
        let img = noise(9, 8, 1, 21);
        let t = ViewBundle::image_only(img.clone());
        let s = [ViewBundle::image_only(img)];
        let r = cross_view_loss(&t, &s, &k, &depth, &[Pose::identity()], &LossConfig::photometric_only()).unwrap();
        assert!(r.total < 1e-15);
        assert_eq!(r.valid_count, 72);
    }

    #[test]
    fn cross_view_min_selects_matching_source() {
        let (k, depth) = fixture();
        let img = noise(9, 8, 1, 21);
        let feat = noise(9, 8, 4, 22);
        let t = ViewBundle::with_features(img.clone(), feat.clone());
        let good = ViewBundle::with_features(img, feat);
        let bad = ViewBundle::with_features(noise(9, 8, 1, 5), noise(9, 8, 4, 6));
        let poses = [Pose::identity(), Pose::identity()];
        let cfg = LossConfig::default();
        let r = cross_view_loss(&t, &[bad.clone(), good.clone()], &k, &depth, &poses, &cfg).unwrap();
        let alone = cross_view_loss(&t, &[good], &k, &depth, &poses[..1], &cfg).unwrap();
        assert_eq!(r.per_pixel, alone.per_pixel);
        assert!(r.total < 1e-15);
    }

    #[test]
    fn cross_view_errors() {
        let (k, depth) = fixture();
        let img = noise(9, 8, 1, 21);
        let t = ViewBundle::image_only(img.clone());
        let s = [ViewBundle::image_only(img)];
        assert!(cross_view_loss(&t, &[], &k, &depth, &[], &LossConfig::photometric_only()).is_err());
        // feature-metric without features
        assert!(cross_view_loss(&t, &s, &k, &depth, &[Pose::identity()], &LossConfig::default()).is_err());
        // everything warps behind the camera
        let behind = Pose::from_translation(Vector3::new(0.0, 0.0, -10.0));
        assert!(matches!(
            cross_view_loss(&t, &s, &k, &depth, &[behind], &LossConfig::photometric_only()),
            Err(Error::EmptyValidSet)
        ));
    }

    fn smooth(w: usize, h: usize, phase: f64) -> RasterMap {
        RasterMap::from_fn(w, h, 1, |x, y, _| {
            0.5 + 0.3 * (0.7 * x as f64 + phase).sin() * (0.5 * y as f64 - phase).cos()
        })
    }

    #[test]
    fn depth_gradient_matches_finite_differences() {
        let (w, h) = (12, 10);
        let k = Intrinsics::new(12.0, 12.0, 5.5, 4.5).unwrap();
        let depth = RasterMap::from_fn(w, h, 1, |x, y, _| 2.0 + 0.05 * x as f64 - 0.03 * y as f64);
        let t = ViewBundle::image_only(smooth(w, h, 0.0));
        let s = [ViewBundle::image_only(smooth(w, h, 0.4))];
        let poses = [Pose::new(Vector3::new(0.01, -0.015, 0.005), Vector3::new(0.05, -0.02, 0.01))];
        let cfg = LossConfig::photometric_only().l1_only();
        let g = cross_view_grad_depth(&t, &s, &k, &depth, &poses, &cfg).unwrap();
        let eps = 1e-7;
        let mut checked = 0;
        for i in 0..w * h {
            let mut dp = depth.clone();
            let mut dm = depth.clone();
            dp.data_mut()[i] += eps;
            dm.data_mut()[i] -= eps;
            let (Ok(lp), Ok(lm)) = (
                cross_view_loss(&t, &s, &k, &dp, &poses, &cfg),
                cross_view_loss(&t, &s, &k, &dm, &poses, &cfg),
            ) else {
                continue;
            };
            if lp.valid_count != lm.valid_count {
                continue;
            }
            let fd = (lp.total - lm.total) / (2.0 * eps);
            assert!((fd - g.data()[i]).abs() < 1e-6, "pixel {i}: fd {fd} vs {}", g.data()[i]);
            checked += 1;
        }
        assert!(checked > 60);
    }

    #[test]
    fn pose_gradient_matches_finite_differences() {
        let (w, h) = (12, 10);
        let k = Intrinsics::new(12.0, 12.0, 5.5, 4.5).unwrap();
        let depth = RasterMap::from_fn(w, h, 1, |x, y, _| 2.0 + 0.05 * x as f64 - 0.03 * y as f64);
        let t = ViewBundle::with_features(smooth(w, h, 0.0), smooth(w, h, 1.0));
        let s = [ViewBundle::with_features(smooth(w, h, 0.4), smooth(w, h, 1.3))];
        let pose = Pose::new(Vector3::new(0.01, -0.015, 0.005), Vector3::new(0.05, -0.02, 0.01));
        let cfg = LossConfig::default().l1_only();
        let g = cross_view_grad_pose(&t, &s, &k, &depth, &[pose], &cfg).unwrap()[0];
        let eps = 1e-7;
        for j in 0..6 {
            let mut xi = [0.0; 6];
            xi[j] = eps;
            let plus = Pose::from_array(xi).compose(&pose);
            xi[j] = -eps;
            let minus = Pose::from_array(xi).compose(&pose);
            let lp = cross_view_loss(&t, &s, &k, &depth, &[plus], &cfg).unwrap();
            let lm = cross_view_loss(&t, &s, &k, &depth, &[minus], &cfg).unwrap();
            assert_eq!(lp.valid_count, lm.valid_count);
            let fd = (lp.total - lm.total) / (2.0 * eps);
            assert!((fd - g[j]).abs() < 1e-5 * (1.0 + g[j].abs()), "component {j}: fd {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn textureless_source_has_zero_gradients() {
        let (k, depth) = fixture();
        let t = ViewBundle::image_only(noise(9, 8, 1, 2));
        let s = [ViewBundle::image_only(RasterMap::constant(9, 8, 1, 0.4))];
        let pose = [Pose::new(Vector3::new(0.01, -0.02, 0.01), Vector3::new(0.1, 0.05, 0.0))];
        let cfg = LossConfig::photometric_only();
        let g = cross_view_grad_depth(&t, &s, &k, &depth, &pose, &cfg).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        let gp = cross_view_grad_pose(&t, &s, &k, &depth, &pose, &cfg).unwrap();
        assert_eq!(gp[0], SVector::<f64, 6>::zeros());
    }

    #[test]
    fn smoothness_cases() {
        let img = noise(5, 5, 1, 1);
        let c = RasterMap::constant(5, 5, 1, 3.0);
        assert_eq!(smoothness_loss(&c, &img, 1).unwrap(), 0.0);
        assert_eq!(smoothness_loss(&c, &img, 2).unwrap(), 0.0);
        let affine = RasterMap::from_fn(5, 5, 1, |x, y, _| 1.0 + 0.5 * x as f64 + 0.25 * y as f64);
        assert!(smoothness_loss(&affine, &img, 2).unwrap().abs() < 1e-12);

        // depth = x on a flat image: mean 2, normalized slope 0.5 at all 25 pixels
        let ramp = RasterMap::from_fn(5, 5, 1, |x, _, _| x as f64);
        let flat = RasterMap::constant(5, 5, 1, 0.3);
        assert!((smoothness_loss(&ramp, &flat, 1).unwrap() - 12.5).abs() < 1e-12);

        assert!(matches!(
            smoothness_loss(&RasterMap::zeros(5, 5, 1), &flat, 1),
            Err(Error::NonPositiveMeanDepth(_))
        ));
        assert!(smoothness_loss(&ramp, &flat, 3).is_err());
    }

    #[test]
    fn reconstruction_cases() {
        let img = noise(8, 6, 1, 4);
        let pyr = raster::pyramid(&img, 2).unwrap();
        assert_eq!(reconstruction_loss(&img, &pyr).unwrap(), 0.0);
        let off = img.map(|v| v + 0.5);
        assert!((reconstruction_loss(&img, std::slice::from_ref(&off)).unwrap() - 0.5).abs() < 1e-12);
        let mut with_extra = vec![off];
        with_extra.push(pyr[1].clone());
        assert!((reconstruction_loss(&img, &with_extra).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(
            reconstruction_loss(&img, &[img.clone(), img.clone()]),
            Err(Error::ScaleChainMismatch { scale: 1, .. })
        ));
    }

    #[test]
    fn discriminative_cases() {
        let img = noise(6, 6, 1, 8);
        assert_eq!(discriminative_loss(&RasterMap::constant(6, 6, 4, 0.3), &img).unwrap(), 0.0);
        let phi = noise(6, 6, 3, 2);
        let l = discriminative_loss(&phi, &img).unwrap();
        assert!(l < 0.0);
        assert!((discriminative_loss(&phi.scale(2.0), &img).unwrap() - 2.0 * l).abs() < 1e-12);

        // left half flat, right half a steep ramp; phi = x everywhere (grad1 = 1)
        let image = RasterMap::from_fn(8, 5, 1, |x, _, _| if x < 4 { 0.0 } else { 0.5 * (x - 3) as f64 });
        let phi = RasterMap::from_fn(8, 5, 1, |x, _, _| x as f64);
        let total = discriminative_loss(&phi, &image).unwrap();
        let mut expected = 0.0;
        for y in 0..5 {
            for x in 0..8 {
                let gi: f64 = match x {
                    0..=2 => 0.0,
                    3 => 0.25,
                    _ => 0.5,
                };
                expected -= (-gi).exp();
                let _ = y;
            }
        }
        assert!((total - expected).abs() < 1e-12);
        assert!((-0.5f64).exp() < 1.0);
    }

    #[test]
    fn convergent_cases() {
        let affine = RasterMap::from_fn(6, 5, 2, |x, y, c| x as f64 * 0.3 - y as f64 + c as f64);
        assert!(convergent_loss(&affine).unwrap().abs() < 1e-12);
        let sq = RasterMap::from_fn(6, 5, 1, |x, _, _| (x * x) as f64);
        assert_eq!(convergent_loss(&sq).unwrap(), 12.0 * 2.0);
        let xy = RasterMap::from_fn(6, 5, 1, |x, y, _| (x * y) as f64);
        assert_eq!(convergent_loss(&xy).unwrap(), 12.0 * 2.0);
    }

    #[test]
    fn single_view_cases() {
        let img = noise(6, 6, 1, 3);
        let recs = raster::pyramid(&img, 2).unwrap();
        let phi = noise(6, 6, 2, 7);
        let cfg0 = LossConfig {
            alpha: 0.0,
            beta: 0.0,
            ..LossConfig::default()
        };
        let off: Vec<RasterMap> = recs.iter().map(|r| r.map(|v| v * 0.9)).collect();
        let r = single_view_loss(&img, &off, &phi, &cfg0).unwrap();
        assert_eq!(r.total, reconstruction_loss(&img, &off).unwrap());

        let r = single_view_loss(&img, &recs, &RasterMap::constant(6, 6, 2, 0.1), &LossConfig::default()).unwrap();
        assert!(r.total.abs() < 1e-15);

        let r = single_view_loss(&img, &off, &phi, &LossConfig::default()).unwrap();
        let weighted: f64 = r.per_term.iter().map(|t| t.weight * t.value).sum();
        assert!((r.total - weighted).abs() < 1e-12);
        assert_eq!(r.per_term[1].weight, 1e-3);
        assert_eq!(r.per_term[2].weight, 1e-3);
    }
}
