//! Independent oracles shared by the integration tests and the acceptance
//! target. Everything here goes through the public API only.
#![allow(dead_code)]

use featmetric::featurenet::{self, ArchSpec, AutoencoderParams};
use featmetric::geometry::{self, Intrinsics, Pose};
use featmetric::losses::{self, LossConfig, ViewBundle};
use featmetric::raster::{self, RasterMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniformly distributed direction on the unit sphere.
pub fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.1 && n <= 1.0 {
            return v.map(|x| x / n);
        }
    }
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Smooth random image: a sum of a few random plane waves.
pub fn wave_map(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> RasterMap {
    let waves: Vec<[f64; 5]> = (0..c * 3)
        .map(|_| {
            [
                rng.random_range(-1.2..1.2),
                rng.random_range(-1.2..1.2),
                rng.random_range(0.0..6.3),
                rng.random_range(0.05..0.3),
                0.0,
            ]
        })
        .collect();
    RasterMap::from_fn(w, h, c, |x, y, ch| {
        0.5 + waves[ch * 3..ch * 3 + 3]
            .iter()
            .map(|wv| wv[3] * (wv[0] * x as f64 + wv[1] * y as f64 + wv[2]).sin())
            .sum::<f64>()
    })
}

/// A random two-source cross-view instance with features.
pub struct CrossViewInstance {
    pub k: Intrinsics,
    pub target: ViewBundle,
    pub sources: Vec<ViewBundle>,
    pub depth: RasterMap,
    pub poses: Vec<Pose>,
}

pub fn cross_view_instance(rng: &mut ChaCha8Rng, w: usize, h: usize) -> CrossViewInstance {
    let f = rng.random_range(6.0..12.0);
    let k = Intrinsics::new(f, f * rng.random_range(0.9..1.1), (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0).unwrap();
    let bundle = |rng: &mut ChaCha8Rng| ViewBundle::with_features(wave_map(rng, w, h, 1), wave_map(rng, w, h, 3));
    let target = bundle(rng);
    let sources = vec![bundle(rng), bundle(rng)];
    let depth = RasterMap::from_fn(w, h, 1, |_, _, _| rng.random_range(1.5..3.0));
    let mut small = |s: f64| std::array::from_fn::<f64, 6, _>(|i| rng.random_range(-s..s) * if i < 3 { 0.05 } else { 0.3 });
    let poses = vec![Pose::from_array(small(1.0)), Pose::from_array(small(1.0))];
    CrossViewInstance {
        k,
        target,
        sources,
        depth,
        poses,
    }
}

/// Per pixel: chosen source, its bilinear cell and the residual signs, or
/// `None` when no source is valid. Equal fingerprints at `x` and `x +- h`
/// mean the L1 loss is a smooth function along that segment.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelState {
    pub source: usize,
    pub cell: (i64, i64),
    pub frac: (f64, f64),
    pub signs: Vec<i8>,
    /// Smallest residual magnitude.
    pub min_abs: f64,
    /// Gap between the best and second-best source.
    pub margin: f64,
}

impl PixelState {
    fn key(&self) -> (usize, (i64, i64), &[i8]) {
        (self.source, self.cell, &self.signs)
    }
}

pub fn pixel_states(inst: &CrossViewInstance, depth: &RasterMap, poses: &[Pose], cfg: &LossConfig) -> Vec<Option<PixelState>> {
    let per = losses::cross_view_per_source(&inst.target, &inst.sources, &inst.k, depth, poses, cfg).unwrap();
    let w = depth.width();
    (0..depth.len())
        .map(|i| {
            let mut order: Vec<(usize, f64)> = per
                .iter()
                .enumerate()
                .filter(|(_, sl)| sl.valid.data()[i])
                .map(|(s, sl)| (s, sl.combined(i)))
                .collect();
            if order.is_empty() {
                return None;
            }
            // stable sort keeps the lowest index first on ties
            order.sort_by(|a, b| a.1.total_cmp(&b.1));
            let s = order[0].0;
            let margin = order.get(1).map_or(f64::INFINITY, |o| o.1 - order[0].1);
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let wp = geometry::warp(&inst.k, x, y, depth.data()[i], &poses[s]);
            let mut res = Vec::new();
            let src = &inst.sources[s];
            if cfg.use_photometric {
                let v = raster::bilinear_sample(&src.image, wp.u, wp.v).value;
                res.extend(inst.target.image.pixel(i % w, i / w).iter().zip(&v).map(|(a, b)| a - b));
            }
            if cfg.use_feature_metric {
                let v = raster::bilinear_sample(src.features.as_ref().unwrap(), wp.u, wp.v).value;
                let t = inst.target.features.as_ref().unwrap().pixel(i % w, i / w);
                res.extend(t.iter().zip(&v).map(|(a, b)| a - b));
            }
            Some(PixelState {
                source: s,
                cell: (wp.u.floor() as i64, wp.v.floor() as i64),
                frac: (wp.u - wp.u.floor(), wp.v - wp.v.floor()),
                signs: res.iter().map(|r| r.signum() as i8 * i8::from(*r != 0.0)).collect(),
                min_abs: res.iter().fold(f64::INFINITY, |m, r| m.min(r.abs())),
                margin,
            })
        })
        .collect()
}

fn same_states(a: &[Option<PixelState>], b: &[Option<PixelState>]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(p, q)| match (p, q) {
            (None, None) => true,
            (Some(p), Some(q)) => p.key() == q.key(),
            _ => false,
        })
}

fn safe_point(s: &PixelState) -> bool {
    let inside = |f: f64| (0.1..=0.9).contains(&f);
    inside(s.frac.0) && inside(s.frac.1) && s.min_abs >= 1e-7 && s.margin > 1e-6
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FdStats {
    pub instances: usize,
    pub checks: usize,
    pub max_rel: f64,
}

/// Analytic depth and pose gradients of the L1 cross-view loss against
/// central differences with step `h`, over `instances` random 8x8 problems.
/// Depth is checked at FD-safe pixels (both warped coordinates' fractions
/// in [0.1, 0.9], every residual at least 1e-7 in magnitude, the argmin
/// source unchanged by the step); pose components only when no pixel's
/// source, cell or residual sign changes across the step.
pub fn cross_view_fd(instances: usize, seed: u64, h: f64) -> FdStats {
    let mut rng = rng(seed);
    let mut stats = FdStats::default();
    let cfg = LossConfig::default().l1_only();
    let total = |inst: &CrossViewInstance, d: &RasterMap, p: &[Pose]| {
        losses::cross_view_loss(&inst.target, &inst.sources, &inst.k, d, p, &cfg).unwrap().total
    };
    while stats.instances < instances {
        let inst = cross_view_instance(&mut rng, 8, 8);
        let base = pixel_states(&inst, &inst.depth, &inst.poses, &cfg);
        let valid = base.iter().filter(|s| s.is_some()).count();
        if valid < 16 {
            continue;
        }
        let gd = losses::cross_view_grad_depth(&inst.target, &inst.sources, &inst.k, &inst.depth, &inst.poses, &cfg).unwrap();
        let gp = losses::cross_view_grad_pose(&inst.target, &inst.sources, &inst.k, &inst.depth, &inst.poses, &cfg).unwrap();
        let mut checked = 0;
        for i in 0..inst.depth.len() {
            let Some(s) = &base[i] else { continue };
            if !safe_point(s) {
                continue;
            }
            let (mut dp, mut dm) = (inst.depth.clone(), inst.depth.clone());
            dp.data_mut()[i] += h;
            dm.data_mut()[i] -= h;
            let sp = pixel_states(&inst, &dp, &inst.poses, &cfg);
            let sm = pixel_states(&inst, &dm, &inst.poses, &cfg);
            if !same_states(&base, &sp) || !same_states(&base, &sm) {
                continue;
            }
            let fd = (total(&inst, &dp, &inst.poses) - total(&inst, &dm, &inst.poses)) / (2.0 * h);
            stats.max_rel = stats.max_rel.max(rel_err(gd.data()[i], fd, 1e-12));
            checked += 1;
        }
        for s in 0..inst.poses.len() {
            for j in 0..6 {
                let perturbed = |sign: f64| {
                    let mut xi = [0.0; 6];
                    xi[j] = sign * h;
                    let mut p = inst.poses.clone();
                    p[s] = Pose::from_array(xi).compose(&p[s]);
                    p
                };
                let (pp, pm) = (perturbed(1.0), perturbed(-1.0));
                if !same_states(&base, &pixel_states(&inst, &inst.depth, &pp, &cfg))
                    || !same_states(&base, &pixel_states(&inst, &inst.depth, &pm, &cfg))
                {
                    continue;
                }
                let fd = (total(&inst, &inst.depth, &pp) - total(&inst, &inst.depth, &pm)) / (2.0 * h);
                stats.max_rel = stats.max_rel.max(rel_err(gp[s][j], fd, 1e-12));
                checked += 1;
            }
        }
        if checked > 0 {
            stats.instances += 1;
            stats.checks += checked;
        }
    }
    stats
}

/// Autoencoder gradients against central differences (step `h`) at
/// `per_layer` random coordinates of every layer, on a random 10x10 input.
pub fn autoencoder_fd(arch: ArchSpec, cfg: &LossConfig, per_layer: usize, seed: u64, h: f64) -> FdStats {
    let mut rng = rng(seed);
    let mut p = AutoencoderParams::init(arch, seed).unwrap();
    let layers = p.layers().to_vec();
    for l in &layers {
        for b in &mut p.data_mut()[l.bias..l.end()] {
            *b = rng.random_range(-0.2..0.2);
        }
    }
    let img = RasterMap::from_fn(10, 10, arch.in_channels, |_, _, _| rng.random_range(0.0..1.0));
    let (_, g) = featurenet::loss_and_gradients(&p, &img, cfg).unwrap();
    let mut stats = FdStats {
        instances: 1,
        ..FdStats::default()
    };
    for l in &layers {
        for _ in 0..per_layer {
            let i = rng.random_range(l.weights..l.end());
            let mut pp = p.clone();
            pp.data_mut()[i] += h;
            let mut pm = p.clone();
            pm.data_mut()[i] -= h;
            let lp = featurenet::loss_and_gradients(&pp, &img, cfg).unwrap().0.total;
            let lm = featurenet::loss_and_gradients(&pm, &img, cfg).unwrap().0.total;
            let fd = (lp - lm) / (2.0 * h);
            stats.max_rel = stats.max_rel.max(rel_err(g[i], fd, 1e-6));
            stats.checks += 1;
        }
    }
    stats
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GeometryStats {
    pub roundtrip: f64,
    pub jacobian: f64,
    pub se3: f64,
}

fn random_pose(rng: &mut ChaCha8Rng, max_angle: f64) -> Pose {
    let axis: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt().max(1e-9);
    let a = rng.random_range(0.0..max_angle);
    Pose::from_array([
        axis[0] / n * a,
        axis[1] / n * a,
        axis[2] / n * a,
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ])
}

fn rigid_diff(a: &geometry::Rigid, b: &geometry::Rigid) -> f64 {
    (a.rotation - b.rotation).abs().max().max((a.translation - b.translation).abs().max())
}

/// Largest errors over `cases` random cases of: pixel/point roundtrips,
/// warp Jacobians against central differences, and SE(3) identities.
pub fn geometry_suite(cases: usize, seed: u64) -> GeometryStats {
    let mut rng = rng(seed);
    let mut s = GeometryStats::default();
    let id = geometry::Rigid::identity();
    for _ in 0..cases {
        let k = Intrinsics::new(
            rng.random_range(20.0..500.0),
            rng.random_range(20.0..500.0),
            rng.random_range(0.0..300.0),
            rng.random_range(0.0..300.0),
        )
        .unwrap();
        let (u, v, d) = (
            rng.random_range(0.0..640.0),
            rng.random_range(0.0..480.0),
            rng.random_range(0.5..50.0),
        );
        let p = geometry::backproject(&k, u, v, d).unwrap();
        let (pu, pv) = geometry::project(&k, &p).unwrap();
        s.roundtrip = s.roundtrip.max((pu - u).abs().max((pv - v).abs()));
        let back = geometry::backproject(&k, pu, pv, p.z).unwrap();
        s.roundtrip = s.roundtrip.max((back - p).abs().max() / d.max(1.0));

        // small motions keep the point in front of the camera
        let g = Pose::from_array({
            let r = random_pose(&mut rng, 0.3).to_array();
            [r[0], r[1], r[2], r[3] * 0.1, r[4] * 0.1, r[5] * 0.1]
        });
        let (u, v, d) = (
            rng.random_range(0.0..64.0),
            rng.random_range(0.0..48.0),
            rng.random_range(1.0..5.0),
        );
        let k = Intrinsics::new(
            rng.random_range(30.0..80.0),
            rng.random_range(30.0..80.0),
            32.0,
            24.0,
        )
        .unwrap();
        let h = 1e-6;
        let jd = geometry::warp_jacobian_depth(&k, u, v, d, &g).unwrap();
        let wp = geometry::warp(&k, u, v, d + h, &g);
        let wm = geometry::warp(&k, u, v, d - h, &g);
        let fd = [(wp.u - wm.u) / (2.0 * h), (wp.v - wm.v) / (2.0 * h)];
        for r in 0..2 {
            s.jacobian = s.jacobian.max((jd[r] - fd[r]).abs() / jd[r].abs().max(1.0));
        }
        let jp = geometry::warp_jacobian_pose(&k, u, v, d, &g).unwrap();
        for c in 0..6 {
            let step = |sign: f64| {
                let mut xi = [0.0; 6];
                xi[c] = sign * h;
                geometry::warp(&k, u, v, d, &Pose::from_array(xi).compose(&g))
            };
            let (a, b) = (step(1.0), step(-1.0));
            let fd = [(a.u - b.u) / (2.0 * h), (a.v - b.v) / (2.0 * h)];
            for r in 0..2 {
                s.jacobian = s.jacobian.max((jp[(r, c)] - fd[r]).abs() / jp[(r, c)].abs().max(1.0));
            }
        }

        let a = random_pose(&mut rng, 3.0);
        let b = random_pose(&mut rng, 3.0);
        let c = random_pose(&mut rng, 3.0);
        let w = Pose::from_axis_angle(a.axis_angle);
        let w_inv = Pose::from_axis_angle(-a.axis_angle);
        let errs = [
            rigid_diff(&w.exp().compose(&w_inv.exp()), &id),
            rigid_diff(&a.compose(&a.inverse()).exp(), &id),
            rigid_diff(&a.inverse().compose(&a).exp(), &id),
            rigid_diff(&Pose::identity().compose(&b).exp(), &b.exp()),
            rigid_diff(&a.compose(&b).compose(&c).exp(), &a.compose(&b.compose(&c)).exp()),
            rigid_diff(&a.compose(&b).exp(), &a.exp().compose(&b.exp())),
            rigid_diff(&a.exp().to_pose().exp(), &a.exp()),
        ];
        s.se3 = errs.iter().fold(s.se3, |m, e| m.max(*e));
    }
    s
}
