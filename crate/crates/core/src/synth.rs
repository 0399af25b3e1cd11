//! Analytic ray-cast rendering of planar scenes with exact depth and pose.
//!
//! A [`Scene`] is a list of planes `n . P = d0` in world coordinates, each
//! carrying a procedural [`Texture`] evaluated at the hit point in the
//! plane's tangent coordinates. Images are point samples of that texture,
//! so ground truth is exact up to floating point.

use std::fs;
use std::path::Path;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::geometry::{self, Intrinsics, Pose, Rigid};
use crate::raster::{self, RasterMap};
use crate::{Error, Result};

/// TOML source of the default corridor scene.
pub const CORRIDOR_TOML: &str = include_str!("../../../configs/corridor.toml");

/// Procedural texture over plane coordinates `(s, t)`.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Texture {
    Constant {
        value: f64,
    },
    /// `low`/`high` squares of side `cell`, by parity of
    /// `floor(s / cell) + floor(t / cell)`.
    Checker {
        cell: f64,
        #[serde(default)]
        low: f64,
        #[serde(default = "one")]
        high: f64,
    },
    /// `offset + amplitude * sin(2 pi freq (cos(angle) s + sin(angle) t))`.
    Sinusoid {
        freq: f64,
        amplitude: f64,
        offset: f64,
        #[serde(default)]
        angle: f64,
    },
    /// `base + slope * s`, a low-contrast shading gradient.
    Ramp {
        base: f64,
        slope: f64,
    },
    /// Lattice noise with quintic interpolation, values in `[low, high]`.
    ValueNoise {
        cell: f64,
        low: f64,
        high: f64,
        seed: u64,
    },
}

fn one() -> f64 {
    1.0
}

fn lattice(i: i64, j: i64, seed: u64) -> f64 {
    // splitmix64 on the packed lattice coordinates
    let mut z = (i as u64)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((j as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F))
        .wrapping_add(seed.wrapping_mul(0x1656_67B1_9E37_79F9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn quintic(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

impl Texture {
    pub fn eval(&self, s: f64, t: f64) -> f64 {
        match *self {
            Texture::Constant { value } => value,
            Texture::Checker { cell, low, high } => {
                let parity = ((s / cell).floor() + (t / cell).floor()).rem_euclid(2.0);
                if parity == 0.0 {
                    low
                } else {
                    high
                }
            }
            Texture::Sinusoid {
                freq,
                amplitude,
                offset,
                angle,
            } => offset + amplitude * (std::f64::consts::TAU * freq * (angle.cos() * s + angle.sin() * t)).sin(),
            Texture::Ramp { base, slope } => base + slope * s,
            Texture::ValueNoise { cell, low, high, seed } => {
                let (x, y) = (s / cell, t / cell);
                let (i, j) = (x.floor(), y.floor());
                let (fx, fy) = (quintic(x - i), quintic(y - j));
                let (i, j) = (i as i64, j as i64);
                let a = lattice(i, j, seed);
                let b = lattice(i + 1, j, seed);
                let c = lattice(i, j + 1, seed);
                let d = lattice(i + 1, j + 1, seed);
                let top = a + (b - a) * fx;
                let bottom = c + (d - c) * fx;
                low + (high - low) * (top + (bottom - top) * fy)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Texture::Constant { value } => value.is_finite(),
            Texture::Checker { cell, low, high } => cell > 0.0 && low.is_finite() && high.is_finite(),
            Texture::Sinusoid {
                freq,
                amplitude,
                offset,
                angle,
            } => [freq, amplitude, offset, angle].iter().all(|v| v.is_finite()),
            Texture::Ramp { base, slope } => base.is_finite() && slope.is_finite(),
            Texture::ValueNoise { cell, low, high, .. } => cell > 0.0 && low.is_finite() && high.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid texture parameters: {self:?}")))
        }
    }
}

/// Named presets.
pub fn texture_bank() -> Vec<(&'static str, Texture)> {
    vec![
        ("flat_wall", Texture::Constant { value: 0.55 }),
        ("soft_shadow", Texture::Ramp { base: 0.4, slope: 0.01 }),
        (
            "checker",
            Texture::Checker {
                cell: 8.0,
                low: 0.0,
                high: 1.0,
            },
        ),
        (
            "sinusoid",
            Texture::Sinusoid {
                freq: 0.5,
                amplitude: 0.3,
                offset: 0.5,
                angle: 0.0,
            },
        ),
        (
            "value_noise",
            Texture::ValueNoise {
                cell: 1.0,
                low: 0.15,
                high: 0.85,
                seed: 11,
            },
        ),
    ]
}

pub fn texture_preset(name: &str) -> Option<Texture> {
    texture_bank().into_iter().find(|(n, _)| *n == name).map(|(_, t)| t)
}

/// Plane `normal . P = offset` with a texture in its tangent frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub name: String,
    pub normal: Vector3<f64>,
    pub offset: f64,
    pub texture: Texture,
}

impl Plane {
    /// Normalizes `normal` (and scales `offset` accordingly).
    pub fn new(name: impl Into<String>, normal: Vector3<f64>, offset: f64, texture: Texture) -> Result<Self> {
        let len = normal.norm();
        if !(len > 0.0 && len.is_finite() && offset.is_finite()) {
            return Err(Error::Config(format!("degenerate plane normal {normal:?}")));
        }
        texture.validate()?;
        Ok(Self {
            name: name.into(),
            normal: normal / len,
            offset: offset / len,
            texture,
        })
    }

    /// Orthonormal tangent axes `(e1, e2)`.
    pub fn tangent_basis(&self) -> (Vector3<f64>, Vector3<f64>) {
        let n = self.normal;
        let helper = if n.x.abs() > 0.9 {
            Vector3::z()
        } else {
            Vector3::x()
        };
        let e1 = (helper - n * helper.dot(&n)).normalize();
        (e1, n.cross(&e1))
    }

    /// Tangent coordinates of a world point, relative to `offset * normal`.
    pub fn plane_coords(&self, p: &Point3<f64>) -> (f64, f64) {
        let (e1, e2) = self.tangent_basis();
        let rel = p.coords - self.normal * self.offset;
        (rel.dot(&e1), rel.dot(&e2))
    }

    /// Signed distance `n . P - d0` (negative on the camera side).
    pub fn distance(&self, p: &Point3<f64>) -> f64 {
        self.normal.dot(&p.coords) - self.offset
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub planes: Vec<Plane>,
}

impl Scene {
    pub fn new(planes: Vec<Plane>) -> Result<Self> {
        if planes.is_empty() {
            return Err(Error::Config("scene has no planes".into()));
        }
        Ok(Self { planes })
    }

    /// Checks that every plane faces a camera centred at `center`.
    pub fn check_camera(&self, center: &Point3<f64>) -> Result<()> {
        for p in &self.planes {
            if p.distance(center) >= 0.0 {
                return Err(Error::Config(format!(
                    "plane '{}' is not facing the camera at {:?}",
                    p.name,
                    center.coords.as_slice()
                )));
            }
        }
        Ok(())
    }
}

/// Renders image and camera-frame depth (`Z`) for a camera with
/// camera-to-world pose `camera_pose`.
pub fn render_view(
    scene: &Scene,
    k: &Intrinsics,
    camera_pose: &Pose,
    width: usize,
    height: usize,
) -> Result<(RasterMap, RasterMap)> {
    let t_wc = camera_pose.exp();
    let center = Point3::from(t_wc.translation);
    scene.check_camera(&center)?;
    let mut image = RasterMap::zeros(width, height, 1);
    let mut depth = RasterMap::zeros(width, height, 1);
    for v in 0..height {
        for u in 0..width {
            let (uf, vf) = (u as f64, v as f64);
            let ray_c = Vector3::new((uf - k.cx) / k.fx, (vf - k.cy) / k.fy, 1.0);
            let ray = t_wc.rotation * ray_c;
            let mut best: Option<(f64, &Plane)> = None;
            for p in &scene.planes {
                let denom = p.normal.dot(&ray);
                if denom <= 0.0 {
                    continue;
                }
                let lambda = -p.distance(&center) / denom;
                if lambda > geometry::EPS_Z && best.is_none_or(|(b, _)| lambda < b) {
                    best = Some((lambda, p));
                }
            }
            let Some((lambda, plane)) = best else {
                return Err(Error::RayMiss { u, v });
            };
            let hit = center + ray * lambda;
            let (s, t) = plane.plane_coords(&hit);
            image.set(u, v, 0, plane.texture.eval(s, t));
            depth.set(u, v, 0, lambda);
        }
    }
    Ok((image, depth))
}

/// Target and source camera-to-world poses.
#[derive(Clone, Debug, PartialEq)]
pub struct Rig {
    pub target: Pose,
    pub sources: Vec<Pose>,
}

impl Rig {
    /// Target at the world origin, sources at the given poses.
    pub fn from_sources(sources: Vec<Pose>) -> Self {
        Self {
            target: Pose::identity(),
            sources,
        }
    }

    /// Target-to-source transforms `inv(T_ws) * T_wt`.
    pub fn relative_poses(&self) -> Vec<Pose> {
        let t_wt = self.target.exp();
        self.sources
            .iter()
            .map(|s| s.exp().inverse().compose(&t_wt).to_pose())
            .collect()
    }
}

/// Target view, source views and ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedPair {
    pub target_image: RasterMap,
    pub source_images: Vec<RasterMap>,
    pub gt_depth: RasterMap,
    /// Target-to-source transforms, one per source.
    pub gt_poses: Vec<Pose>,
    pub k: Intrinsics,
}

/// Renders target and sources. Gaussian pixel noise of standard deviation
/// `noise_std` is drawn from `rng_seed` (none when zero).
pub fn make_pair(
    scene: &Scene,
    k: &Intrinsics,
    rig: &Rig,
    width: usize,
    height: usize,
    noise_std: f64,
    rng_seed: u64,
) -> Result<RenderedPair> {
    if rig.sources.is_empty() {
        return Err(Error::Config("rig has no source cameras".into()));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::Config(format!("noise_std must be >= 0, got {noise_std}")));
    }
    let (mut target_image, gt_depth) = render_view(scene, k, &rig.target, width, height)?;
    let mut source_images = rig
        .sources
        .iter()
        .map(|p| render_view(scene, k, p, width, height).map(|(img, _)| img))
        .collect::<Result<Vec<_>>>()?;
    if noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        for img in std::iter::once(&mut target_image).chain(source_images.iter_mut()) {
            for v in img.data_mut() {
                // Box-Muller
                let (u1, u2): (f64, f64) = (rng.random_range(f64::EPSILON..1.0), rng.random());
                *v += noise_std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            }
        }
    }
    Ok(RenderedPair {
        target_image,
        source_images,
        gt_depth,
        gt_poses: rig.relative_poses(),
        k: *k,
    })
}

// ---------------------------------------------------------------------------
// scene files

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraToml {
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RigToml {
    #[serde(default)]
    target: Option<[f64; 6]>,
    sources: Vec<[f64; 6]>,
    #[serde(default)]
    noise_std: f64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TextureToml {
    Preset(String),
    Explicit(Texture),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PlaneToml {
    #[serde(default)]
    name: String,
    normal: [f64; 3],
    offset: f64,
    texture: TextureToml,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneToml {
    camera: CameraToml,
    rig: RigToml,
    plane: Vec<PlaneToml>,
}

/// A parsed scene file: scene, camera and rig.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub scene: Scene,
    pub k: Intrinsics,
    pub width: usize,
    pub height: usize,
    pub rig: Rig,
    pub noise_std: f64,
}

impl SceneConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let raw: SceneToml = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let c = raw.camera;
        if c.width < 3 || c.height < 3 {
            return Err(Error::DimensionTooSmall {
                width: c.width,
                height: c.height,
                min: 3,
            });
        }
        let k = Intrinsics::new(c.fx, c.fy, c.cx, c.cy)?;
        let planes = raw
            .plane
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                let texture = match p.texture {
                    TextureToml::Explicit(t) => t,
                    TextureToml::Preset(name) => {
                        texture_preset(&name).ok_or_else(|| Error::Config(format!("unknown texture preset '{name}'")))?
                    }
                };
                let name = if p.name.is_empty() {
                    format!("plane{i}")
                } else {
                    p.name
                };
                Plane::new(name, Vector3::from(p.normal), p.offset, texture)
            })
            .collect::<Result<Vec<_>>>()?;
        let rig = Rig {
            target: raw.rig.target.map(Pose::from_array).unwrap_or_default(),
            sources: raw.rig.sources.into_iter().map(Pose::from_array).collect(),
        };
        if rig.sources.is_empty() {
            return Err(Error::Config("rig.sources is empty".into()));
        }
        Ok(Self {
            scene: Scene::new(planes)?,
            k,
            width: c.width,
            height: c.height,
            rig,
            noise_std: raw.rig.noise_std,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// The default textured-floor, flat-wall corridor.
    pub fn corridor() -> Self {
        Self::parse(CORRIDOR_TOML).expect("bundled corridor scene parses")
    }

    pub fn render(&self, rng_seed: u64) -> Result<RenderedPair> {
        make_pair(
            &self.scene,
            &self.k,
            &self.rig,
            self.width,
            self.height,
            self.noise_std,
            rng_seed,
        )
    }
}

// ---------------------------------------------------------------------------
// pair directories

pub const INTRINSICS_HEADER: [&str; 6] = ["fx", "fy", "cx", "cy", "width", "height"];

impl RenderedPair {
    pub fn width(&self) -> usize {
        self.target_image.width()
    }

    pub fn height(&self) -> usize {
        self.target_image.height()
    }

    /// Writes `target.pgm`, `source_<i>.pgm` (8-bit previews), lossless
    /// `target.pfm`/`source_<i>.pfm`, `gt_depth.pfm`, `poses.csv` and
    /// `intrinsics.csv` into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        raster::write_pgm(dir.join("target.pgm"), &self.target_image)?;
        raster::write_pfm(dir.join("target.pfm"), &self.target_image)?;
        for (i, s) in self.source_images.iter().enumerate() {
            raster::write_pgm(dir.join(format!("source_{i}.pgm")), s)?;
            raster::write_pfm(dir.join(format!("source_{i}.pfm")), s)?;
        }
        raster::write_pfm(dir.join("gt_depth.pfm"), &self.gt_depth)?;
        geometry::write_poses(dir.join("poses.csv"), &self.gt_poses)?;
        let k = &self.k;
        let row = vec![
            k.fx.to_string(),
            k.fy.to_string(),
            k.cx.to_string(),
            k.cy.to_string(),
            self.width().to_string(),
            self.height().to_string(),
        ];
        raster::write_csv(dir.join("intrinsics.csv"), &INTRINSICS_HEADER, &[row])
    }

    /// Reads a directory written by [`RenderedPair::write_dir`]. Images are
    /// taken from the PFM files when present, else from the PGM previews.
    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let image = |stem: &str| -> Result<Option<RasterMap>> {
            let pfm = dir.join(format!("{stem}.pfm"));
            let pgm = dir.join(format!("{stem}.pgm"));
            if pfm.exists() {
                raster::read_pfm(&pfm).map(Some)
            } else if pgm.exists() {
                raster::read_pgm(&pgm).map(Some)
            } else {
                Ok(None)
            }
        };
        let target_image = image("target")?.ok_or_else(|| {
            Error::io(
                dir.join("target.pgm"),
                std::io::Error::new(std::io::ErrorKind::NotFound, "missing target image"),
            )
        })?;
        let mut source_images = Vec::new();
        while let Some(s) = image(&format!("source_{}", source_images.len()))? {
            source_images.push(s);
        }
        let gt_depth = raster::read_pfm(dir.join("gt_depth.pfm"))?;
        let gt_poses = geometry::read_poses(dir.join("poses.csv"))?;
        let k = read_intrinsics(dir.join("intrinsics.csv"))?;
        if source_images.is_empty() || source_images.len() != gt_poses.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} source images but {} poses in {}",
                source_images.len(),
                gt_poses.len(),
                dir.display()
            )));
        }
        if !gt_depth.same_dims(&target_image) || source_images.iter().any(|s| !s.same_shape(&target_image)) {
            return Err(Error::ShapeMismatch(format!("image/depth sizes differ in {}", dir.display())));
        }
        Ok(Self {
            target_image,
            source_images,
            gt_depth,
            gt_poses,
            k,
        })
    }
}

fn read_intrinsics(path: impl AsRef<Path>) -> Result<Intrinsics> {
    let path = path.as_ref();
    let bad = |reason: String| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let rec = reader
        .records()
        .next()
        .ok_or_else(|| bad("no intrinsics row".into()))?
        .map_err(|e| bad(e.to_string()))?;
    let vals: Vec<f64> = rec
        .iter()
        .take(4)
        .map(|f| f.parse::<f64>().map_err(|e| bad(format!("{f:?}: {e}"))))
        .collect::<Result<_>>()?;
    if vals.len() != 4 {
        return Err(bad("expected fx,fy,cx,cy".into()));
    }
    Intrinsics::new(vals[0], vals[1], vals[2], vals[3])
}

/// Texture-free pixels whose bilinear footprint under `pose` stays on
/// `plane_index`, computed from the analytic scene: handy for selecting the
/// textureless region of a rendered pair.
pub fn plane_mask(
    scene: &Scene,
    k: &Intrinsics,
    camera_pose: &Pose,
    width: usize,
    height: usize,
    plane_index: usize,
) -> Result<raster::Mask> {
    let t_wc: Rigid = camera_pose.exp();
    let center = Point3::from(t_wc.translation);
    let mut ids = vec![usize::MAX; width * height];
    for v in 0..height {
        for u in 0..width {
            let ray = t_wc.rotation * Vector3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
            let mut best: Option<(f64, usize)> = None;
            for (i, p) in scene.planes.iter().enumerate() {
                let denom = p.normal.dot(&ray);
                if denom <= 0.0 {
                    continue;
                }
                let lambda = -p.distance(&center) / denom;
                if lambda > geometry::EPS_Z && best.is_none_or(|(b, _)| lambda < b) {
                    best = Some((lambda, i));
                }
            }
            ids[v * width + u] = best.map_or(usize::MAX, |(_, i)| i);
        }
    }
    Ok(raster::Mask::from_fn(width, height, |x, y| ids[y * width + x] == plane_index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{cross_view_loss, LossConfig, ViewBundle};

    fn k() -> Intrinsics {
        Intrinsics::new(40.0, 40.0, 15.5, 11.5).unwrap()
    }

    fn fronto(z: f64, texture: Texture) -> Scene {
        Scene::new(vec![Plane::new("p", Vector3::z(), z, texture).unwrap()]).unwrap()
    }

    #[test]
    fn fronto_parallel_depth_and_constant_image() {
        let scene = fronto(5.0, Texture::Constant { value: 0.3 });
        let (img, depth) = render_view(&scene, &k(), &Pose::identity(), 32, 24).unwrap();
        assert!(depth.data().iter().all(|&d| (d - 5.0).abs() < 1e-12));
        assert!(img.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn checker_corner_pixels_by_hand() {
        let tex = Texture::Checker {
            cell: 0.5,
            low: 0.0,
            high: 1.0,
        };
        let scene = fronto(5.0, tex.clone());
        let kk = k();
        let (img, _) = render_view(&scene, &kk, &Pose::identity(), 32, 24).unwrap();
        // n = z gives e1 = x, e2 = z x x = y, so (s, t) = (X, Y)
        for (u, v) in [(0usize, 0usize), (31, 0), (0, 23), (31, 23)] {
            let x = (u as f64 - kk.cx) / kk.fx * 5.0;
            let y = (v as f64 - kk.cy) / kk.fy * 5.0;
            let parity = ((x / 0.5).floor() + (y / 0.5).floor()).rem_euclid(2.0);
            assert_eq!(img.get(u, v, 0), if parity == 0.0 { 0.0 } else { 1.0 }, "pixel {u},{v}");
        }
    }

    #[test]
    fn bank_presets() {
        let flat = texture_preset("flat_wall").unwrap();
        let scene = fronto(3.0, flat);
        let (img, _) = render_view(&scene, &k(), &Pose::identity(), 16, 12).unwrap();
        let (gx, gy) = raster::grad_xy(&img).unwrap();
        assert!(gx.data().iter().chain(gy.data()).all(|&g| g == 0.0));

        let checker = texture_preset("checker").unwrap();
        for s in [0.5, 3.0, 7.9, 8.1, 13.0] {
            for t in [0.2, 9.0] {
                assert_eq!(checker.eval(s, t), checker.eval(s + 16.0, t));
                assert_eq!(checker.eval(s, t), checker.eval(s, t + 16.0));
                assert_ne!(checker.eval(s, t), checker.eval(s + 8.0, t));
            }
        }
        assert!(texture_preset("nope").is_none());
    }

    #[test]
    fn sinusoid_gradient_peak() {
        let (freq, amplitude, z) = (0.1, 0.3, 4.0);
        let tex = Texture::Sinusoid {
            freq,
            amplitude,
            offset: 0.5,
            angle: 0.0,
        };
        let kk = Intrinsics::new(40.0, 40.0, 63.5, 3.5).unwrap();
        let (img, _) = render_view(&fronto(z, tex), &kk, &Pose::identity(), 128, 8).unwrap();
        // dI/du = 2 pi f A cos(.) * dX/du, with dX/du = Z / fx
        let expected = std::f64::consts::TAU * freq * amplitude * z / kk.fx;
        let peak = (1..127)
            .map(|u| (img.get(u + 1, 4, 0) - img.get(u - 1, 4, 0)).abs() / 2.0)
            .fold(0.0, f64::max);
        assert!((peak - expected).abs() / expected < 0.01, "peak {peak} vs {expected}");
    }

    #[test]
    fn ray_miss_and_orientation() {
        let scene = fronto(5.0, Texture::Constant { value: 0.3 });
        // looking backwards: every ray misses
        let back = Pose::from_axis_angle(Vector3::new(0.0, std::f64::consts::PI, 0.0));
        assert!(matches!(
            render_view(&scene, &k(), &back, 8, 8),
            Err(Error::RayMiss { .. })
        ));
        let behind = Pose::from_translation(Vector3::new(0.0, 0.0, 6.0));
        assert!(render_view(&scene, &k(), &behind, 8, 8).is_err());
    }

    #[test]
    fn corridor_parses_and_depth_obeys_planes() {
        let cfg = SceneConfig::corridor();
        assert_eq!((cfg.width, cfg.height), (96, 64));
        let pair = cfg.render(0).unwrap();
        assert!(pair.gt_depth.data().iter().all(|&d| d > 0.0));
        for v in 0..cfg.height {
            for u in 0..cfg.width {
                let p = geometry::backproject(&cfg.k, u as f64, v as f64, pair.gt_depth.get(u, v, 0)).unwrap();
                let best = cfg.scene.planes.iter().map(|pl| pl.distance(&p).abs()).fold(f64::MAX, f64::min);
                assert!(best < 1e-9);
            }
        }
    }

    #[test]
    fn zero_baseline_and_determinism() {
        let mut cfg = SceneConfig::corridor();
        cfg.rig.sources = vec![Pose::identity()];
        let pair = cfg.render(3).unwrap();
        assert_eq!(pair.source_images[0], pair.target_image);
        cfg.noise_std = 0.01;
        assert_eq!(cfg.render(3).unwrap(), cfg.render(3).unwrap());
        assert_ne!(cfg.render(3).unwrap(), cfg.render(4).unwrap());
    }

    #[test]
    fn swapped_roles_invert_pose() {
        let cfg = SceneConfig::corridor();
        let a = Pose::new(Vector3::new(0.01, 0.02, -0.01), Vector3::new(0.1, -0.05, 0.2));
        let b = Pose::new(Vector3::new(-0.02, 0.01, 0.0), Vector3::new(-0.1, 0.0, 0.1));
        let ab = Rig {
            target: a,
            sources: vec![b],
        };
        let ba = Rig {
            target: b,
            sources: vec![a],
        };
        let g = ab.relative_poses()[0].compose(&ba.relative_poses()[0]);
        assert!(g.axis_angle.norm() < 1e-10 && g.translation.norm() < 1e-10);
        make_pair(&cfg.scene, &cfg.k, &ab, 32, 24, 0.0, 0).unwrap();
    }

    #[test]
    fn gt_warp_reproduces_target() {
        let cfg = SceneConfig::corridor();
        let pair = cfg.render(0).unwrap();
        let t = ViewBundle::image_only(pair.target_image.clone());
        let s: Vec<_> = pair.source_images.iter().cloned().map(ViewBundle::image_only).collect();
        let l1 = LossConfig::photometric_only().l1_only();
        let r = cross_view_loss(&t, &s, &pair.k, &pair.gt_depth, &pair.gt_poses, &l1).unwrap();
        assert!(r.total < 1e-3, "mean L1 {}", r.total);
        let full = cross_view_loss(&t, &s, &pair.k, &pair.gt_depth, &pair.gt_poses, &LossConfig::photometric_only())
            .unwrap();
        assert!(full.total < 1e-3, "L1+SSIM {}", full.total);
    }

    #[test]
    fn scene_file_errors() {
        assert!(SceneConfig::parse("nonsense = [").is_err());
        let bad_preset = CORRIDOR_TOML.replace("{ kind = \"constant\", value = 0.55 }", "\"marble\"");
        assert!(SceneConfig::parse(&bad_preset).is_err());
        let preset = CORRIDOR_TOML.replace("{ kind = \"constant\", value = 0.55 }", "\"flat_wall\"");
        assert_eq!(SceneConfig::parse(&preset).unwrap(), SceneConfig::corridor());
    }

    #[test]
    fn pair_directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let pair = SceneConfig::corridor().render(0).unwrap();
        pair.write_dir(dir.path()).unwrap();
        let back = RenderedPair::read_dir(dir.path()).unwrap();
        // PFM holds single precision
        let close = |a: &RasterMap, b: &RasterMap| a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= 1e-6 * y.abs());
        assert!(close(&back.target_image, &pair.target_image));
        assert!(close(&back.source_images[0], &pair.source_images[0]));
        assert!(close(&back.gt_depth, &pair.gt_depth));
        assert_eq!(back.k, pair.k);
        for (a, b) in back.gt_poses.iter().zip(&pair.gt_poses) {
            assert_eq!(a.to_array(), b.to_array());
        }
    }
}
