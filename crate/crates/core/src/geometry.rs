//! Pinhole camera, axis-angle rigid motion and the projective warp.
//!
//! Conventions:
//!
//! * Pixel `(u, v)` has column `u` and row `v`; integer coordinates are pixel centres.
//! * A warp pose `G` maps points expressed in the target camera frame into
//!   the source camera frame, so `warp` returns where a target pixel lands in
//!   the source image.
//! * Pose Jacobians use a left perturbation `exp(xi) * G` with
//!   `xi = (omega, t)`: rotation components first, translation second.

use std::path::Path;

use nalgebra::{Matrix3, SMatrix, Vector2, Vector3};

use crate::{Error, Result};

pub use nalgebra::Point3;

/// Minimum transformed depth for a warp to count as valid.
pub const EPS_Z: f64 = 1e-6;

const SMALL_ANGLE: f64 = 1e-8;

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() || !fx.is_finite() || !fy.is_finite() {
            return Err(Error::InvalidIntrinsics { fx, fy });
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Intrinsics of the next pyramid level, where pixel `i` averages
    /// fine pixels `2i` and `2i + 1`: the principal point gets a half-pixel
    /// correction on top of the plain scaling.
    pub fn half_resolution(&self) -> Intrinsics {
        let k = intrinsics_scale(self, 0.5);
        Intrinsics {
            cx: k.cx - 0.25,
            cy: k.cy - 0.25,
            ..k
        }
    }
}

/// Multiplies all four intrinsic parameters by `factor`.
pub fn intrinsics_scale(k: &Intrinsics, factor: f64) -> Intrinsics {
    Intrinsics {
        fx: k.fx * factor,
        fy: k.fy * factor,
        cx: k.cx * factor,
        cy: k.cy * factor,
    }
}

/// Projects a camera-frame point to pixel coordinates.
pub fn project(k: &Intrinsics, p: &Point3<f64>) -> Result<(f64, f64)> {
    if !(p.z > 0.0) {
        return Err(Error::NonPositiveDepth(p.z));
    }
    Ok((k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy))
}

/// Lifts pixel `(u, v)` at depth `d` to a camera-frame point.
pub fn backproject(k: &Intrinsics, u: f64, v: f64, d: f64) -> Result<Point3<f64>> {
    if !(d > 0.0) {
        return Err(Error::NonPositiveDepth(d));
    }
    Ok(Point3::new(d * (u - k.cx) / k.fx, d * (v - k.cy) / k.fy, d))
}

/// Rigid transform as a rotation matrix and a translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rigid {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Rigid {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    #[inline]
    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// `self * other`: applies `other` first.
    pub fn compose(&self, other: &Rigid) -> Rigid {
        Rigid {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Rigid {
        let rt = self.rotation.transpose();
        Rigid {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Back to the canonical axis-angle chart.
    pub fn to_pose(&self) -> Pose {
        Pose {
            axis_angle: so3_log(&self.rotation),
            translation: self.translation,
        }
    }
}

/// Rigid motion as axis-angle rotation plus translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub axis_angle: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            axis_angle: Vector3::zeros(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            axis_angle,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Vector3::zeros(), t)
    }

    pub fn from_axis_angle(w: Vector3<f64>) -> Self {
        Self::new(w, Vector3::zeros())
    }

    /// `[wx, wy, wz, tx, ty, tz]`.
    pub fn from_array(a: [f64; 6]) -> Self {
        Self::new(Vector3::new(a[0], a[1], a[2]), Vector3::new(a[3], a[4], a[5]))
    }

    pub fn to_array(&self) -> [f64; 6] {
        let (w, t) = (self.axis_angle, self.translation);
        [w.x, w.y, w.z, t.x, t.y, t.z]
    }

    pub fn rotation_angle(&self) -> f64 {
        self.axis_angle.norm()
    }

    pub fn exp(&self) -> Rigid {
        pose_exp(self)
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        pose_compose(self, other)
    }

    pub fn inverse(&self) -> Pose {
        pose_inverse(self)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Rodrigues' formula, with a series expansion for tiny angles.
pub fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let k = hat(w);
    Matrix3::identity() + k * a + k * k * b
}

/// Inverse of [`so3_exp`], returning an angle in `[0, pi]`.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let skew = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if theta < SMALL_ANGLE {
        return skew * 0.5;
    }
    if theta < 3.0 {
        return skew * (theta / (2.0 * theta.sin()));
    }
    // near pi the skew part vanishes; recover the axis from the symmetric part
    let s = (r + r.transpose()) * 0.5 - Matrix3::identity() * cos;
    let k = (0..3)
        .max_by(|&i, &j| s[(i, i)].total_cmp(&s[(j, j)]))
        .unwrap();
    let mut axis: Vector3<f64> = s.column(k).into_owned() / s[(k, k)].sqrt();
    axis /= axis.norm();
    if axis.dot(&skew) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

pub fn pose_exp(pose: &Pose) -> Rigid {
    Rigid {
        rotation: so3_exp(&pose.axis_angle),
        translation: pose.translation,
    }
}

/// `a * b`: applies `b` first.
pub fn pose_compose(a: &Pose, b: &Pose) -> Pose {
    a.exp().compose(&b.exp()).to_pose()
}

pub fn pose_inverse(a: &Pose) -> Pose {
    a.exp().inverse().to_pose()
}

/// Result of warping one pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Warp {
    pub u: f64,
    pub v: f64,
    /// Depth of the transformed point in the source frame.
    pub z: f64,
    pub valid: bool,
}

/// `project(G * backproject(p, d))`.
///
/// `valid` is false when the transformed depth is not above [`EPS_Z`]
/// (or `d` is not positive); the coordinates are then NaN.
pub fn warp(k: &Intrinsics, u: f64, v: f64, d: f64, g: &Pose) -> Warp {
    warp_rigid(k, &g.exp(), u, v, d)
}

/// [`warp`] with a precomputed rigid transform.
#[inline]
pub fn warp_rigid(k: &Intrinsics, g: &Rigid, u: f64, v: f64, d: f64) -> Warp {
    let invalid = Warp {
        u: f64::NAN,
        v: f64::NAN,
        z: f64::NAN,
        valid: false,
    };
    if !(d > 0.0) {
        return invalid;
    }
    let q = g.apply(&Point3::new(d * (u - k.cx) / k.fx, d * (v - k.cy) / k.fy, d));
    if !(q.z > EPS_Z) {
        return Warp { z: q.z, ..invalid };
    }
    Warp {
        u: k.fx * q.x / q.z + k.cx,
        v: k.fy * q.y / q.z + k.cy,
        z: q.z,
        valid: true,
    }
}

#[inline]
fn projection_jacobian(k: &Intrinsics, q: &Point3<f64>) -> SMatrix<f64, 2, 3> {
    let iz = 1.0 / q.z;
    SMatrix::<f64, 2, 3>::new(
        k.fx * iz,
        0.0,
        -k.fx * q.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * q.y * iz * iz,
    )
}

fn transformed(k: &Intrinsics, g: &Rigid, u: f64, v: f64, d: f64) -> Result<(Vector3<f64>, Point3<f64>)> {
    let ray = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
    let q = Point3::from(g.rotation * (ray * d) + g.translation);
    if !(d > 0.0) || !(q.z > EPS_Z) {
        return Err(Error::InvalidWarp { u, v });
    }
    Ok((ray, q))
}

/// Derivative of the warped pixel with respect to the depth `d`.
pub fn warp_jacobian_depth(k: &Intrinsics, u: f64, v: f64, d: f64, g: &Pose) -> Result<Vector2<f64>> {
    warp_jacobian_depth_rigid(k, &g.exp(), u, v, d)
}

#[inline]
pub fn warp_jacobian_depth_rigid(k: &Intrinsics, g: &Rigid, u: f64, v: f64, d: f64) -> Result<Vector2<f64>> {
    let (ray, q) = transformed(k, g, u, v, d)?;
    Ok(projection_jacobian(k, &q) * (g.rotation * ray))
}

/// Derivative of the warped pixel with respect to a left twist `(omega, t)` applied to `G`.
pub fn warp_jacobian_pose(k: &Intrinsics, u: f64, v: f64, d: f64, g: &Pose) -> Result<SMatrix<f64, 2, 6>> {
    warp_jacobian_pose_rigid(k, &g.exp(), u, v, d)
}

#[inline]
pub fn warp_jacobian_pose_rigid(
    k: &Intrinsics,
    g: &Rigid,
    u: f64,
    v: f64,
    d: f64,
) -> Result<SMatrix<f64, 2, 6>> {
    let (_, q) = transformed(k, g, u, v, d)?;
    let jp = projection_jacobian(k, &q);
    // d(exp(xi) q)/d(omega) = -[q]x, d/dt = I
    let rot = jp * (-hat(&q.coords));
    let mut j = SMatrix::<f64, 2, 6>::zeros();
    j.fixed_view_mut::<2, 3>(0, 0).copy_from(&rot);
    j.fixed_view_mut::<2, 3>(0, 3).copy_from(&jp);
    Ok(j)
}

/// CSV header used for pose files.
pub const POSE_HEADER: [&str; 6] = ["wx", "wy", "wz", "tx", "ty", "tz"];

/// Writes one pose per row under a `wx,wy,wz,tx,ty,tz` header.
pub fn write_poses(path: impl AsRef<Path>, poses: &[Pose]) -> Result<()> {
    let rows: Vec<Vec<String>> = poses
        .iter()
        .map(|p| p.to_array().iter().map(|v| v.to_string()).collect())
        .collect();
    crate::raster::write_csv(path, &POSE_HEADER, &rows)
}

/// Reads a pose file; the header row is optional.
pub fn read_poses(path: impl AsRef<Path>) -> Result<Vec<Pose>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let mut poses = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        if i == 0 && record.get(0) == Some("wx") {
            continue;
        }
        if record.len() != 6 {
            return Err(Error::MalformedHeader {
                path: path.to_path_buf(),
                reason: format!("pose row {i} has {} fields, expected 6", record.len()),
            });
        }
        let mut a = [0.0; 6];
        for (slot, field) in a.iter_mut().zip(record.iter()) {
            *slot = field.parse().map_err(|_| Error::MalformedHeader {
                path: path.to_path_buf(),
                reason: format!("pose row {i}: bad number {field:?}"),
            })?;
        }
        poses.push(Pose::from_array(a));
    }
    Ok(poses)
}
