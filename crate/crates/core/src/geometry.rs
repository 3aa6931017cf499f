//! Pinhole camera model, rigid poses, ray generation, spherical projection
//! and pixel reprojection.
//!
//! Conventions: x right, y down, z forward (optical axis). Poses are
//! camera-to-world. Pixel centers sit at integer coordinates.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return Err(Error::InvalidIntrinsics(format!(
                "cx={} outside (0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::InvalidIntrinsics(format!(
                "cy={} outside (0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    /// Camera-frame ray direction (unnormalized, z = 1) through a pixel.
    pub fn unproject(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0)
    }

    /// Project a camera-frame point; caller checks z > 0.
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }
}

/// Rigid camera-to-world transform. Serialized on disk as a row-major 4x4
/// matrix, not directly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SE3Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SE3Pose {
    pub fn identity() -> Self {
        SE3Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        SE3Pose {
            rotation,
            translation,
        }
    }

    /// Rotation of `angle` radians about the camera vertical (y) axis.
    pub fn yaw(angle: f64) -> Matrix3<f64> {
        let (s, c) = angle.sin_cos();
        Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
    }

    pub fn validate(&self) -> Result<()> {
        let rtr = self.rotation.transpose() * self.rotation;
        let err = (rtr - Matrix3::identity()).abs().max();
        if err > 1e-6 {
            return Err(Error::InvalidPose(format!(
                "rotation not orthonormal (max |R^T R - I| = {err:.3e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidPose(format!("det(R) = {det}, expected +1")));
        }
        Ok(())
    }

    pub fn inverse(&self) -> SE3Pose {
        let rt = self.rotation.transpose();
        SE3Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_dir(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * d
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &SE3Pose) -> SE3Pose {
        SE3Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// This pose advanced `forward_m` along its own optical axis, then
    /// yawed by `yaw` radians.
    pub fn offset_forward_yaw(&self, forward_m: f64, yaw: f64) -> SE3Pose {
        self.compose(&SE3Pose::new(
            SE3Pose::yaw(yaw),
            Vector3::new(0.0, 0.0, forward_m),
        ))
    }

    /// Row-major 4x4 matrix, the on-disk pose representation.
    pub fn to_matrix4_rows(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    pub fn from_matrix4_rows(m: &[[f64; 4]; 4]) -> Result<SE3Pose> {
        let pose = SE3Pose {
            rotation: Matrix3::new(
                m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
            ),
            translation: Vector3::new(m[0][3], m[1][3], m[2][3]),
        };
        pose.validate()?;
        Ok(pose)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    /// World-frame origin, meters.
    pub origin: Vector3<f64>,
    /// Unit direction.
    pub direction: Vector3<f64>,
}

/// Normalized latitude-longitude coordinates, both in (0, π).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalCoord {
    pub theta: f64,
    pub phi: f64,
}

/// World-frame ray through a (continuous) pixel.
pub fn ray_for_pixel(k: &Intrinsics, pose: &SE3Pose, pixel: (f64, f64)) -> Result<Ray> {
    if !pixel.0.is_finite() || !pixel.1.is_finite() {
        return Err(Error::NonFinite(format!("pixel ({}, {})", pixel.0, pixel.1)));
    }
    let dir_cam = k.unproject(pixel.0, pixel.1);
    let dir = (pose.rotation * dir_cam).normalize();
    Ok(Ray {
        origin: pose.translation,
        direction: dir,
    })
}

/// Latitude-longitude mapping of a pixel's camera ray.
///
/// theta uses atan2(1, r_x), the continuous extension of π − arctan(r_x⁻¹)
/// across the principal column.
pub fn spherical_project(pixel: (f64, f64), k: &Intrinsics) -> SphericalCoord {
    let d = k.unproject(pixel.0, pixel.1);
    spherical_of_dir_components(d.x, d.y)
}

/// Same mapping for a camera-frame direction with positive z, scaled to z = 1.
/// Returns None for directions at or behind the image plane.
pub fn spherical_of_dir(d: &Vector3<f64>) -> Option<SphericalCoord> {
    if d.z <= 1e-12 {
        return None;
    }
    Some(spherical_of_dir_components(d.x / d.z, d.y / d.z))
}

fn spherical_of_dir_components(rx: f64, ry: f64) -> SphericalCoord {
    let r = (rx * rx + ry * ry + 1.0).sqrt();
    SphericalCoord {
        theta: std::f64::consts::PI - 1.0f64.atan2(rx),
        phi: (-ry / r).acos(),
    }
}

/// Angular field-of-view window on the sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FovBounds {
    pub theta_min: f64,
    pub theta_max: f64,
    pub phi_min: f64,
    pub phi_max: f64,
}

impl FovBounds {
    pub fn validate(&self) -> Result<()> {
        if self.theta_min >= self.theta_max || self.phi_min >= self.phi_max {
            return Err(Error::Config(format!(
                "fov bounds not strictly ordered: {self:?}"
            )));
        }
        Ok(())
    }

    /// Angular window spanned by the camera image, before any enlargement.
    ///
    /// theta depends only on r_x, phi extremes occur on the principal column,
    /// so image edges give the exact bounds.
    pub fn of_camera(k: &Intrinsics) -> FovBounds {
        let w = k.width as f64;
        let h = k.height as f64;
        let left = spherical_project((0.0, k.cy), k).theta;
        let right = spherical_project((w, k.cy), k).theta;
        let top = spherical_project((k.cx, 0.0), k).phi;
        let bottom = spherical_project((k.cx, h), k).phi;
        FovBounds {
            theta_min: left,
            theta_max: right,
            phi_min: top,
            phi_max: bottom,
        }
    }

    /// Symmetric enlargement by `extra` radians total per axis, clamped to (0, π).
    pub fn enlarged(&self, extra: f64) -> FovBounds {
        let eps = 1e-4;
        FovBounds {
            theta_min: (self.theta_min - extra / 2.0).max(eps),
            theta_max: (self.theta_max + extra / 2.0).min(std::f64::consts::PI - eps),
            phi_min: (self.phi_min - extra / 2.0).max(eps),
            phi_max: (self.phi_max + extra / 2.0).min(std::f64::consts::PI - eps),
        }
    }

    pub fn contains(&self, s: &SphericalCoord) -> bool {
        s.theta >= self.theta_min
            && s.theta <= self.theta_max
            && s.phi >= self.phi_min
            && s.phi <= self.phi_max
    }
}

/// Continuous grid coordinates of a spherical coordinate under the affine
/// map of `fov` onto a (rows = H_s, cols = W_s) lattice. theta maps to
/// columns, phi to rows. `in_fov` is false when the point lands outside
/// [0, W_s−1] × [0, H_s−1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCoord {
    pub col: f64,
    pub row: f64,
    pub in_fov: bool,
}

pub fn spherical_to_grid(s: &SphericalCoord, fov: &FovBounds, grid: (usize, usize)) -> GridCoord {
    let (h, w) = grid;
    let col = (s.theta - fov.theta_min) / (fov.theta_max - fov.theta_min) * (w as f64 - 1.0);
    let row = (s.phi - fov.phi_min) / (fov.phi_max - fov.phi_min) * (h as f64 - 1.0);
    let in_fov =
        col >= 0.0 && col <= w as f64 - 1.0 && row >= 0.0 && row <= h as f64 - 1.0;
    GridCoord { col, row, in_fov }
}

/// Reprojection of a source pixel with known depth into a target camera.
///
/// Depth is the distance along the normalized pixel ray, matching both the
/// rendered expected depth and the generated depth maps. `valid` is false
/// when the point lands behind the target camera or outside the target
/// image.
pub fn reproject(
    pixel: (f64, f64),
    depth: f64,
    pose_src: &SE3Pose,
    pose_tgt: &SE3Pose,
    k: &Intrinsics,
) -> ((f64, f64), bool) {
    let p_src = k.unproject(pixel.0, pixel.1).normalize() * depth;
    let p_world = pose_src.transform_point(&p_src);
    let p_tgt = pose_tgt.inverse().transform_point(&p_world);
    if p_tgt.z <= 1e-9 {
        return ((f64::NAN, f64::NAN), false);
    }
    let (x, y) = k.project(&p_tgt);
    let valid =
        x >= 0.0 && x <= k.width as f64 - 1.0 && y >= 0.0 && y <= k.height as f64 - 1.0;
    ((x, y), valid)
}

/// Reprojected pixel plus its derivative with respect to depth.
/// Used by the reprojection-loss backward pass.
pub fn reproject_with_jacobian(
    pixel: (f64, f64),
    depth: f64,
    pose_src: &SE3Pose,
    pose_tgt: &SE3Pose,
    k: &Intrinsics,
) -> ((f64, f64), (f64, f64), bool) {
    let rel = pose_tgt.inverse().compose(pose_src);
    let v = rel.rotation * k.unproject(pixel.0, pixel.1).normalize();
    // p_tgt = v * depth + t, affine in depth
    let p = v * depth + rel.translation;
    if p.z <= 1e-9 {
        return ((f64::NAN, f64::NAN), (0.0, 0.0), false);
    }
    let (x, y) = k.project(&p);
    let dx = k.fx * (v.x * p.z - p.x * v.z) / (p.z * p.z);
    let dy = k.fy * (v.y * p.z - p.y * v.z) / (p.z * p.z);
    let valid =
        x >= 0.0 && x <= k.width as f64 - 1.0 && y >= 0.0 && y <= k.height as f64 - 1.0;
    ((x, y), (dx, dy), valid)
}
