//! Domain types and camera/projection math shared by every other module.
//!
//! All math is 64-bit. Pixel (i, j) has its continuous center at
//! (j + 0.5, i + 0.5); every projection and interpolation routine in the
//! crate uses this convention.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Camera-space depths at or below this are treated as behind the camera.
pub const DEPTH_EPSILON: f64 = 1e-6;

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Rigid world-to-camera transform: `p_cam = R * p_world + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a transform, rejecting rotations that are not orthonormal with
    /// determinant +1 (within 1e-9).
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let gram = rotation.transpose() * rotation;
        let ortho_err = (gram - Mat3::identity()).abs().max();
        if ortho_err > ORTHONORMAL_TOL {
            return Err(Error::InvalidCamera(format!(
                "rotation not orthonormal (error {ortho_err:.3e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::InvalidCamera(format!(
                "rotation determinant {det} != +1"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rot_inv = self.rotation.transpose();
        Self {
            rotation: rot_inv,
            translation: -(rot_inv * self.translation),
        }
    }

    /// World-to-camera transform for a camera at `eye` looking at `target`.
    /// Camera axes: +x right, +y down, +z forward (into the scene).
    pub fn look_at(eye: &Vec3, target: &Vec3, up: &Vec3) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("eye and target coincide".into()))?;
        let right = forward
            .cross(up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("view direction parallel to up".into()))?;
        let down = forward.cross(&right);
        let rotation = Mat3::from_rows(&[
            right.transpose(),
            down.transpose(),
            forward.transpose(),
        ]);
        let translation = -(rotation * eye);
        Self::new(rotation, translation)
    }
}

/// Pinhole camera: intrinsics in pixels plus a world-to-camera pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub pose: RigidTransform,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        pose: RigidTransform,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if width < 1 || height < 1 {
            return Err(Error::InvalidCamera(format!(
                "image size must be at least 1x1 ({width}x{height})"
            )));
        }
        // Re-validate the pose so cameras built from raw fields are checked too.
        let pose = RigidTransform::new(pose.rotation, pose.translation)?;
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            pose,
        })
    }

    /// Projects a world point to (pixel coordinates, camera-space depth).
    /// Returns `None` when the point sits behind the camera plane
    /// (z <= DEPTH_EPSILON).
    pub fn project_point(&self, p: &Vec3) -> Option<(Vec2, f64)> {
        let pc = self.pose.apply(p);
        if pc.z <= DEPTH_EPSILON {
            return None;
        }
        let u = self.fx * pc.x / pc.z + self.cx;
        let v = self.fy * pc.y / pc.z + self.cy;
        Some((Vec2::new(u, v), pc.z))
    }

    /// Inverse of `project_point`: pixel coordinates plus depth to a world
    /// point. Rejects non-positive depth.
    pub fn unproject_pixel(&self, u: &Vec2, depth: f64) -> Result<Vec3> {
        if depth <= 0.0 {
            return Err(Error::NonPositiveDepth(depth));
        }
        let x = (u.x - self.cx) / self.fx * depth;
        let y = (u.y - self.cy) / self.fy * depth;
        let pc = Vec3::new(x, y, depth);
        Ok(self.pose.inverse().apply(&pc))
    }

    /// Continuous center of pixel (row, col).
    pub fn pixel_center(row: usize, col: usize) -> Vec2 {
        Vec2::new(col as f64 + 0.5, row as f64 + 0.5)
    }
}

/// One 3D primitive: geometry, opacity, an attached feature vector, and a
/// semantic label.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: Vec3,
    pub rotation: UnitQuaternion<f64>,
    pub scale: Vec3,
    pub opacity: f64,
    pub feature: Vec<f64>,
    pub label: u32,
}

impl Gaussian {
    pub fn new(
        mean: Vec3,
        rotation: UnitQuaternion<f64>,
        scale: Vec3,
        opacity: f64,
        feature: Vec<f64>,
        label: u32,
    ) -> Result<Self> {
        if !(scale.x > 0.0 && scale.y > 0.0 && scale.z > 0.0) {
            return Err(Error::InvalidGaussian(format!(
                "scale components must be positive ({scale:?})"
            )));
        }
        if !(0.0..=1.0).contains(&opacity) {
            return Err(Error::InvalidGaussian(format!(
                "opacity {opacity} outside [0, 1]"
            )));
        }
        if (rotation.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidGaussian("quaternion not unit".into()));
        }
        Ok(Self {
            mean,
            rotation,
            scale,
            opacity,
            feature,
            label,
        })
    }

    /// Isotropic Gaussian with identity rotation.
    pub fn isotropic(
        mean: Vec3,
        sigma: f64,
        opacity: f64,
        feature: Vec<f64>,
        label: u32,
    ) -> Result<Self> {
        Self::new(
            mean,
            UnitQuaternion::identity(),
            Vec3::new(sigma, sigma, sigma),
            opacity,
            feature,
            label,
        )
    }

    /// 3x3 covariance `R * diag(scale^2) * R^T`; symmetric positive definite.
    pub fn covariance(&self) -> Mat3 {
        let r = self.rotation.to_rotation_matrix().into_inner();
        let s2 = Mat3::from_diagonal(&Vec3::new(
            self.scale.x * self.scale.x,
            self.scale.y * self.scale.y,
            self.scale.z * self.scale.z,
        ));
        r * s2 * r.transpose()
    }
}

/// Builds a unit quaternion from (w, x, y, z) components, normalizing.
pub fn quat_from_wxyz(w: f64, x: f64, y: f64, z: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z))
}

/// Dense h x w x C grid of real values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    /// Builds a map from raw data, validating length and finiteness.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::InvalidFeatureMap(format!(
                "data length {} != {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidFeatureMap("non-finite entry".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Plain bilinear resampling to a new resolution under the shared
    /// pixel-center convention, clamping at borders.
    pub fn resize_bilinear(&self, new_height: usize, new_width: usize) -> FeatureMap {
        let mut out = FeatureMap::zeros(new_height, new_width, self.channels);
        let sy = self.height as f64 / new_height as f64;
        let sx = self.width as f64 / new_width as f64;
        for y in 0..new_height {
            for x in 0..new_width {
                let gy = (y as f64 + 0.5) * sy - 0.5;
                let gx = (x as f64 + 0.5) * sx - 0.5;
                let (y0, y1, fy) = clamped_lerp_indices(gy, self.height);
                let (x0, x1, fx) = clamped_lerp_indices(gx, self.width);
                let w00 = (1.0 - fy) * (1.0 - fx);
                let w01 = (1.0 - fy) * fx;
                let w10 = fy * (1.0 - fx);
                let w11 = fy * fx;
                let p00 = self.at(y0, x0);
                let p01 = self.at(y0, x1);
                let p10 = self.at(y1, x0);
                let p11 = self.at(y1, x1);
                let dst = out.at_mut(y, x);
                for c in 0..dst.len() {
                    dst[c] = w00 * p00[c] + w01 * p01[c] + w10 * p10[c] + w11 * p11[c];
                }
            }
        }
        out
    }
}

/// Splits a continuous grid coordinate into clamped neighbor indices and the
/// interpolation fraction toward the second neighbor.
pub(crate) fn clamped_lerp_indices(g: f64, size: usize) -> (usize, usize, f64) {
    let i0 = g.floor();
    let frac = g - i0;
    let i0 = i0 as i64;
    let i1 = i0 + 1;
    let clamp = |i: i64| i.clamp(0, size as i64 - 1) as usize;
    (clamp(i0), clamp(i1), frac)
}

/// H x W integer label grid aligned to an image. Label 0 is background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticMask {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl SemanticMask {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::InvalidMask(format!(
                "label length {} != {}x{}",
                labels.len(),
                height,
                width
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u32) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn label(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set_label(&mut self, y: usize, x: usize, label: u32) {
        self.labels[y * self.width + x] = label;
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }
}
