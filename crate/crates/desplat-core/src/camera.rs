//! Pinhole camera with a rigid world-to-camera pose.

use crate::error::{Error, Result};
use crate::math::{Mat3, Vec3};
use alloc::format;

/// Camera space: x right, y down, z forward; a point is visible when its
/// camera-space z exceeds the near plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    /// Focal lengths in pixels (fx, fy).
    pub focal: [f64; 2],
    /// Principal point in pixels (cx, cy).
    pub principal_point: [f64; 2],
    /// Image size in pixels (width, height).
    pub resolution: [u32; 2],
    /// World-to-camera rotation (orthonormal, det +1).
    pub rotation: Mat3,
    /// World-to-camera translation: `p_cam = rotation * p_world + translation`.
    pub translation: Vec3,
}

impl Camera {
    pub fn new(
        focal: [f64; 2],
        principal_point: [f64; 2],
        resolution: [u32; 2],
        rotation: Mat3,
        translation: Vec3,
    ) -> Result<Self> {
        if !(focal[0] > 0.0 && focal[1] > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "focal lengths must be positive, got ({}, {})",
                focal[0], focal[1]
            )));
        }
        if resolution[0] == 0 || resolution[1] == 0 {
            return Err(Error::InvalidParameter(
                "resolution must be nonzero".into(),
            ));
        }
        let ortho_err = rotation.orthonormality_error();
        if ortho_err > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "rotation not orthonormal (max deviation {ortho_err:e})"
            )));
        }
        if (rotation.det() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "rotation determinant {} != +1",
                rotation.det()
            )));
        }
        if !rotation.is_finite() || !translation.is_finite() {
            return Err(Error::InvalidParameter("non-finite pose".into()));
        }
        Ok(Self {
            focal,
            principal_point,
            resolution,
            rotation,
            translation,
        })
    }

    /// Camera placed at `eye` looking at `target`.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        focal: [f64; 2],
        principal_point: [f64; 2],
        resolution: [u32; 2],
    ) -> Result<Self> {
        let forward = (target - eye).normalized();
        let mut right = up.cross(forward);
        if right.norm_squared() < 1e-12 {
            // Degenerate up direction; pick another axis.
            right = Vec3::new(1.0, 0.0, 0.0).cross(forward);
            if right.norm_squared() < 1e-12 {
                right = Vec3::new(0.0, 1.0, 0.0).cross(forward);
            }
        }
        let right = right.normalized();
        let down = forward.cross(right);
        let rotation = Mat3::from_rows([
            [right.x, right.y, right.z],
            [down.x, down.y, down.z],
            [forward.x, forward.y, forward.z],
        ]);
        let translation = -rotation.mul_vec(eye);
        Self::new(focal, principal_point, resolution, rotation, translation)
    }

    #[inline]
    pub fn world_to_cam(&self, p: Vec3) -> Vec3 {
        self.rotation.mul_vec(p) + self.translation
    }

    #[inline]
    pub fn width(&self) -> u32 {
        self.resolution[0]
    }

    #[inline]
    pub fn height(&self) -> u32 {
        self.resolution[1]
    }

    pub fn pixel_count(&self) -> usize {
        self.width() as usize * self.height() as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_puts_target_on_axis() {
        let cam = Camera::look_at(
            Vec3::new(3.0, 1.0, -2.0),
            Vec3::zero(),
            Vec3::new(0.0, 1.0, 0.0),
            [50.0, 50.0],
            [32.0, 32.0],
            [64, 64],
        )
        .unwrap();
        let p = cam.world_to_cam(Vec3::zero());
        assert!(p.x.abs() < 1e-12);
        assert!(p.y.abs() < 1e-12);
        let dist = (3.0f64 * 3.0 + 1.0 + 4.0) as f64;
        assert!((p.z - crate::math::sqrt(dist)).abs() < 1e-12);
        assert!(cam.rotation.orthonormality_error() < 1e-12);
        assert!((cam.rotation.det() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bad_rotation_rejected() {
        let skew = Mat3::from_rows([[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!(Camera::new([10.0, 10.0], [5.0, 5.0], [10, 10], skew, Vec3::zero()).is_err());
    }

    #[test]
    fn negative_focal_rejected() {
        let r = Mat3::identity();
        assert!(Camera::new([-1.0, 10.0], [5.0, 5.0], [10, 10], r, Vec3::zero()).is_err());
    }
}
