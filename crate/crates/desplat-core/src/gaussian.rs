//! Anisotropic 3D Gaussian primitive and its covariance/density math.

use crate::error::{Error, Result};
use crate::math::{exp, sigmoid, Mat3, Quat, Real, Vec3};
use alloc::format;

/// One scene element: an anisotropic 3D Gaussian with opacity and a
/// degree-0 RGB color.
///
/// Scale is stored as per-axis log standard deviations and opacity as a
/// logit, so every finite parameter vector is valid and gradient updates
/// need no constraints. The rotation quaternion is kept unnormalized and
/// normalized at use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPrimitive {
    pub mean: Vec3,
    pub log_scale: Vec3,
    pub rotation: Quat,
    pub raw_opacity: f64,
    pub color: Vec3,
}

impl GaussianPrimitive {
    /// Opacity in (0, 1).
    #[inline]
    pub fn opacity(&self) -> f64 {
        sigmoid(self.raw_opacity)
    }

    /// Per-axis standard deviations `exp(log_scale)`, componentwise > 0.
    #[inline]
    pub fn scale(&self) -> Vec3 {
        self.log_scale.exp_elementwise()
    }

    pub fn rotmat(&self) -> Result<Mat3> {
        quat_to_rotmat(self.rotation)
    }

    pub fn covariance(&self) -> Result<Mat3> {
        build_covariance(self.log_scale, self.rotation)
    }

    pub fn is_finite(&self) -> bool {
        self.mean.is_finite()
            && self.log_scale.is_finite()
            && self.rotation.is_finite()
            && self.raw_opacity.is_finite()
            && self.color.is_finite()
    }
}

/// Rotation matrix of a (w, x, y, z) quaternion, normalized internally.
/// Generic so the f32 renderer path can share it.
pub fn rotmat_from_quat<T: Real>(q: Quat<T>) -> Option<Mat3<T>> {
    let n2 = q.norm_squared();
    if !(n2.to_f64() > 0.0) || !n2.is_finite() {
        return None;
    }
    let inv = T::ONE / n2.sqrt();
    let (w, x, y, z) = (q.w * inv, q.x * inv, q.y * inv, q.z * inv);
    let two = T::from_f64(2.0);
    let one = T::ONE;
    Some(Mat3::from_rows([
        [
            one - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
        ],
        [
            two * (x * y + w * z),
            one - two * (x * x + z * z),
            two * (y * z - w * x),
        ],
        [
            two * (x * z - w * y),
            two * (y * z + w * x),
            one - two * (x * x + y * y),
        ],
    ]))
}

/// Rotation matrix of a quaternion; zero norm is an invalid parameter.
pub fn quat_to_rotmat(rotation: Quat) -> Result<Mat3> {
    rotmat_from_quat(rotation).ok_or_else(|| {
        Error::InvalidParameter(format!(
            "quaternion ({}, {}, {}, {}) has zero or non-finite norm",
            rotation.w, rotation.x, rotation.y, rotation.z
        ))
    })
}

/// Covariance `R * S * S^T * R^T` with `S = diag(exp(log_scale))`.
/// Symmetric positive-definite for all finite inputs.
pub fn build_covariance(log_scale: Vec3, rotation: Quat) -> Result<Mat3> {
    let r = quat_to_rotmat(rotation)?;
    let var = Vec3::new(
        exp(2.0 * log_scale.x),
        exp(2.0 * log_scale.y),
        exp(2.0 * log_scale.z),
    );
    Ok(crate::math::sym_rdr(&r, var))
}

/// Unnormalized Gaussian density `exp(-0.5 * (x - mean)^T Sigma^-1 (x - mean))`.
///
/// Evaluated in the primitive's local frame, which keeps the quadratic form
/// positive for all finite parameters. Equals 1 at `x = mean`.
pub fn evaluate_density(primitive: &GaussianPrimitive, x: Vec3) -> f64 {
    let r = match primitive.rotmat() {
        Ok(r) => r,
        // Invariant breach (zero quaternion); propagate as NaN rather than
        // inventing a density.
        Err(_) => return f64::NAN,
    };
    let local = r.tr_mul_vec(x - primitive.mean);
    let inv_s = Vec3::new(
        exp(-primitive.log_scale.x),
        exp(-primitive.log_scale.y),
        exp(-primitive.log_scale.z),
    );
    let u = local.mul_elementwise(inv_s);
    exp(-0.5 * u.norm_squared())
}
