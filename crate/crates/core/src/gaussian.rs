//! The Gaussian primitive and the scene container.
//!
//! Covariances are stored factored as a log-scale vector and a quaternion so
//! that unconstrained parameter updates always yield a positive definite
//! `Σ = R·diag(s²)·Rᵀ`. Opacity is stored as a logit and colors as spherical
//! harmonic coefficients (degree 0, optionally degree 1).

use nalgebra::{Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Degree-0 real spherical harmonic constant.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
/// Degree-1 real spherical harmonic constant.
pub const SH_C1: f64 = 0.488_602_511_902_919_9;

pub const DEFAULT_FEATURE_DIM: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShDegree {
    #[default]
    Zero,
    One,
}

impl ShDegree {
    /// Number of RGB coefficient triples per Gaussian.
    pub fn coeff_count(self) -> usize {
        match self {
            ShDegree::Zero => 1,
            ShDegree::One => 4,
        }
    }
}

/// Raw parameter groups of a Gaussian, in on-disk field order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Mean,
    ScaleLog,
    Rotation,
    Opacity,
    Color,
    Feature,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Mean,
        ParamGroup::ScaleLog,
        ParamGroup::Rotation,
        ParamGroup::Opacity,
        ParamGroup::Color,
        ParamGroup::Feature,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Mean => "mean",
            ParamGroup::ScaleLog => "scale_log",
            ParamGroup::Rotation => "rotation",
            ParamGroup::Opacity => "opacity_logit",
            ParamGroup::Color => "color_coeffs",
            ParamGroup::Feature => "feature",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    /// World-frame center in meters.
    pub mean: Vector3<f64>,
    pub scale_log: Vector3<f64>,
    /// Quaternion stored as `(w, x, y, z)`.
    pub rotation: Vector4<f64>,
    pub opacity_logit: f64,
    /// RGB triples; index 0 is the degree-0 term, 1..4 the degree-1 terms.
    pub color_coeffs: Vec<[f64; 3]>,
    pub feature: Vec<f64>,
}

impl Gaussian {
    /// An isotropic Gaussian with identity rotation and a plain RGB color.
    pub fn isotropic(mean: Vector3<f64>, scale: f64, opacity: f64, rgb: [f64; 3], feature: Vec<f64>) -> Self {
        Gaussian {
            mean,
            scale_log: Vector3::repeat(scale.ln()),
            rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
            opacity_logit: logit(opacity),
            color_coeffs: vec![rgb_to_dc(rgb)],
            feature,
        }
    }

    /// Width of one parameter group for this Gaussian.
    pub fn group_len(&self, group: ParamGroup) -> usize {
        match group {
            ParamGroup::Mean | ParamGroup::ScaleLog => 3,
            ParamGroup::Rotation => 4,
            ParamGroup::Opacity => 1,
            ParamGroup::Color => 3 * self.color_coeffs.len(),
            ParamGroup::Feature => self.feature.len(),
        }
    }

    pub fn param(&self, group: ParamGroup, k: usize) -> f64 {
        match group {
            ParamGroup::Mean => self.mean[k],
            ParamGroup::ScaleLog => self.scale_log[k],
            ParamGroup::Rotation => self.rotation[k],
            ParamGroup::Opacity => self.opacity_logit,
            ParamGroup::Color => self.color_coeffs[k / 3][k % 3],
            ParamGroup::Feature => self.feature[k],
        }
    }

    pub fn param_mut(&mut self, group: ParamGroup, k: usize) -> &mut f64 {
        match group {
            ParamGroup::Mean => &mut self.mean[k],
            ParamGroup::ScaleLog => &mut self.scale_log[k],
            ParamGroup::Rotation => &mut self.rotation[k],
            ParamGroup::Opacity => &mut self.opacity_logit,
            ParamGroup::Color => &mut self.color_coeffs[k / 3][k % 3],
            ParamGroup::Feature => &mut self.feature[k],
        }
    }

    /// Rescales the quaternion to unit length. Zero quaternions are left alone.
    pub fn normalize_rotation(&mut self) {
        let n = self.rotation.norm();
        if n > 0.0 {
            self.rotation /= n;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub gaussians: Vec<Gaussian>,
    pub feature_dim: usize,
    pub sh_degree: ShDegree,
}

impl Scene {
    pub fn new(feature_dim: usize) -> Self {
        Scene {
            gaussians: Vec::new(),
            feature_dim,
            sh_degree: ShDegree::Zero,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Checks that every Gaussian matches the scene's feature width and SH degree.
    pub fn validate(&self) -> Result<()> {
        let coeffs = self.sh_degree.coeff_count();
        for (i, g) in self.gaussians.iter().enumerate() {
            if g.feature.len() != self.feature_dim {
                return Err(Error::ShapeMismatch(format!(
                    "gaussian {i} has feature length {}, scene feature_dim is {}",
                    g.feature.len(),
                    self.feature_dim
                )));
            }
            if g.color_coeffs.len() != coeffs {
                return Err(Error::ShapeMismatch(format!(
                    "gaussian {i} has {} color coefficient triples, expected {coeffs}",
                    g.color_coeffs.len()
                )));
            }
        }
        Ok(())
    }

    /// Flattens one parameter group across all Gaussians.
    pub fn group_values(&self, group: ParamGroup) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.gaussians {
            for k in 0..g.group_len(group) {
                out.push(g.param(group, k));
            }
        }
        out
    }

    /// Writes a flattened parameter group back; inverse of [`Scene::group_values`].
    pub fn set_group_values(&mut self, group: ParamGroup, values: &[f64]) {
        let mut it = values.iter();
        for g in &mut self.gaussians {
            for k in 0..g.group_len(group) {
                *g.param_mut(group, k) = *it.next().expect("parameter vector too short");
            }
        }
        debug_assert!(it.next().is_none(), "parameter vector too long");
    }

    /// FNV-1a over the bit patterns of every parameter, in storage order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: f64| {
            for b in x.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for g in &self.gaussians {
            for group in ParamGroup::ALL {
                for k in 0..g.group_len(group) {
                    eat(g.param(group, k));
                }
            }
        }
        h
    }
}

/// A Gaussian with every parameter mapped to its constrained form.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivatedGaussian {
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
    pub opacity: f64,
    pub rgb: [f64; 3],
    pub feature: Vec<f64>,
}

/// Maps raw parameters to (μ, Σ, σ, rgb, f).
///
/// `view_dir` is the unit direction from the camera to the Gaussian; the
/// degree-1 color term is only evaluated when it is supplied.
pub fn activate(gaussian: &Gaussian, view_dir: Option<&Vector3<f64>>) -> Result<ActivatedGaussian> {
    let rot = rotation_matrix(&gaussian.rotation).ok_or(Error::DegenerateRotation { index: 0 })?;
    Ok(ActivatedGaussian {
        mean: gaussian.mean,
        cov: covariance(&rot, &gaussian.scale_log),
        opacity: logistic(gaussian.opacity_logit),
        rgb: eval_color(&gaussian.color_coeffs, view_dir),
        feature: gaussian.feature.clone(),
    })
}

pub(crate) fn covariance(rot: &Matrix3<f64>, scale_log: &Vector3<f64>) -> Matrix3<f64> {
    let s2 = scale_log.map(|s| (2.0 * s).exp());
    let m = rot * Matrix3::from_diagonal(&s2);
    let cov = m * rot.transpose();
    // exact symmetry regardless of rounding order
    (cov + cov.transpose()) * 0.5
}

/// Unclamped SH color; callers clamp at zero.
pub(crate) fn eval_color_raw(coeffs: &[[f64; 3]], view_dir: Option<&Vector3<f64>>) -> [f64; 3] {
    let mut rgb = [0.0; 3];
    for (c, out) in rgb.iter_mut().enumerate() {
        *out = 0.5 + SH_C0 * coeffs[0][c];
    }
    if let (Some(d), true) = (view_dir, coeffs.len() >= 4) {
        for (c, out) in rgb.iter_mut().enumerate() {
            *out += -SH_C1 * d.y * coeffs[1][c] + SH_C1 * d.z * coeffs[2][c] - SH_C1 * d.x * coeffs[3][c];
        }
    }
    rgb
}

pub fn eval_color(coeffs: &[[f64; 3]], view_dir: Option<&Vector3<f64>>) -> [f64; 3] {
    eval_color_raw(coeffs, view_dir).map(|c| c.max(0.0))
}

/// Degree-0 coefficient that reproduces `rgb` exactly.
pub fn rgb_to_dc(rgb: [f64; 3]) -> [f64; 3] {
    rgb.map(|c| (c - 0.5) / SH_C0)
}

/// Rotation matrix of a (not necessarily unit) quaternion `(w, x, y, z)`.
/// Returns `None` for a zero quaternion.
pub fn rotation_matrix(q: &Vector4<f64>) -> Option<Matrix3<f64>> {
    let n = q.norm();
    if !(n > 0.0) || !n.is_finite() {
        return None;
    }
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Some(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// Quaternion `(w, x, y, z)` for a rotation of `angle` radians about `axis`.
pub fn axis_angle_quat(axis: Vector3<f64>, angle: f64) -> Vector4<f64> {
    let a = axis.normalize() * (0.5 * angle).sin();
    Vector4::new((0.5 * angle).cos(), a.x, a.y, a.z)
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}
