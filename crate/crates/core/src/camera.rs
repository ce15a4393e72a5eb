use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProjectionMode {
    Perspective,
    Orthogonal,
}

/// Rigid world→camera transform: `x_cam = rotation · x_world + translation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Pose of a camera at `center` whose +Z axis points along `forward` and
    /// whose +Y axis points as close to `down` as orthogonality allows.
    pub fn looking(center: Vector3<f64>, forward: Vector3<f64>, down: Vector3<f64>) -> Self {
        let z = forward.normalize();
        let y = (down - z * down.dot(&z)).normalize();
        let x = y.cross(&z);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Pose {
            rotation,
            translation: -(rotation * center),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }
}

/// Pinhole or orthogonal camera. Pixel `(i, j)` is sampled at `(i + 0.5, j + 0.5)`.
///
/// Perspective: `u = fx·X/Z + cx`. Orthogonal: `u = fx·X + cx` with `fx` in
/// pixels per meter, and depth is camera-space `Z` in both modes.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub mode: ProjectionMode,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub pose: Pose,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn perspective(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        pose: Pose,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let cam = Camera {
            mode: ProjectionMode::Perspective,
            fx,
            fy,
            cx,
            cy,
            pose,
            width,
            height,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn orthogonal(fx: f64, fy: f64, cx: f64, cy: f64, pose: Pose, width: usize, height: usize) -> Result<Self> {
        let cam = Camera {
            mode: ProjectionMode::Orthogonal,
            fx,
            fy,
            cx,
            cy,
            pose,
            width,
            height,
            near: 0.0,
            far: f64::INFINITY,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Perspective camera from a horizontal field of view, principal point at the image center.
    pub fn from_fov(hfov_rad: f64, pose: Pose, width: usize, height: usize, near: f64, far: f64) -> Result<Self> {
        let f = 0.5 * width as f64 / (0.5 * hfov_rad).tan();
        Camera::perspective(f, f, 0.5 * width as f64, 0.5 * height as f64, pose, width, height, near, far)
    }

    /// Orthogonal cameras may use an improper (det −1) pose so that a top-down
    /// view keeps world x→u and world y→v while looking down.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidCamera(msg));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad(format!("focal scales must be positive, got fx={} fy={}", self.fx, self.fy));
        }
        if self.width == 0 || self.height == 0 {
            return bad(format!("empty image {}x{}", self.width, self.height));
        }
        if self.mode == ProjectionMode::Perspective && !(0.0 < self.near && self.near < self.far) {
            return bad(format!("need 0 < near < far, got near={} far={}", self.near, self.far));
        }
        let r = &self.pose.rotation;
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if !(err < 1e-9) {
            return bad(format!("pose rotation is not orthonormal (error {err:e})"));
        }
        let det = r.determinant();
        let det_ok = match self.mode {
            ProjectionMode::Perspective => (det - 1.0).abs() < 1e-9,
            ProjectionMode::Orthogonal => (det.abs() - 1.0).abs() < 1e-9,
        };
        if !det_ok {
            return bad(format!("pose rotation has determinant {det}"));
        }
        if !self.pose.translation.iter().all(|t| t.is_finite()) {
            return bad("non-finite translation".into());
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn center(&self) -> Vector3<f64> {
        self.pose.center()
    }

    /// World-space direction of the camera's +Z axis.
    pub fn forward(&self) -> Vector3<f64> {
        self.pose.rotation.row(2).transpose()
    }

    /// Unit direction along which the camera sees a world point.
    pub fn view_dir(&self, world: &Vector3<f64>) -> Vector3<f64> {
        match self.mode {
            ProjectionMode::Perspective => (world - self.center()).normalize(),
            ProjectionMode::Orthogonal => self.forward(),
        }
    }

    /// Camera-space point seen at pixel coordinates `(u, v)` with depth `z`.
    pub fn unproject_cam(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        match self.mode {
            ProjectionMode::Perspective => Vector3::new((u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z),
            ProjectionMode::Orthogonal => Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, z),
        }
    }

    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        let cam = self.unproject_cam(u, v, z);
        self.pose.rotation.transpose() * (cam - self.pose.translation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn looking_pose_is_proper_and_maps_center_to_origin() {
        let c = Vector3::new(1.0, 2.0, 1.6);
        let pose = Pose::looking(c, Vector3::new(1.0, 1.0, -0.2), -Vector3::z());
        assert!((pose.rotation.determinant() - 1.0).abs() < 1e-12);
        assert!(pose.apply(&c).norm() < 1e-12);
        assert!((pose.center() - c).norm() < 1e-12);
    }

    #[test]
    fn rejects_bad_intrinsics_and_planes() {
        let p = Pose::identity();
        assert!(Camera::perspective(0.0, 1.0, 0.0, 0.0, p, 4, 4, 0.1, 10.0).is_err());
        assert!(Camera::perspective(1.0, 1.0, 0.0, 0.0, p, 4, 4, 1.0, 0.5).is_err());
        assert!(Camera::perspective(1.0, 1.0, 0.0, 0.0, p, 4, 4, 0.0, 5.0).is_err());
        assert!(Camera::perspective(1.0, 1.0, 0.0, 0.0, p, 4, 4, 0.1, 5.0).is_ok());
    }

    #[test]
    fn reflections_only_allowed_for_orthogonal() {
        let flip = Pose {
            rotation: Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)),
            translation: Vector3::zeros(),
        };
        assert!(Camera::orthogonal(2.0, 2.0, 100.0, 100.0, flip, 200, 200).is_ok());
        assert!(Camera::perspective(2.0, 2.0, 100.0, 100.0, flip, 200, 200, 0.1, 10.0).is_err());
    }

    #[test]
    fn unproject_inverts_projection() {
        let pose = Pose::looking(Vector3::new(0.0, 0.0, 2.0), Vector3::x(), -Vector3::z());
        let cam = Camera::from_fov(1.2, pose, 64, 48, 0.1, 100.0).unwrap();
        let w = cam.unproject(10.5, 20.5, 7.0);
        let c = cam.pose.apply(&w);
        assert!((c.z - 7.0).abs() < 1e-12);
        assert!((cam.fx * c.x / c.z + cam.cx - 10.5).abs() < 1e-12);
        assert!((cam.fy * c.y / c.z + cam.cy - 20.5).abs() < 1e-12);
    }
}
