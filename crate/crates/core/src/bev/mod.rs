//! Top-down orthogonal camera, BEV feature rendering, segmentation head and
//! the head-only / joint training stages.

pub mod head;
pub mod train;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::buffer::RenderOutput;
use crate::camera::{Camera, Pose};
use crate::error::{Error, Result};
use crate::gaussian::Scene;
use crate::raster::{Frame, RenderConfig};

pub use head::{BevPrediction, SegHead};
pub use train::{bev_chain_step, evaluate_iou, height_sweep, train_stage2, train_stage3_joint, BevChainLoss, BevSample, ChainStep, IouReport, TrainConfig};

/// Segmentation classes, in channel order of the class logits and masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BevClass {
    Vehicle,
    Pedestrian,
    Lane,
}

impl BevClass {
    pub const ALL: [BevClass; 3] = [BevClass::Vehicle, BevClass::Pedestrian, BevClass::Lane];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            BevClass::Vehicle => "vehicle",
            BevClass::Pedestrian => "pedestrian",
            BevClass::Lane => "lane",
        }
    }
}

pub const NUM_CLASSES: usize = 3;

/// Square ego-centered BEV grid seen from an orthogonal camera above the ego origin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BevConfig {
    /// Pixels per side.
    pub resolution: usize,
    /// Meters per side.
    pub range: f64,
    /// Camera height above the ego origin, meters.
    pub height: f64,
}

impl Default for BevConfig {
    fn default() -> Self {
        BevConfig {
            resolution: 200,
            range: 100.0,
            height: 3.0,
        }
    }
}

impl BevConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || !(self.range > 0.0) || !self.height.is_finite() {
            return Err(Error::InvalidConfig(format!("invalid BEV config {self:?}")));
        }
        Ok(())
    }

    /// Pixels per meter.
    pub fn scale(&self) -> f64 {
        self.resolution as f64 / self.range
    }

    pub fn principal(&self) -> f64 {
        self.resolution as f64 / 2.0
    }

    /// Continuous BEV pixel coordinates of a world ground point.
    pub fn world_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        (self.scale() * x + self.principal(), self.scale() * y + self.principal())
    }

    /// World ground coordinates of BEV pixel coordinates.
    pub fn pixel_to_world(&self, u: f64, v: f64) -> (f64, f64) {
        ((u - self.principal()) / self.scale(), (v - self.principal()) / self.scale())
    }
}

/// Orthogonal camera at `(0, 0, height)` looking straight down.
///
/// The pose `diag(1, 1, −1)` keeps world x→u and y→v and gives depth
/// `height − z`, so anything above the camera is culled.
pub fn make_bev_camera(cfg: &BevConfig) -> Result<Camera> {
    cfg.validate()?;
    let pose = Pose {
        rotation: Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)),
        translation: Vector3::new(0.0, 0.0, cfg.height),
    };
    let s = cfg.scale();
    let c = cfg.principal();
    Camera::orthogonal(s, s, c, c, pose, cfg.resolution, cfg.resolution)
}

/// Renders the scene through the BEV camera. The feature buffer is the BEV feature map.
pub fn render_bev_features(scene: &Scene, cfg: &BevConfig) -> Result<RenderOutput> {
    let cam = make_bev_camera(cfg)?;
    Ok(Frame::new(scene, &cam, RenderConfig::default())?.render())
}

/// Intersection over union of two binary masks. An empty union yields
/// `(1.0, true)`; the flag marks the value as undefined.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<(f64, bool)> {
    let (inter, union) = iou_counts(pred, gt)?;
    if union == 0 {
        Ok((1.0, true))
    } else {
        Ok((inter as f64 / union as f64, false))
    }
}

/// `(|pred ∩ gt|, |pred ∪ gt|)`.
pub fn iou_counts(pred: &[bool], gt: &[bool]) -> Result<(usize, usize)> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!("iou: {} vs {} pixels", pred.len(), gt.len())));
    }
    let mut inter = 0;
    let mut union = 0;
    for (a, b) in pred.iter().zip(gt) {
        inter += usize::from(*a && *b);
        union += usize::from(*a || *b);
    }
    Ok((inter, union))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::Gaussian;
    use crate::projection::project;

    #[test]
    fn default_camera_intrinsics() {
        let cam = make_bev_camera(&BevConfig::default()).unwrap();
        assert_eq!((cam.fx, cam.fy, cam.cx, cam.cy), (2.0, 2.0, 100.0, 100.0));
        assert_eq!(cam.center(), Vector3::new(0.0, 0.0, 3.0));
    }

    #[test]
    fn ground_point_maps_to_expected_pixel() {
        let cam = make_bev_camera(&BevConfig::default()).unwrap();
        let (m, c) = crate::projection::world_to_camera(&Vector3::new(25.0, -25.0, 0.0), &Matrix3::identity(), &cam.pose);
        let g = project(&m, &c, &cam).visible().unwrap();
        assert_eq!((g.mean2d.x, g.mean2d.y), (150.0, 50.0));
        assert_eq!(g.depth, 3.0);
        let o = crate::projection::world_to_camera(&Vector3::zeros(), &Matrix3::identity(), &cam.pose);
        let g = project(&o.0, &o.1, &cam).visible().unwrap();
        assert_eq!((g.mean2d.x, g.mean2d.y), (100.0, 100.0));
    }

    #[test]
    fn height_changes_only_culling() {
        let mut scene = Scene::new(2);
        scene.gaussians.push(Gaussian::isotropic(Vector3::new(3.0, 1.0, 0.0), 1.0, 0.9, [0.5; 3], vec![1.0, 0.0]));
        scene.gaussians.push(Gaussian::isotropic(Vector3::new(-4.0, 2.0, 1.0), 1.0, 0.9, [0.5; 3], vec![0.0, 1.0]));
        let small = BevConfig {
            resolution: 40,
            range: 20.0,
            height: 3.0,
        };
        let a = render_bev_features(&scene, &small).unwrap();
        let b = render_bev_features(&scene, &BevConfig { height: 5.0, ..small }).unwrap();
        assert_eq!(a.feature, b.feature);
        scene.gaussians.push(Gaussian::isotropic(Vector3::new(3.0, 1.0, 4.0), 1.0, 0.9, [0.5; 3], vec![5.0, 5.0]));
        let c = render_bev_features(&scene, &small).unwrap();
        assert_eq!(a.feature, c.feature, "gaussian above the camera must be culled");
        let d = render_bev_features(&scene, &BevConfig { height: 5.0, ..small }).unwrap();
        assert_ne!(a.feature, d.feature);
    }

    #[test]
    fn single_ground_gaussian_is_local() {
        let mut scene = Scene::new(1);
        scene.gaussians.push(Gaussian::isotropic(Vector3::zeros(), 0.5, 0.9, [0.5; 3], vec![1.0]));
        let out = render_bev_features(&scene, &BevConfig::default()).unwrap();
        for y in 0..200 {
            for x in 0..200 {
                let v = out.feature.at(x, y, 0);
                let d2 = (x as f64 + 0.5 - 100.0).powi(2) + (y as f64 + 0.5 - 100.0).powi(2);
                if d2 > 25.0 {
                    assert_eq!(v, 0.0);
                }
            }
        }
        assert!(out.feature.at(100, 100, 0) > 0.5);
        assert_eq!(render_bev_features(&Scene::new(1), &BevConfig::default()).unwrap().feature.data.iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn iou_examples() {
        let a = [true, true, false, false];
        assert_eq!(iou(&a, &a).unwrap(), (1.0, false));
        assert_eq!(iou(&[true, false], &[false, true]).unwrap(), (0.0, false));
        assert_eq!(iou(&[true, false, false, false], &[true, true, false, false]).unwrap(), (0.5, false));
        assert_eq!(iou(&[false; 3], &[false; 3]).unwrap(), (1.0, true));
        assert!(iou(&[true], &[true, false]).is_err());
    }
}
