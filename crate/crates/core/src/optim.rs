//! Adam over raw Gaussian parameters and stage-1 scene fitting.

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::buffer::{DepthMap, Map};
use crate::camera::{Camera, ProjectionMode};
use crate::error::{Error, Result};
use crate::gaussian::{logistic, rgb_to_dc, Gaussian, ParamGroup, Scene};
use crate::grad::GaussianGrads;
use crate::loss::{loss_total, render_view_loss, LossConfig, RenderLossParts, ViewTarget};
use crate::raster::{Frame, RenderConfig};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam moments for one flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// One Adam update of `params` in place. Non-finite gradients leave both
    /// `params` and the state untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam state holds {} values, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if !grads.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFiniteGradient("adam step"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
        Ok(())
    }
}

/// Per-group constant learning rates. The mean rate is relative to the scene extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub mean_per_extent: f64,
    pub scale_log: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
    pub feature: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            mean_per_extent: 1.6e-4,
            scale_log: 5e-3,
            rotation: 5e-3,
            opacity: 5e-2,
            color: 2.5e-3,
            feature: 2.5e-3,
        }
    }
}

impl LearningRates {
    /// Every group rate multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        LearningRates {
            mean_per_extent: self.mean_per_extent * k,
            scale_log: self.scale_log * k,
            rotation: self.rotation * k,
            opacity: self.opacity * k,
            color: self.color * k,
            feature: self.feature * k,
        }
    }

    pub fn for_group(&self, g: ParamGroup, extent: f64) -> f64 {
        match g {
            ParamGroup::Mean => self.mean_per_extent * extent,
            ParamGroup::ScaleLog => self.scale_log,
            ParamGroup::Rotation => self.rotation,
            ParamGroup::Opacity => self.opacity,
            ParamGroup::Color => self.color,
            ParamGroup::Feature => self.feature,
        }
    }
}

/// Half the diagonal of the axis-aligned box around all means.
pub fn scene_extent(scene: &Scene) -> f64 {
    if scene.is_empty() {
        return 1.0;
    }
    let mut lo = scene.gaussians[0].mean;
    let mut hi = lo;
    for g in &scene.gaussians {
        lo = lo.inf(&g.mean);
        hi = hi.sup(&g.mean);
    }
    let e = 0.5 * (hi - lo).norm();
    if e > 0.0 {
        e
    } else {
        1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Fit,
    HeadOnly,
    Joint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub stage: Stage,
    pub iterations: usize,
    pub frozen: Vec<ParamGroup>,
}

impl StageConfig {
    pub fn new(stage: Stage, iterations: usize) -> Self {
        let frozen = match stage {
            Stage::HeadOnly => ParamGroup::ALL.to_vec(),
            Stage::Fit | Stage::Joint => Vec::new(),
        };
        StageConfig {
            stage,
            iterations,
            frozen,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage == Stage::HeadOnly && self.frozen.len() != ParamGroup::ALL.len() {
            return Err(Error::InvalidConfig("head_only stage must freeze every Gaussian group".into()));
        }
        Ok(())
    }
}

/// Adam over the six parameter groups of a scene with clipping and freezing.
#[derive(Clone, Debug)]
pub struct SceneOptimizer {
    states: Vec<AdamState>,
    lrs: [f64; 6],
    frozen: [bool; 6],
    pub clip_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub clipped: bool,
}

pub const DEFAULT_CLIP_NORM: f64 = 10.0;

impl SceneOptimizer {
    pub fn new(scene: &Scene, lrs: &LearningRates, frozen: &[ParamGroup]) -> Self {
        let extent = scene_extent(scene);
        let proto = GaussianGrads::zeros(scene);
        SceneOptimizer {
            states: ParamGroup::ALL.iter().map(|g| AdamState::new(proto.group(*g).len())).collect(),
            lrs: ParamGroup::ALL.map(|g| lrs.for_group(g, extent)),
            frozen: ParamGroup::ALL.map(|g| frozen.contains(&g)),
            clip_norm: DEFAULT_CLIP_NORM,
        }
    }

    pub fn learning_rate(&self, g: ParamGroup) -> f64 {
        self.lrs[g.index()]
    }

    pub fn step(&mut self, scene: &mut Scene, grads: &GaussianGrads) -> Result<StepInfo> {
        if !grads.is_finite() {
            return Err(Error::NonFiniteGradient("scene gradients"));
        }
        let norm_sq: f64 = ParamGroup::ALL
            .iter()
            .filter(|g| !self.frozen[g.index()])
            .map(|g| grads.group(*g).iter().map(|v| v * v).sum::<f64>())
            .sum();
        let grad_norm = norm_sq.sqrt();
        let clipped = grad_norm > self.clip_norm;
        let k = if clipped { self.clip_norm / grad_norm } else { 1.0 };
        for g in ParamGroup::ALL {
            if self.frozen[g.index()] {
                continue;
            }
            let mut values = scene.group_values(g);
            let scaled: Vec<f64> = grads.group(g).iter().map(|v| v * k).collect();
            self.states[g.index()].step(&mut values, &scaled, self.lrs[g.index()])?;
            scene.set_group_values(g, &values);
        }
        if !self.frozen[ParamGroup::Rotation.index()] {
            scene.gaussians.iter_mut().for_each(Gaussian::normalize_rotation);
        }
        Ok(StepInfo { grad_norm, clipped })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub iterations: usize,
    pub lr: LearningRates,
    pub loss: LossConfig,
    pub frozen: Vec<ParamGroup>,
    pub clip_norm: f64,
    pub divergence_limit: f64,
    pub render: RenderConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 500,
            lr: LearningRates::default(),
            loss: LossConfig::default(),
            frozen: Vec::new(),
            clip_norm: DEFAULT_CLIP_NORM,
            divergence_limit: 1e6,
            render: RenderConfig::default(),
        }
    }
}

/// Loss of the scene as it was at the start of `iteration`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub render: f64,
    pub depth_l1: f64,
    pub silog: f64,
    pub feature: f64,
    pub total: f64,
}

impl LossRecord {
    fn new(iteration: usize, parts: &RenderLossParts, total: f64) -> Self {
        LossRecord {
            iteration,
            render: parts.render,
            depth_l1: parts.depth_l1,
            silog: parts.silog,
            feature: parts.feature,
            total,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub scene: Scene,
    pub curve: Vec<LossRecord>,
    /// Loss of the returned scene.
    pub final_loss: LossRecord,
}

/// View-averaged render loss and its gradient for `scene`.
pub fn evaluate_views(
    scene: &Scene,
    views: &[ViewTarget],
    cameras: &[Camera],
    loss: &LossConfig,
    render: &RenderConfig,
    with_grad: bool,
) -> Result<(RenderLossParts, f64, Option<GaussianGrads>)> {
    if views.len() != cameras.len() || views.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} views vs {} cameras", views.len(), cameras.len())));
    }
    let k = 1.0 / views.len() as f64;
    let mut parts = RenderLossParts::default();
    let mut grads = with_grad.then(|| GaussianGrads::zeros(scene));
    for (view, cam) in views.iter().zip(cameras) {
        let frame = Frame::new(scene, cam, *render)?;
        let out = frame.render();
        let (p, up) = render_view_loss(&out, view, loss)?;
        parts.add_scaled(&p, k);
        if let Some(acc) = grads.as_mut() {
            let mut g = frame.backward(&up)?;
            g.scale(k);
            acc.add_assign(&g);
        }
    }
    Ok((parts, loss_total(&parts, loss), grads))
}

/// Full-batch render → loss → backward → Adam loop over all views.
pub fn fit_scene(views: &[ViewTarget], cameras: &[Camera], init: Scene, cfg: &FitConfig) -> Result<FitResult> {
    if init.is_empty() {
        return Err(Error::InvalidConfig("cannot fit an empty scene".into()));
    }
    cfg.loss.validate()?;
    let mut scene = init;
    let mut opt = SceneOptimizer::new(&scene, &cfg.lr, &cfg.frozen);
    opt.clip_norm = cfg.clip_norm;
    let mut curve = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let (parts, total, grads) = evaluate_views(&scene, views, cameras, &cfg.loss, &cfg.render, true)?;
        if !total.is_finite() || total > cfg.divergence_limit {
            return Err(Error::Divergence { iteration: it, loss: total });
        }
        curve.push(LossRecord::new(it, &parts, total));
        let info = opt.step(&mut scene, &grads.expect("gradients requested"))?;
        if it % 50 == 0 {
            info!("fit iter {it}: total {total:.6} render {:.6} |g| {:.3e}", parts.render, info.grad_norm);
        } else {
            debug!("fit iter {it}: total {total:.6}");
        }
    }
    let (parts, total, _) = evaluate_views(&scene, views, cameras, &cfg.loss, &cfg.render, false)?;
    if !total.is_finite() || total > cfg.divergence_limit {
        return Err(Error::Divergence {
            iteration: cfg.iterations,
            loss: total,
        });
    }
    Ok(FitResult {
        scene,
        curve,
        final_loss: LossRecord::new(cfg.iterations, &parts, total),
    })
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn moving_average(values: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= w {
            sum -= values[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

/// Sampling and initialization choices for [`init_scene_from_depth`].
#[derive(Clone, Debug, PartialEq)]
pub struct InitOptions {
    pub stride: usize,
    pub feature_dim: usize,
    /// Scale as a multiple of the sampled pixel footprint.
    pub footprint_scale: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        InitOptions {
            stride: 4,
            feature_dim: crate::gaussian::DEFAULT_FEATURE_DIM,
            footprint_scale: 0.5,
        }
    }
}

/// One Gaussian per sampled valid depth pixel, placed at the unprojected point.
///
/// Colors come from `images` when given, features from `features` when given
/// (zero otherwise), opacity starts at 0.5.
pub fn init_scene_from_depth(
    depths: &[DepthMap],
    cameras: &[Camera],
    images: Option<&[Map]>,
    features: Option<&[Map]>,
    opts: &InitOptions,
) -> Result<Scene> {
    if depths.len() != cameras.len() {
        return Err(Error::ShapeMismatch(format!("{} depth maps vs {} cameras", depths.len(), cameras.len())));
    }
    if opts.stride == 0 {
        return Err(Error::InvalidConfig("stride must be positive".into()));
    }
    let per_view: Vec<Vec<Gaussian>> = depths
        .par_iter()
        .zip(cameras)
        .enumerate()
        .map(|(v, (d, cam))| {
            let mut out = Vec::new();
            for y in (0..d.depth.height).step_by(opts.stride) {
                for x in (0..d.depth.width).step_by(opts.stride) {
                    let p = y * d.depth.width + x;
                    let z = d.depth.data[p];
                    if !d.valid[p] || !z.is_finite() {
                        continue;
                    }
                    let (u, vv) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mean = cam.unproject(u, vv, z);
                    let footprint = match cam.mode {
                        ProjectionMode::Perspective => z * opts.stride as f64 / cam.fx,
                        ProjectionMode::Orthogonal => opts.stride as f64 / cam.fx,
                    };
                    let rgb = images.map_or([0.5; 3], |im| {
                        let px = im[v].pixel(p);
                        [px[0], px[1], px[2]]
                    });
                    let feature = features.map_or(vec![0.0; opts.feature_dim], |f| f[v].pixel(p).to_vec());
                    let mut g = Gaussian::isotropic(mean, opts.footprint_scale * footprint, 0.5, [0.5; 3], feature);
                    g.color_coeffs[0] = rgb_to_dc(rgb);
                    out.push(g);
                }
            }
            out
        })
        .collect();
    let gaussians: Vec<Gaussian> = per_view.into_iter().flatten().collect();
    if gaussians.is_empty() {
        return Err(Error::NoValidPixels);
    }
    let mut scene = Scene::new(gaussians[0].feature.len());
    scene.gaussians = gaussians;
    debug_assert!(scene.gaussians.iter().all(|g| (logistic(g.opacity_logit) - 0.5).abs() < 1e-12));
    scene.validate()?;
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Pose;
    use crate::raster::render;
    use nalgebra::Vector3;

    #[test]
    fn zero_grads_keep_params_and_advance_step() {
        let mut s = AdamState::new(3);
        let mut p = vec![1.0, -2.0, 3.0];
        s.step(&mut p, &[0.0; 3], 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = AdamState::new(1);
        let mut p = vec![0.0];
        s.step(&mut p, &[1.0], 0.1).unwrap();
        // m̂ = 1, v̂ = 1 ⇒ Δ = −0.1·1/(1 + 1e-8)
        assert_close!(p[0], -0.1 / (1.0 + ADAM_EPS), 1e-15);
    }

    #[test]
    fn non_finite_grads_leave_state_untouched() {
        let mut s = AdamState::new(2);
        let mut p = vec![1.0, 2.0];
        s.step(&mut p, &[0.5, 0.5], 0.1).unwrap();
        let (before_s, before_p) = (s.clone(), p.clone());
        assert!(s.step(&mut p, &[f64::NAN, 1.0], 0.1).is_err());
        assert_eq!(s, before_s);
        assert_eq!(p, before_p);
    }

    fn tiny_scene() -> Scene {
        let mut scene = Scene::new(2);
        for k in 0..4 {
            let mut g = Gaussian::isotropic(Vector3::new(k as f64, -(k as f64), 0.5), 0.7, 0.6, [0.2, 0.5, 0.8], vec![1.0, 0.5]);
            g.rotation = crate::gaussian::axis_angle_quat(Vector3::new(1.0, 2.0, 0.5), 0.3 * k as f64);
            scene.gaussians.push(g);
        }
        scene
    }

    #[test]
    fn frozen_groups_are_bit_identical() {
        let mut scene = tiny_scene();
        let before = scene.clone();
        let mut grads = GaussianGrads::zeros(&scene);
        for g in grads.groups.iter_mut() {
            g.iter_mut().enumerate().for_each(|(k, v)| *v = 0.1 * (k as f64 + 1.0));
        }
        let mut opt = SceneOptimizer::new(&scene, &LearningRates::default(), &[ParamGroup::Feature, ParamGroup::Rotation]);
        for _ in 0..5 {
            opt.step(&mut scene, &grads).unwrap();
        }
        assert_eq!(scene.group_values(ParamGroup::Feature), before.group_values(ParamGroup::Feature));
        assert_eq!(scene.group_values(ParamGroup::Rotation), before.group_values(ParamGroup::Rotation));
        assert_ne!(scene.group_values(ParamGroup::Mean), before.group_values(ParamGroup::Mean));

        let mut all = SceneOptimizer::new(&scene, &LearningRates::default(), &ParamGroup::ALL);
        let sum = scene.checksum();
        all.step(&mut scene, &grads).unwrap();
        assert_eq!(scene.checksum(), sum);
    }

    #[test]
    fn rotations_stay_unit_and_clip_applies() {
        let mut scene = tiny_scene();
        let mut grads = GaussianGrads::zeros(&scene);
        grads.group_mut(ParamGroup::Rotation).iter_mut().for_each(|v| *v = 1e3);
        let mut opt = SceneOptimizer::new(&scene, &LearningRates::default(), &[]);
        let info = opt.step(&mut scene, &grads).unwrap();
        assert!(info.clipped);
        assert!(scene.gaussians.iter().all(|g| (g.rotation.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn head_only_stage_freezes_everything() {
        let s = StageConfig::new(Stage::HeadOnly, 10);
        assert_eq!(s.frozen.len(), 6);
        assert!(s.validate().is_ok());
        let bad = StageConfig { frozen: vec![], ..s };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn extent_is_half_diagonal() {
        let mut scene = Scene::new(0);
        scene.gaussians.push(Gaussian::isotropic(Vector3::new(0.0, 0.0, 0.0), 1.0, 0.5, [0.5; 3], vec![]));
        scene.gaussians.push(Gaussian::isotropic(Vector3::new(2.0, 4.0, 4.0), 1.0, 0.5, [0.5; 3], vec![]));
        assert_close!(scene_extent(&scene), 3.0, 1e-15);
    }

    #[test]
    fn moving_average_window() {
        assert_eq!(moving_average(&[4.0, 2.0, 6.0, 0.0], 2), vec![4.0, 3.0, 4.0, 3.0]);
    }

    fn persp(w: usize, h: usize) -> Camera {
        Camera::perspective(20.0, 20.0, 0.5 * w as f64, 0.5 * h as f64, Pose::identity(), w, h, 0.1, 100.0).unwrap()
    }

    #[test]
    fn init_counts_and_principal_point() {
        let cam = persp(64, 64);
        let d = DepthMap::all_valid(Map::filled(64, 64, 1, 5.0));
        let opts = InitOptions {
            stride: 2,
            feature_dim: 3,
            ..Default::default()
        };
        let s = init_scene_from_depth(&[d], &[cam], None, None, &opts).unwrap();
        assert_eq!(s.len(), 1024);
        assert!(s.gaussians.iter().all(|g| g.opacity_logit == 0.0 && g.feature == vec![0.0; 3]));

        let one = Camera::perspective(10.0, 10.0, 0.5, 0.5, Pose::identity(), 1, 1, 0.1, 100.0).unwrap();
        let d = DepthMap::all_valid(Map::filled(1, 1, 1, 7.0));
        let s = init_scene_from_depth(&[d], &[one], None, None, &InitOptions::default()).unwrap();
        assert!((s.gaussians[0].mean - Vector3::new(0.0, 0.0, 7.0)).norm() < 1e-12);

        let mut empty = DepthMap::all_valid(Map::zeros(4, 4, 1));
        empty.valid = vec![false; 16];
        assert!(matches!(
            init_scene_from_depth(&[empty], &[persp(4, 4)], None, None, &InitOptions::default()),
            Err(Error::NoValidPixels)
        ));
    }

    #[test]
    fn fit_recovers_perturbed_colors() {
        let scene = tiny_scene();
        let pose = Pose::looking(Vector3::new(1.5, -1.5, 10.0), -Vector3::z(), Vector3::y());
        let cam = Camera::from_fov(0.9, pose, 32, 32, 0.1, 100.0).unwrap();
        let reference = render(&scene, &cam).unwrap();
        let views = vec![ViewTarget {
            color: reference.color.clone(),
            depth: None,
            feature: None,
        }];
        let mut init = scene.clone();
        for g in &mut init.gaussians {
            g.color_coeffs[0] = [0.0; 3];
        }
        let cfg = FitConfig {
            iterations: 150,
            lr: LearningRates {
                color: 0.05,
                ..Default::default()
            },
            ..Default::default()
        };
        let res = fit_scene(&views, &[cam], init, &cfg).unwrap();
        assert!(res.final_loss.render < 0.05 * res.curve[0].render, "{:?}", res.final_loss);
        // features had no supervision
        assert_eq!(res.scene.group_values(ParamGroup::Feature), scene.group_values(ParamGroup::Feature));
    }
}
