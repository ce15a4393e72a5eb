//! Reverse-mode gradients of the rasterizer and a finite-difference validator.
//!
//! The backward pass replays each pixel's front-to-back compositing, then
//! walks the contributions back to front carrying the suffix sum
//! `R = Σ_{j>i} Tⱼαⱼsⱼ / Tᵢ₊₁`, giving `∂L/∂αᵢ = Tᵢ(sᵢ − R)`. Per-splat 2D
//! gradients are accumulated per tile and reduced in tile order, so results
//! do not depend on the thread count.

use nalgebra::{Matrix2, Matrix3, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::buffer::{Map, RenderOutput};
use crate::camera::{Camera, ProjectionMode};
use crate::error::{Error, Result};
use crate::gaussian::{ParamGroup, Scene, SH_C0, SH_C1};
use crate::raster::{Frame, RenderConfig, Splat, TRANSMITTANCE_EPS};

/// Gradients of a scalar with respect to every raw parameter, one flat vector
/// per group laid out like [`Scene::group_values`].
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrads {
    pub groups: [Vec<f64>; 6],
    widths: [usize; 6],
}

impl GaussianGrads {
    pub fn zeros(scene: &Scene) -> Self {
        let widths = group_widths(scene);
        let n = scene.len();
        GaussianGrads {
            groups: std::array::from_fn(|g| vec![0.0; n * widths[g]]),
            widths,
        }
    }

    pub fn group(&self, g: ParamGroup) -> &[f64] {
        &self.groups[g.index()]
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut [f64] {
        &mut self.groups[g.index()]
    }

    /// Gradient slice of Gaussian `i` within group `g`.
    pub fn of(&self, i: usize, g: ParamGroup) -> &[f64] {
        let w = self.widths[g.index()];
        &self.groups[g.index()][i * w..(i + 1) * w]
    }

    fn of_mut(&mut self, i: usize, g: ParamGroup) -> &mut [f64] {
        let w = self.widths[g.index()];
        &mut self.groups[g.index()][i * w..(i + 1) * w]
    }

    pub fn add_assign(&mut self, other: &GaussianGrads) {
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            assert_eq!(a.len(), b.len(), "gradient shapes differ");
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.groups.iter_mut().flatten().for_each(|v| *v *= k);
    }

    pub fn is_finite(&self) -> bool {
        self.groups.iter().flatten().all(|v| v.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.groups.iter().flatten().map(|v| v * v).sum()
    }

    pub fn get(&self, i: usize, g: ParamGroup, k: usize) -> f64 {
        self.of(i, g)[k]
    }
}

fn group_widths(scene: &Scene) -> [usize; 6] {
    [3, 3, 4, 1, 3 * scene.sh_degree.coeff_count(), scene.feature_dim]
}

/// Per-pixel `∂L/∂(render buffer)`. Missing buffers contribute nothing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RenderUpstream {
    pub color: Option<Map>,
    pub feature: Option<Map>,
    pub depth: Option<Map>,
    pub alpha: Option<Map>,
}

impl RenderUpstream {
    pub fn zeros_like(out: &RenderOutput) -> Self {
        RenderUpstream {
            color: Some(Map::zeros(out.color.width, out.color.height, 3)),
            feature: Some(Map::zeros(out.feature.width, out.feature.height, out.feature.channels)),
            depth: Some(Map::zeros(out.depth.width, out.depth.height, 1)),
            alpha: Some(Map::zeros(out.alpha.width, out.alpha.height, 1)),
        }
    }

    /// Accumulates `other` into `self`, allocating buffers as needed.
    pub fn add(&mut self, other: &RenderUpstream) {
        fn merge(a: &mut Option<Map>, b: &Option<Map>) {
            match (a.as_mut(), b) {
                (_, None) => {}
                (None, Some(b)) => *a = Some(b.clone()),
                (Some(a), Some(b)) => a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y),
            }
        }
        merge(&mut self.color, &other.color);
        merge(&mut self.feature, &other.feature);
        merge(&mut self.depth, &other.depth);
        merge(&mut self.alpha, &other.alpha);
    }

    fn validate(&self, width: usize, height: usize, feature_dim: usize) -> Result<()> {
        let checks: [(&Option<Map>, usize, &'static str); 4] = [
            (&self.color, 3, "color"),
            (&self.feature, feature_dim, "feature"),
            (&self.depth, 1, "depth"),
            (&self.alpha, 1, "alpha"),
        ];
        for (map, ch, name) in checks {
            if let Some(m) = map {
                if m.width != width || m.height != height || m.channels != ch {
                    return Err(Error::ShapeMismatch(format!(
                        "upstream {name} is {}x{}x{}, expected {width}x{height}x{ch}",
                        m.width, m.height, m.channels
                    )));
                }
                if !m.is_finite() {
                    return Err(Error::NonFiniteGradient(name));
                }
            }
        }
        Ok(())
    }
}

// Layout of one splat's screen-space gradient record.
const G_MX: usize = 0;
const G_MY: usize = 1;
const G_CA: usize = 2;
const G_CB: usize = 3;
const G_CC: usize = 4;
const G_OP: usize = 5;
const G_RGB: usize = 6;
const G_Z: usize = 9;
const G_FEAT: usize = 10;

struct Contribution {
    local: usize,
    alpha: f64,
    clamped: bool,
    dx: f64,
    dy: f64,
    t: f64,
}

impl Frame<'_> {
    /// Vector-Jacobian product of the tiled forward render.
    pub fn backward(&self, upstream: &RenderUpstream) -> Result<GaussianGrads> {
        let (w, h) = (self.camera.width, self.camera.height);
        let c = self.scene.feature_dim;
        upstream.validate(w, h, c)?;
        let stride = G_FEAT + c;
        let early = self.config.early_termination;

        let tile_grads: Vec<Vec<f64>> = (0..self.tiles.lists.len())
            .into_par_iter()
            .map(|t| {
                let list = &self.tiles.lists[t];
                let mut acc = vec![0.0; list.len() * stride];
                if list.is_empty() {
                    return acc;
                }
                let (x0, x1, y0, y1) = self.tiles.tile_rect(t, w, h);
                let mut contribs = Vec::new();
                let mut g_feat = vec![0.0; c];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let p = y * w + x;
                        let g_col = upstream.color.as_ref().map_or([0.0; 3], |m| [m.data[3 * p], m.data[3 * p + 1], m.data[3 * p + 2]]);
                        match &upstream.feature {
                            Some(m) => g_feat.copy_from_slice(m.pixel(p)),
                            None => g_feat.iter_mut().for_each(|v| *v = 0.0),
                        }
                        let g_d = upstream.depth.as_ref().map_or(0.0, |m| m.data[p]);
                        let g_a = upstream.alpha.as_ref().map_or(0.0, |m| m.data[p]);
                        if g_col == [0.0; 3] && g_d == 0.0 && g_a == 0.0 && g_feat.iter().all(|v| *v == 0.0) {
                            continue;
                        }
                        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                        contribs.clear();
                        let mut tr = 1.0;
                        for (local, &pos) in list.iter().enumerate() {
                            let s = &self.splats[pos as usize];
                            let Some((alpha, clamped)) = s.alpha_at(px, py) else {
                                continue;
                            };
                            contribs.push(Contribution {
                                local,
                                alpha,
                                clamped,
                                dx: px - s.mean2d[0],
                                dy: py - s.mean2d[1],
                                t: tr,
                            });
                            tr *= 1.0 - alpha;
                            if early && tr < TRANSMITTANCE_EPS {
                                break;
                            }
                        }
                        let mut suffix = 0.0;
                        for k in contribs.iter().rev() {
                            let s = &self.splats[list[k.local] as usize];
                            let feat = &self.scene.gaussians[s.index].feature;
                            let mut sv = g_d * s.depth + g_a;
                            for ch in 0..3 {
                                sv += g_col[ch] * s.rgb[ch];
                            }
                            for (g, f) in g_feat.iter().zip(feat) {
                                sv += g * f;
                            }
                            let weight = k.t * k.alpha;
                            let d_alpha = k.t * (sv - suffix);
                            suffix = k.alpha * sv + (1.0 - k.alpha) * suffix;

                            let r = &mut acc[k.local * stride..(k.local + 1) * stride];
                            for ch in 0..3 {
                                r[G_RGB + ch] += weight * g_col[ch];
                            }
                            for (slot, g) in r[G_FEAT..].iter_mut().zip(&g_feat) {
                                *slot += weight * g;
                            }
                            r[G_Z] += weight * g_d;
                            if !k.clamped {
                                // α = σ·exp(−q/2)
                                r[G_OP] += d_alpha * k.alpha / s.opacity;
                                let d_q = -0.5 * d_alpha * k.alpha;
                                let [a, b, cc] = s.conic;
                                r[G_MX] -= d_q * 2.0 * (a * k.dx + b * k.dy);
                                r[G_MY] -= d_q * 2.0 * (b * k.dx + cc * k.dy);
                                r[G_CA] += d_q * k.dx * k.dx;
                                r[G_CB] += d_q * 2.0 * k.dx * k.dy;
                                r[G_CC] += d_q * k.dy * k.dy;
                            }
                        }
                    }
                }
                acc
            })
            .collect();

        let mut screen = vec![0.0; self.splats.len() * stride];
        for (t, acc) in tile_grads.iter().enumerate() {
            for (local, &pos) in self.tiles.lists[t].iter().enumerate() {
                let dst = &mut screen[pos as usize * stride..(pos as usize + 1) * stride];
                for (d, s) in dst.iter_mut().zip(&acc[local * stride..(local + 1) * stride]) {
                    *d += s;
                }
            }
        }

        let per_splat: Vec<SplatParamGrad> = self
            .splats
            .par_iter()
            .enumerate()
            .map(|(pos, s)| self.chain_to_params(s, &screen[pos * stride..(pos + 1) * stride]))
            .collect();
        let mut grads = GaussianGrads::zeros(self.scene);
        for (pos, (s, g)) in self.splats.iter().zip(per_splat).enumerate() {
            let i = s.index;
            grads.of_mut(i, ParamGroup::Mean).copy_from_slice(g.mean.as_slice());
            grads.of_mut(i, ParamGroup::ScaleLog).copy_from_slice(g.scale_log.as_slice());
            grads.of_mut(i, ParamGroup::Rotation).copy_from_slice(g.rotation.as_slice());
            grads.of_mut(i, ParamGroup::Opacity)[0] = g.opacity_logit;
            grads.of_mut(i, ParamGroup::Color).copy_from_slice(&g.color);
            grads
                .of_mut(i, ParamGroup::Feature)
                .copy_from_slice(&screen[pos * stride + G_FEAT..(pos + 1) * stride]);
        }
        if !grads.is_finite() {
            return Err(Error::NonFiniteGradient("render backward"));
        }
        Ok(grads)
    }

    fn chain_to_params(&self, s: &Splat, r: &[f64]) -> SplatParamGrad {
        let g = &self.scene.gaussians[s.index];
        let cam = self.camera;

        // conic → regularized 2D covariance: ∂L/∂Σ = −A·(∂L/∂A)·A
        let a = Matrix2::new(s.conic[0], s.conic[1], s.conic[1], s.conic[2]);
        let g_conic = Matrix2::new(r[G_CA], 0.5 * r[G_CB], 0.5 * r[G_CB], r[G_CC]);
        let g_cov2 = -(a * g_conic * a);

        // Σ₂ = J·Σc·Jᵀ + floor
        let j = &s.jacobian;
        let g_cov_cam: Matrix3<f64> = j.transpose() * g_cov2 * j;
        let g_j = 2.0 * g_cov2 * j * s.cov_cam;

        let mut g_mean_cam = crate::projection::mean_jacobian(&s.mean_cam, cam).transpose() * nalgebra::Vector2::new(r[G_MX], r[G_MY]);
        g_mean_cam.z += r[G_Z];
        if cam.mode == ProjectionMode::Perspective {
            let z = s.mean_cam.z;
            let iz2 = 1.0 / (z * z);
            let (_, clamped) = crate::projection::guarded_tangents(&s.mean_cam, cam);
            // J02 = −fx·tx/z with tx = x/z unless clamped to a constant
            let dz02 = if clamped[0] { -j[(0, 2)] / z } else { -2.0 * j[(0, 2)] / z };
            let dz12 = if clamped[1] { -j[(1, 2)] / z } else { -2.0 * j[(1, 2)] / z };
            if !clamped[0] {
                g_mean_cam.x += g_j[(0, 2)] * (-cam.fx * iz2);
            }
            if !clamped[1] {
                g_mean_cam.y += g_j[(1, 2)] * (-cam.fy * iz2);
            }
            g_mean_cam.z += g_j[(0, 0)] * (-cam.fx * iz2) + g_j[(0, 2)] * dz02 + g_j[(1, 1)] * (-cam.fy * iz2) + g_j[(1, 2)] * dz12;
        }
        let rw = &cam.pose.rotation;
        let mut g_mean = rw.transpose() * g_mean_cam;
        let g_cov: Matrix3<f64> = rw.transpose() * g_cov_cam * rw;

        // Σ = M·Mᵀ, M = R·diag(s)
        let m = s.rot * Matrix3::from_diagonal(&s.scale);
        let g_m = 2.0 * g_cov * m;
        let mut g_scale_log = Vector3::zeros();
        let mut g_rot = Matrix3::zeros();
        for k in 0..3 {
            let mut ds = 0.0;
            for i in 0..3 {
                ds += g_m[(i, k)] * s.rot[(i, k)];
                g_rot[(i, k)] = g_m[(i, k)] * s.scale[k];
            }
            g_scale_log[k] = ds * s.scale[k];
        }
        let g_rotation = quaternion_grad(&g.rotation, &g_rot);

        let sigma = s.opacity;
        let opacity_logit = r[G_OP] * sigma * (1.0 - sigma);

        let mut g_rgb = [0.0; 3];
        for ch in 0..3 {
            if s.rgb_raw[ch] >= 0.0 {
                g_rgb[ch] = r[G_RGB + ch];
            }
        }
        let mut color = vec![0.0; 3 * g.color_coeffs.len()];
        for ch in 0..3 {
            color[ch] = SH_C0 * g_rgb[ch];
        }
        if g.color_coeffs.len() >= 4 {
            let d = s.view_vec.normalize();
            let mut g_dir = Vector3::zeros();
            for ch in 0..3 {
                color[3 + ch] = -SH_C1 * d.y * g_rgb[ch];
                color[6 + ch] = SH_C1 * d.z * g_rgb[ch];
                color[9 + ch] = -SH_C1 * d.x * g_rgb[ch];
                g_dir.x -= SH_C1 * g.color_coeffs[3][ch] * g_rgb[ch];
                g_dir.y -= SH_C1 * g.color_coeffs[1][ch] * g_rgb[ch];
                g_dir.z += SH_C1 * g.color_coeffs[2][ch] * g_rgb[ch];
            }
            if cam.mode == ProjectionMode::Perspective {
                let n = s.view_vec.norm();
                g_mean += (g_dir - d * d.dot(&g_dir)) / n;
            }
        }

        SplatParamGrad {
            mean: g_mean,
            scale_log: g_scale_log,
            rotation: g_rotation,
            opacity_logit,
            color,
        }
    }
}

struct SplatParamGrad {
    mean: Vector3<f64>,
    scale_log: Vector3<f64>,
    rotation: Vector4<f64>,
    opacity_logit: f64,
    color: Vec<f64>,
}

/// Pulls `∂L/∂R` back to the raw (unnormalized) quaternion `(w, x, y, z)`.
fn quaternion_grad(q: &Vector4<f64>, g: &Matrix3<f64>) -> Vector4<f64> {
    let n = q.norm();
    let u = q / n;
    let (w, x, y, z) = (u[0], u[1], u[2], u[3]);
    let gw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)] + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)] - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let gu = Vector4::new(gw, gx, gy, gz);
    (gu - u * u.dot(&gu)) / n
}

/// Backward of [`crate::raster::render`] with the default configuration.
pub fn render_backward(scene: &Scene, camera: &Camera, upstream: &RenderUpstream) -> Result<GaussianGrads> {
    Frame::new(scene, camera, RenderConfig::default())?.backward(upstream)
}

/// A scalar function of a render together with its gradient.
pub trait RenderLoss {
    fn value_and_grad(&self, out: &RenderOutput) -> (f64, RenderUpstream);
}

impl<F: Fn(&RenderOutput) -> (f64, RenderUpstream)> RenderLoss for F {
    fn value_and_grad(&self, out: &RenderOutput) -> (f64, RenderUpstream) {
        self(out)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FdConfig {
    pub eps: f64,
    pub samples: usize,
    pub seed: u64,
    /// Absolute floor on the relative-error denominator.
    pub floor: f64,
    pub render: RenderConfig,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            eps: 1e-5,
            samples: 24,
            seed: 0,
            floor: 1e-8,
            render: RenderConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdSample {
    pub gaussian: usize,
    pub group: ParamGroup,
    pub component: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// The ±eps renders cover different pixel sets, so the loss is not
    /// differentiable across this step.
    pub crosses_cutoff: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub samples: Vec<FdSample>,
    /// Worst error over samples that stay on one side of every cutoff.
    pub max_rel_error: f64,
    /// Worst error over samples that cross a cutoff, if any did.
    pub cutoff_max_rel_error: Option<f64>,
}

impl FdReport {
    pub fn groups_covered(&self) -> Vec<ParamGroup> {
        ParamGroup::ALL
            .into_iter()
            .filter(|g| self.samples.iter().any(|s| s.group == *g && !s.crosses_cutoff))
            .collect()
    }
}

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Central differences on a random subset of parameters of visible Gaussians,
/// cycling through every parameter group.
pub fn finite_diff_check(scene: &Scene, camera: &Camera, loss: &dyn RenderLoss, cfg: &FdConfig) -> Result<FdReport> {
    let frame = Frame::new(scene, camera, cfg.render)?;
    let (_, upstream) = loss.value_and_grad(&frame.render());
    let grads = frame.backward(&upstream)?;
    let visible = frame.visible_indices();
    let mut picks = Vec::new();
    if !visible.is_empty() {
        let groups: Vec<ParamGroup> = ParamGroup::ALL
            .into_iter()
            .filter(|g| scene.gaussians[0].group_len(*g) > 0)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for k in 0..cfg.samples.max(groups.len()) {
            let group = groups[k % groups.len()];
            let i = visible[rng.gen_range(0..visible.len())];
            let comp = rng.gen_range(0..scene.gaussians[i].group_len(group));
            picks.push((i, group, comp));
        }
    }
    let samples = picks
        .into_iter()
        .map(|(i, group, comp)| {
            let probe = |delta: f64| -> Result<(f64, u64)> {
                let mut s = scene.clone();
                *s.gaussians[i].param_mut(group, comp) += delta;
                let f = Frame::new(&s, camera, cfg.render)?;
                Ok((loss.value_and_grad(&f.render()).0, f.coverage_signature()))
            };
            let (lp, sp) = probe(cfg.eps)?;
            let (lm, sm) = probe(-cfg.eps)?;
            let numeric = (lp - lm) / (2.0 * cfg.eps);
            let analytic = grads.get(i, group, comp);
            Ok(FdSample {
                gaussian: i,
                group,
                component: comp,
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric, cfg.floor),
                crosses_cutoff: sp != sm,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let worst = |cut: bool| {
        samples
            .iter()
            .filter(|s| s.crosses_cutoff == cut)
            .map(|s| s.rel_error)
            .fold(None, |m: Option<f64>, e| Some(m.map_or(e, |m| m.max(e))))
    };
    Ok(FdReport {
        max_rel_error: worst(false).unwrap_or(0.0),
        cutoff_max_rel_error: worst(true),
        samples,
    })
}
