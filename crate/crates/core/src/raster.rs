//! Depth-sorted alpha compositing of projected Gaussians.
//!
//! Every pixel evaluates `C = Σ Tᵢ·αᵢ·cᵢ` with `T₁ = 1` and
//! `Tᵢ₊₁ = Tᵢ·(1 − αᵢ)`, compositing colors, features and depths with the
//! same weights. Gaussians are sorted once per image by `(depth, index)`, so
//! the order is canonical and independent of the scene's list order.
//!
//! [`Frame`] holds the projected and sorted splats for one (scene, camera)
//! pair. Its tiled renderer and the per-pixel [`render_naive_oracle`] share
//! the alpha evaluation and compositing step, so with early termination
//! disabled they agree to the last bit.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;

use crate::buffer::RenderOutput;
use crate::camera::{Camera, ProjectionMode};
use crate::error::{Error, Result};
use crate::gaussian::{covariance, eval_color_raw, logistic, rotation_matrix, Scene};
use crate::projection::{self, regularize_cov2d, Gaussian2D, CUTOFF_MAHALANOBIS_SQ};

pub const ALPHA_MAX: f64 = 0.999;
/// Compositing stops once transmittance falls below this (when enabled).
pub const TRANSMITTANCE_EPS: f64 = 1e-4;
pub const DEFAULT_TILE_SIZE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderConfig {
    pub tile_size: usize,
    pub early_termination: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            tile_size: DEFAULT_TILE_SIZE,
            early_termination: true,
        }
    }
}

impl RenderConfig {
    pub fn exact() -> Self {
        RenderConfig {
            early_termination: false,
            ..Default::default()
        }
    }
}

/// A projected Gaussian with everything the per-pixel loops and the backward
/// pass need.
#[derive(Clone, Debug)]
pub(crate) struct Splat {
    pub index: usize,
    pub mean2d: [f64; 2],
    /// Inverse of the regularized 2D covariance, `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub rgb: [f64; 3],
    pub rgb_raw: [f64; 3],
    /// Inclusive pixel bounds `[x0, x1, y0, y1]` of the 3σ footprint.
    pub bbox: [usize; 4],
    pub mean_cam: Vector3<f64>,
    pub cov_cam: Matrix3<f64>,
    pub jacobian: Matrix2x3<f64>,
    pub rot: Matrix3<f64>,
    pub scale: Vector3<f64>,
    /// Unnormalized camera→Gaussian vector (perspective) used by degree-1 color.
    pub view_vec: Vector3<f64>,
}

impl Splat {
    /// `(α, clamped)` at pixel-space point `(px, py)`, or `None` outside the 3σ cutoff.
    #[inline(always)]
    pub fn alpha_at(&self, px: f64, py: f64) -> Option<(f64, bool)> {
        let dx = px - self.mean2d[0];
        let dy = py - self.mean2d[1];
        let q = self.conic[0] * dx * dx + 2.0 * self.conic[1] * dx * dy + self.conic[2] * dy * dy;
        if q > CUTOFF_MAHALANOBIS_SQ {
            return None;
        }
        let raw = self.opacity * (-0.5 * q).exp();
        if raw > ALPHA_MAX {
            Some((ALPHA_MAX, true))
        } else {
            Some((raw, false))
        }
    }
}

/// Per-tile lists of splat positions (in depth order) whose 3σ bounds touch the tile.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileGrid {
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub lists: Vec<Vec<u32>>,
}

impl TileGrid {
    fn build(splats: &[Splat], width: usize, height: usize, tile_size: usize) -> Self {
        let tiles_x = width.div_ceil(tile_size);
        let tiles_y = height.div_ceil(tile_size);
        let mut lists = vec![Vec::new(); tiles_x * tiles_y];
        for (pos, s) in splats.iter().enumerate() {
            let [x0, x1, y0, y1] = s.bbox;
            for ty in y0 / tile_size..=y1 / tile_size {
                for tx in x0 / tile_size..=x1 / tile_size {
                    lists[ty * tiles_x + tx].push(pos as u32);
                }
            }
        }
        TileGrid {
            tile_size,
            tiles_x,
            tiles_y,
            lists,
        }
    }

    /// Pixel rectangle `[x0, x1) × [y0, y1)` of tile `t`.
    pub fn tile_rect(&self, t: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let tx = t % self.tiles_x;
        let ty = t / self.tiles_x;
        let x0 = tx * self.tile_size;
        let y0 = ty * self.tile_size;
        (x0, (x0 + self.tile_size).min(width), y0, (y0 + self.tile_size).min(height))
    }
}

/// Projected, depth-sorted splats of one scene under one camera.
pub struct Frame<'a> {
    pub(crate) scene: &'a Scene,
    pub(crate) camera: &'a Camera,
    pub(crate) config: RenderConfig,
    pub(crate) splats: Vec<Splat>,
    pub(crate) tiles: TileGrid,
}

impl<'a> Frame<'a> {
    pub fn new(scene: &'a Scene, camera: &'a Camera, config: RenderConfig) -> Result<Self> {
        scene.validate()?;
        camera.validate()?;
        if config.tile_size == 0 {
            return Err(Error::InvalidConfig("tile_size must be positive".into()));
        }
        let projected: Vec<Option<Splat>> = scene
            .gaussians
            .par_iter()
            .enumerate()
            .map(|(i, g)| {
                let rot = rotation_matrix(&g.rotation).ok_or(Error::DegenerateRotation { index: i })?;
                let cov = covariance(&rot, &g.scale_log);
                let (mean_cam, cov_cam) = projection::world_to_camera(&g.mean, &cov, &camera.pose);
                let Some(g2) = projection::project(&mean_cam, &cov_cam, camera).visible() else {
                    return Ok(None);
                };
                let view_vec = match camera.mode {
                    ProjectionMode::Perspective => g.mean - camera.center(),
                    ProjectionMode::Orthogonal => camera.forward(),
                };
                let dir = view_vec.normalize();
                let rgb_raw = eval_color_raw(&g.color_coeffs, Some(&dir));
                Ok(build_splat(i, &g2, camera).map(|(mean2d, conic, bbox)| Splat {
                    index: i,
                    mean2d,
                    conic,
                    depth: g2.depth,
                    opacity: logistic(g.opacity_logit),
                    rgb: rgb_raw.map(|c| c.max(0.0)),
                    rgb_raw,
                    bbox,
                    mean_cam,
                    cov_cam,
                    jacobian: projection::projection_jacobian(&mean_cam, camera),
                    rot,
                    scale: g.scale_log.map(f64::exp),
                    view_vec,
                }))
            })
            .collect::<Result<_>>()?;
        let mut splats: Vec<Splat> = projected.into_iter().flatten().collect();
        splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
        let tiles = TileGrid::build(&splats, camera.width, camera.height, config.tile_size);
        Ok(Frame {
            scene,
            camera,
            config,
            splats,
            tiles,
        })
    }

    pub fn tiles(&self) -> &TileGrid {
        &self.tiles
    }

    /// Number of Gaussians that survived culling and touch the image.
    pub fn visible_count(&self) -> usize {
        self.splats.len()
    }

    /// Original scene indices of visible Gaussians, front to back.
    pub fn visible_indices(&self) -> Vec<usize> {
        self.splats.iter().map(|s| s.index).collect()
    }

    /// Tiled forward render.
    pub fn render(&self) -> RenderOutput {
        let (w, h) = (self.camera.width, self.camera.height);
        let c = self.scene.feature_dim;
        let tiles: Vec<PixelBlock> = (0..self.tiles.lists.len())
            .into_par_iter()
            .map(|t| {
                let (x0, x1, y0, y1) = self.tiles.tile_rect(t, w, h);
                let list = &self.tiles.lists[t];
                let mut block = PixelBlock::new((x1 - x0) * (y1 - y0), c);
                let mut k = 0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let entries = list.iter().map(|&p| &self.splats[p as usize]);
                        self.shade(entries, x, y, self.config.early_termination, &mut block, k);
                        k += 1;
                    }
                }
                block
            })
            .collect();
        let mut out = RenderOutput::zeros(w, h, c);
        for (t, block) in tiles.iter().enumerate() {
            let (x0, x1, y0, y1) = self.tiles.tile_rect(t, w, h);
            let mut k = 0;
            for y in y0..y1 {
                for x in x0..x1 {
                    block.write(k, y * w + x, &mut out);
                    k += 1;
                }
            }
        }
        out
    }

    /// Composites `entries` (front to back) at pixel `(x, y)` into slot `k` of `block`.
    #[inline]
    fn shade<'s>(
        &self,
        entries: impl Iterator<Item = &'s Splat>,
        x: usize,
        y: usize,
        early: bool,
        block: &mut PixelBlock,
        k: usize,
    ) {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let c = block.feature_dim;
        let mut t = 1.0;
        let mut color = [0.0; 3];
        let mut depth = 0.0;
        let feat = &mut block.feature[k * c..(k + 1) * c];
        for s in entries {
            let Some((alpha, _)) = s.alpha_at(px, py) else {
                continue;
            };
            let w = t * alpha;
            for ch in 0..3 {
                color[ch] += w * s.rgb[ch];
            }
            for (acc, f) in feat.iter_mut().zip(&self.scene.gaussians[s.index].feature) {
                *acc += w * f;
            }
            depth += w * s.depth;
            t *= 1.0 - alpha;
            if early && t < TRANSMITTANCE_EPS {
                break;
            }
        }
        block.color[k] = color;
        block.depth[k] = depth;
        block.transmittance[k] = t;
    }

    /// Per-pixel loop over every visible splat: no tiles, no early termination.
    pub fn render_naive(&self) -> RenderOutput {
        let (w, h) = (self.camera.width, self.camera.height);
        let c = self.scene.feature_dim;
        let rows: Vec<PixelBlock> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut block = PixelBlock::new(w, c);
                for x in 0..w {
                    self.shade(self.splats.iter(), x, y, false, &mut block, x);
                }
                block
            })
            .collect();
        let mut out = RenderOutput::zeros(w, h, c);
        for (y, block) in rows.iter().enumerate() {
            for x in 0..w {
                block.write(x, y * w + x, &mut out);
            }
        }
        out
    }

    /// Hash of every pixel's contributing splat sequence. Changes exactly when a
    /// perturbation moves some pixel across the 3σ cutoff or the early-termination point.
    pub fn coverage_signature(&self) -> u64 {
        let (w, h) = (self.camera.width, self.camera.height);
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: u64| {
            hash ^= v;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for t in 0..self.tiles.lists.len() {
            let (x0, x1, y0, y1) = self.tiles.tile_rect(t, w, h);
            for y in y0..y1 {
                for x in x0..x1 {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut tr = 1.0;
                    for &p in &self.tiles.lists[t] {
                        let s = &self.splats[p as usize];
                        if let Some((alpha, clamped)) = s.alpha_at(px, py) {
                            eat((s.index as u64) << 1 | u64::from(clamped));
                            tr *= 1.0 - alpha;
                            if self.config.early_termination && tr < TRANSMITTANCE_EPS {
                                break;
                            }
                        }
                    }
                    eat(u64::MAX);
                }
            }
        }
        hash
    }
}

/// Returns `(mean2d, conic, bbox)` for a visible footprint, or `None` when it
/// misses the image entirely.
fn build_splat(index: usize, g2: &Gaussian2D, camera: &Camera) -> Option<([f64; 2], [f64; 3], [usize; 4])> {
    let cov = regularize_cov2d(&g2.cov2d);
    let det = cov.determinant();
    debug_assert!(det > 0.0, "regularized covariance of gaussian {index} is singular");
    let conic = [cov[(1, 1)] / det, -cov[(0, 1)] / det, cov[(0, 0)] / det];
    let (mx, my) = (g2.mean2d.x, g2.mean2d.y);
    if !(mx.is_finite() && my.is_finite() && det.is_finite()) {
        return None;
    }
    // Exact half-extents of the q ≤ 9 ellipse, padded against rounding.
    let rx = 3.0 * cov[(0, 0)].sqrt() * (1.0 + 1e-9) + 1e-9;
    let ry = 3.0 * cov[(1, 1)].sqrt() * (1.0 + 1e-9) + 1e-9;
    let x0 = (mx - rx - 0.5).ceil().max(0.0);
    let x1 = (mx + rx - 0.5).floor().min(camera.width as f64 - 1.0);
    let y0 = (my - ry - 0.5).ceil().max(0.0);
    let y1 = (my + ry - 0.5).floor().min(camera.height as f64 - 1.0);
    if x0 > x1 || y0 > y1 {
        return None;
    }
    Some(([mx, my], conic, [x0 as usize, x1 as usize, y0 as usize, y1 as usize]))
}

struct PixelBlock {
    feature_dim: usize,
    color: Vec<[f64; 3]>,
    feature: Vec<f64>,
    depth: Vec<f64>,
    transmittance: Vec<f64>,
}

impl PixelBlock {
    fn new(n: usize, feature_dim: usize) -> Self {
        PixelBlock {
            feature_dim,
            color: vec![[0.0; 3]; n],
            feature: vec![0.0; n * feature_dim],
            depth: vec![0.0; n],
            transmittance: vec![1.0; n],
        }
    }

    fn write(&self, k: usize, p: usize, out: &mut RenderOutput) {
        out.color.pixel_mut(p).copy_from_slice(&self.color[k]);
        let c = self.feature_dim;
        out.feature.pixel_mut(p).copy_from_slice(&self.feature[k * c..(k + 1) * c]);
        out.depth.data[p] = self.depth[k];
        out.alpha.data[p] = 1.0 - self.transmittance[k];
    }
}

pub fn render(scene: &Scene, camera: &Camera) -> Result<RenderOutput> {
    render_with(scene, camera, &RenderConfig::default())
}

pub fn render_with(scene: &Scene, camera: &Camera, config: &RenderConfig) -> Result<RenderOutput> {
    Ok(Frame::new(scene, camera, *config)?.render())
}

/// Reference renderer: every pixel loops over every visible Gaussian.
pub fn render_naive_oracle(scene: &Scene, camera: &Camera) -> Result<RenderOutput> {
    Ok(Frame::new(scene, camera, RenderConfig::exact())?.render_naive())
}

/// Opacity-weighted Gaussian falloff at `pixel`, clamped to [`ALPHA_MAX`].
/// Returns 0 beyond the 3σ cutoff. `g2d.cov2d` must already be regularized.
pub fn evaluate_alpha(g2d: &Gaussian2D, opacity: f64, pixel: (f64, f64)) -> Result<f64> {
    let det = g2d.cov2d.determinant();
    if !(det > 0.0) {
        return Err(Error::SingularCovariance { det });
    }
    let inv: Matrix2<f64> = g2d.cov2d.try_inverse().ok_or(Error::SingularCovariance { det })?;
    let d = nalgebra::Vector2::new(pixel.0, pixel.1) - g2d.mean2d;
    let q = (d.transpose() * inv * d)[(0, 0)];
    if q > CUTOFF_MAHALANOBIS_SQ {
        return Ok(0.0);
    }
    Ok((opacity * (-0.5 * q).exp()).min(ALPHA_MAX))
}

/// One depth-sorted contribution to a pixel.
#[derive(Clone, Copy, Debug)]
pub struct CompositeEntry<'a> {
    pub alpha: f64,
    pub color: [f64; 3],
    pub feature: &'a [f64],
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub color: [f64; 3],
    pub feature: Vec<f64>,
    pub depth: f64,
    pub transmittance: f64,
}

/// Front-to-back compositing of entries already sorted by depth. Alphas are
/// clamped to [`ALPHA_MAX`]; an empty list yields zeros and `T = 1`.
pub fn alpha_composite(entries: &[CompositeEntry<'_>], feature_dim: usize) -> Composite {
    let mut out = Composite {
        color: [0.0; 3],
        feature: vec![0.0; feature_dim],
        depth: 0.0,
        transmittance: 1.0,
    };
    for e in entries {
        let alpha = e.alpha.clamp(0.0, ALPHA_MAX);
        let w = out.transmittance * alpha;
        for ch in 0..3 {
            out.color[ch] += w * e.color[ch];
        }
        for (acc, f) in out.feature.iter_mut().zip(e.feature) {
            *acc += w * f;
        }
        out.depth += w * e.depth;
        out.transmittance *= 1.0 - alpha;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Pose;
    use crate::gaussian::Gaussian;
    use nalgebra::{Vector2, Vector4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ortho(w: usize, h: usize) -> Camera {
        let pose = Pose {
            rotation: Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)),
            translation: Vector3::new(0.0, 0.0, 3.0),
        };
        Camera::orthogonal(2.0, 2.0, w as f64 / 2.0, h as f64 / 2.0, pose, w, h).unwrap()
    }

    fn random_scene(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Scene {
        let mut scene = Scene::new(c);
        for _ in 0..n {
            scene.gaussians.push(Gaussian {
                mean: Vector3::new(rng.gen_range(-15.0..15.0), rng.gen_range(-15.0..15.0), rng.gen_range(-1.0..2.0)),
                scale_log: Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                rotation: Vector4::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 1.0),
                opacity_logit: rng.gen_range(-2.0..4.0),
                color_coeffs: vec![[rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)]],
                feature: (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            });
        }
        scene
    }

    #[test]
    fn alpha_at_center_is_opacity() {
        let g = Gaussian2D {
            mean2d: Vector2::new(5.0, 5.0),
            cov2d: Matrix2::identity(),
            depth: 1.0,
        };
        assert_eq!(evaluate_alpha(&g, 0.7, (5.0, 5.0)).unwrap(), 0.7);
    }

    #[test]
    fn alpha_two_sigma_off_axis() {
        let g = Gaussian2D {
            mean2d: Vector2::new(0.0, 0.0),
            cov2d: Matrix2::identity(),
            depth: 1.0,
        };
        let a = evaluate_alpha(&g, 1.0, (2.0, 0.0)).unwrap();
        assert_close!(a, (-2.0f64).exp(), 1e-15);
        assert_close!(a, 0.1353, 1e-4);
    }

    #[test]
    fn alpha_beyond_cutoff_is_zero_and_singular_rejected() {
        let g = Gaussian2D {
            mean2d: Vector2::new(0.0, 0.0),
            cov2d: Matrix2::identity(),
            depth: 1.0,
        };
        assert_eq!(evaluate_alpha(&g, 1.0, (3.01, 0.0)).unwrap(), 0.0);
        let s = Gaussian2D {
            cov2d: Matrix2::new(1.0, 1.0, 1.0, 1.0),
            ..g
        };
        assert!(evaluate_alpha(&s, 1.0, (0.0, 0.0)).is_err());
    }

    #[test]
    fn composite_single_opaque_entry_is_clamped() {
        let c = alpha_composite(
            &[CompositeEntry {
                alpha: 1.0,
                color: [1.0, 0.0, 0.0],
                feature: &[],
                depth: 2.0,
            }],
            0,
        );
        assert_eq!(c.color, [0.999, 0.0, 0.0]);
        assert_close!(c.transmittance, 0.001, 1e-15);
    }

    #[test]
    fn composite_two_halves() {
        let e = CompositeEntry {
            alpha: 0.5,
            color: [1.0, 1.0, 1.0],
            feature: &[1.0],
            depth: 1.0,
        };
        let c = alpha_composite(&[e, CompositeEntry { color: [0.0; 3], feature: &[0.0], depth: 0.0, ..e }], 1);
        // weights 0.5 and 0.25
        assert_eq!(c.color, [0.5; 3]);
        assert_eq!(c.transmittance, 0.25);
        let c = alpha_composite(&[CompositeEntry { color: [0.0; 3], feature: &[0.0], depth: 0.0, ..e }, e], 1);
        assert_eq!(c.color, [0.25; 3]);
    }

    #[test]
    fn composite_empty_is_background() {
        let c = alpha_composite(&[], 2);
        assert_eq!(c.color, [0.0; 3]);
        assert_eq!(c.feature, vec![0.0; 2]);
        assert_eq!(c.depth, 0.0);
        assert_eq!(c.transmittance, 1.0);
    }

    #[test]
    fn empty_scene_renders_zeros() {
        let scene = Scene::new(3);
        let cam = ortho(20, 12);
        for out in [render(&scene, &cam).unwrap(), render_naive_oracle(&scene, &cam).unwrap()] {
            assert!(out.color.data.iter().chain(&out.feature.data).chain(&out.depth.data).chain(&out.alpha.data).all(|v| *v == 0.0));
        }
    }

    #[test]
    fn single_gaussian_matches_oracle() {
        let mut scene = Scene::new(2);
        scene.gaussians.push(Gaussian::isotropic(Vector3::zeros(), 2.0, 0.99, [0.2, 0.4, 0.9], vec![1.0, -1.0]));
        let cam = ortho(32, 32);
        let a = render(&scene, &cam).unwrap();
        let b = render_naive_oracle(&scene, &cam).unwrap();
        assert!(a.color.max_abs_diff(&b.color) <= 1e-6);
        assert!(a.feature.max_abs_diff(&b.feature) <= 1e-6);
        assert!(a.alpha.data[16 * 32 + 16] > 0.9);
    }

    #[test]
    fn exact_tiled_path_is_bit_identical_to_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scene = random_scene(&mut rng, 60, 3);
        let cam = ortho(40, 24);
        let a = render_with(&scene, &cam, &RenderConfig { tile_size: 7, early_termination: false }).unwrap();
        let b = render_naive_oracle(&scene, &cam).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn permutation_and_tile_size_do_not_change_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scene = random_scene(&mut rng, 80, 2);
        let cam = ortho(48, 40);
        let base = render(&scene, &cam).unwrap();
        let mut shuffled = scene.clone();
        shuffled.gaussians.reverse();
        shuffled.gaussians.swap(3, 17);
        assert_eq!(render(&shuffled, &cam).unwrap(), base);
        let other = render_with(&scene, &cam, &RenderConfig { tile_size: 5, early_termination: true }).unwrap();
        assert_eq!(other, base);
    }

    #[test]
    fn ties_in_depth_break_by_index() {
        let mut scene = Scene::new(0);
        let red = Gaussian::isotropic(Vector3::zeros(), 1.0, 0.6, [1.0, 0.0, 0.0], vec![]);
        let blue = Gaussian::isotropic(Vector3::zeros(), 1.0, 0.6, [0.0, 0.0, 1.0], vec![]);
        scene.gaussians = vec![red, blue];
        let out = render(&scene, &ortho(8, 8)).unwrap();
        let p = out.color.pixel(4 * 8 + 4);
        assert!(p[0] > p[2], "first index composites in front");
    }

    #[test]
    fn weights_and_colors_stay_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut scene = random_scene(&mut rng, 120, 1);
        for g in &mut scene.gaussians {
            g.color_coeffs[0] = crate::gaussian::rgb_to_dc([rng.gen(), rng.gen(), rng.gen()]);
        }
        let out = render(&scene, &ortho(40, 40)).unwrap();
        assert!(out.color.data.iter().all(|c| (0.0..=1.0).contains(c)));
        assert!(out.alpha.data.iter().all(|a| (0.0..=1.0).contains(a)));
    }
}
