//! Procedural driving scenes: a ground disc of ring-shaped splats, lane
//! strips, box vehicles, cylinder pedestrians and optional overhead canopies.
//!
//! Every scene comes with analytic supervision that never touches the
//! rasterizer: closed-form ray casts give depth and feature teachers, and BEV
//! masks are scan-converted from footprint polygons. Only the reference color
//! images are splat renders (from the naive oracle).
//!
//! Object splats are laid out so that, seen from the BEV camera, the point
//! where the object outweighs the ground beneath it lies on the footprint
//! edge. Insets and lateral scales are solved by bisection per object.

use std::f64::consts::{PI, TAU};

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bev::{make_bev_camera, BevClass, BevConfig, NUM_CLASSES};
use crate::buffer::{DepthMap, Map, MaskSet};
use crate::camera::{Camera, Pose};
use crate::error::{Error, Result};
use crate::gaussian::{activate, axis_angle_quat, rgb_to_dc, Gaussian, Scene, ShDegree};
use crate::projection::{project, regularize_cov2d, world_to_camera};
use crate::raster::{evaluate_alpha, render_naive_oracle};
use crate::seed::rng_for;

/// Height of lane splat centers above the ground plane.
pub const LANE_HEIGHT: f64 = 0.05;

/// Surface kinds carrying a distinct feature embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Surface {
    Ground,
    Vehicle,
    Pedestrian,
    Lane,
    Vegetation,
}

impl Surface {
    pub const ALL: [Surface; 5] = [Surface::Ground, Surface::Vehicle, Surface::Pedestrian, Surface::Lane, Surface::Vegetation];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn bev_class(self) -> Option<BevClass> {
        match self {
            Surface::Vehicle => Some(BevClass::Vehicle),
            Surface::Pedestrian => Some(BevClass::Pedestrian),
            Surface::Lane => Some(BevClass::Lane),
            Surface::Ground | Surface::Vegetation => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigSpec {
    pub cameras: usize,
    /// Mount height above the ground, meters.
    pub mount_height: f64,
    /// Horizontal distance of each camera from the ego origin.
    pub mount_radius: f64,
    pub hfov_deg: f64,
    pub pitch_deg: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Default for RigSpec {
    fn default() -> Self {
        RigSpec {
            cameras: 6,
            mount_height: 1.6,
            mount_radius: 0.3,
            hfov_deg: 70.0,
            pitch_deg: 25.0,
            width: 224,
            height: 128,
            near: 1.0,
            far: 200.0,
        }
    }
}

impl RigSpec {
    /// Cameras evenly spaced in yaw, all pitched down by `pitch_deg`.
    pub fn cameras(&self) -> Result<Vec<Camera>> {
        (0..self.cameras)
            .map(|k| {
                let yaw = TAU * k as f64 / self.cameras as f64;
                let (s, c) = yaw.sin_cos();
                let pitch = self.pitch_deg.to_radians();
                let center = Vector3::new(self.mount_radius * c, self.mount_radius * s, self.mount_height);
                let forward = Vector3::new(c * pitch.cos(), s * pitch.cos(), -pitch.sin());
                let pose = Pose::looking(center, forward, -Vector3::z());
                Camera::from_fov(self.hfov_deg.to_radians(), pose, self.width, self.height, self.near, self.far)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    /// Seeds the class embedding table, which is shared by every scene that
    /// uses the same value.
    pub embedding_seed: u64,
    pub vehicles: usize,
    pub pedestrians: usize,
    pub lanes: usize,
    /// Side of the square ground area, meters; matches the BEV range.
    pub extent: f64,
    pub feature_dim: usize,
    pub rig: RigSpec,
    pub clutter: bool,
    pub clutter_count: usize,
    pub clutter_band: [f64; 2],
    pub ground_ring_ratio: f64,
    pub pedestrian_radius: f64,
    pub lane_width: f64,
    /// Keep-out radius around the ego origin for vehicles and pedestrians.
    pub ego_clearance: f64,
    /// Minimum gap between object footprints.
    pub gap: f64,
    pub max_attempts: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 7,
            embedding_seed: 0,
            vehicles: 12,
            pedestrians: 16,
            lanes: 4,
            extent: 100.0,
            feature_dim: crate::gaussian::DEFAULT_FEATURE_DIM,
            rig: RigSpec::default(),
            clutter: true,
            clutter_count: 50,
            clutter_band: [4.0, 6.0],
            ground_ring_ratio: 1.12,
            pedestrian_radius: 0.6,
            lane_width: 3.0,
            ego_clearance: 4.0,
            gap: 0.6,
            max_attempts: 500,
        }
    }
}

impl SceneSpec {
    pub fn with_seed(seed: u64) -> Self {
        SceneSpec { seed, ..Default::default() }
    }

    pub fn validate(&self, bev: &BevConfig) -> Result<()> {
        if (self.extent - bev.range).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("scene extent {} differs from BEV range {}", self.extent, bev.range)));
        }
        if self.feature_dim < Surface::ALL.len() {
            return Err(Error::InvalidConfig(format!(
                "feature_dim {} cannot hold {} orthogonal embeddings",
                self.feature_dim,
                Surface::ALL.len()
            )));
        }
        if !(self.ground_ring_ratio > 1.0) || !(self.pedestrian_radius > 0.0) || !(self.lane_width > 0.0) {
            return Err(Error::InvalidConfig("ring ratio must exceed 1 and sizes must be positive".into()));
        }
        if self.clutter_band[0] > self.clutter_band[1] {
            return Err(Error::InvalidConfig("clutter band is inverted".into()));
        }
        Ok(())
    }
}

/// A BEV-labelled object with its footprint polygon (world meters, counter-clockwise).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Instance {
    pub class: BevClass,
    pub footprint: Vec<[f64; 2]>,
    pub center: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
enum Solid {
    Box { center: [f64; 2], half: [f64; 2], height: f64, yaw: f64 },
    Cylinder { center: [f64; 2], radius: f64, height: f64 },
    Ellipsoid { center: Vector3<f64>, radii: Vector3<f64> },
}

/// Analytic description of a generated scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneLayout {
    pub spec: SceneSpec,
    pub embeddings: Vec<Vec<f64>>,
    pub instances: Vec<Instance>,
    /// `(y_center, half_width)` of lane strips running along x.
    lanes: Vec<(f64, f64)>,
    solids: Vec<(Solid, Surface)>,
    colors: Vec<[f64; 3]>,
}

/// Per-camera supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewData {
    pub camera: Camera,
    pub image: Map,
    pub depth: DepthMap,
    pub feature: Map,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthBundle {
    pub views: Vec<ViewData>,
    pub bev: MaskSet,
    pub instances: Vec<Instance>,
    pub embeddings: Vec<Vec<f64>>,
    /// Instances skipped by the BEV rasterizer (degenerate footprints).
    pub skipped_instances: usize,
}

/// `count` orthonormal random vectors in `dim` dimensions.
pub fn class_embeddings(dim: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out: Vec<Vec<f64>> = Vec::new();
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        for u in &out {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            out.push(v.iter().map(|a| a / n).collect());
        }
    }
    out
}

fn quantize(x: f64) -> f64 {
    x as f32 as f64
}

/// Rounds every parameter to the nearest `f32` so scene files round-trip exactly.
pub fn quantize_scene(scene: &mut Scene) {
    for g in &mut scene.gaussians {
        g.mean = g.mean.map(quantize);
        g.scale_log = g.scale_log.map(quantize);
        g.rotation = g.rotation.map(quantize);
        g.opacity_logit = quantize(g.opacity_logit);
        for c in &mut g.color_coeffs {
            *c = c.map(quantize);
        }
        g.feature.iter_mut().for_each(|f| *f = quantize(*f));
    }
}

fn rect_polygon(center: [f64; 2], half: [f64; 2], yaw: f64) -> Vec<[f64; 2]> {
    let (s, c) = yaw.sin_cos();
    [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]]
        .iter()
        .map(|[a, b]| {
            let (lx, ly) = (a * half[0], b * half[1]);
            [center[0] + c * lx - s * ly, center[1] + s * lx + c * ly]
        })
        .collect()
}

fn disc_polygon(center: [f64; 2], r: f64, n: usize) -> Vec<[f64; 2]> {
    (0..n)
        .map(|k| {
            let a = TAU * k as f64 / n as f64;
            [center[0] + r * a.cos(), center[1] + r * a.sin()]
        })
        .collect()
}

/// Separating-axis overlap test for convex polygons.
fn convex_overlap(a: &[[f64; 2]], b: &[[f64; 2]]) -> bool {
    for poly in [a, b] {
        for i in 0..poly.len() {
            let p = poly[i];
            let q = poly[(i + 1) % poly.len()];
            let axis = [q[1] - p[1], p[0] - q[0]];
            let proj = |pts: &[[f64; 2]]| {
                pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    let d = v[0] * axis[0] + v[1] * axis[1];
                    (lo.min(d), hi.max(d))
                })
            };
            let (a0, a1) = proj(a);
            let (b0, b1) = proj(b);
            if a1 < b0 || b1 < a0 {
                return false;
            }
        }
    }
    true
}

pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let mut s = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        s += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * s.abs()
}

impl SceneLayout {
    /// Samples object placements. Fails if an object cannot be placed without
    /// overlapping earlier ones within `max_attempts` tries.
    pub fn sample(spec: &SceneSpec) -> Result<SceneLayout> {
        spec.validate(&BevConfig {
            range: spec.extent,
            ..Default::default()
        })?;
        let mut rng = rng_for(spec.seed, "scene-layout");
        let mut emb_rng = rng_for(spec.embedding_seed, "embeddings");
        let embeddings = class_embeddings(spec.feature_dim, Surface::ALL.len(), &mut emb_rng);
        let half = spec.extent / 2.0;
        let hw = spec.lane_width / 2.0;

        // lanes: parallel strips along x with distinct y
        let mut lanes: Vec<(f64, f64)> = Vec::new();
        for _ in 0..spec.lanes {
            let mut placed = false;
            for _ in 0..spec.max_attempts {
                let y = rng.gen_range(-half + hw + 2.0..half - hw - 2.0);
                if lanes.iter().all(|(ly, _)| (ly - y).abs() > 2.0 * hw + 2.0 * spec.gap + 3.0) {
                    lanes.push((y, hw));
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::InfeasiblePacking {
                    what: "lane".into(),
                    attempts: spec.max_attempts,
                });
            }
        }
        lanes.sort_by(|a, b| a.0.total_cmp(&b.0));

        let mut instances = Vec::new();
        let mut blockers: Vec<Vec<[f64; 2]>> = Vec::new();
        for &(y, h) in &lanes {
            // lane instances are 10 m segments of the strip
            let segs = (spec.extent / 10.0).round().max(1.0) as usize;
            let len = spec.extent / segs as f64;
            for s in 0..segs {
                let x0 = -half + s as f64 * len;
                let center = [x0 + len / 2.0, y];
                instances.push(Instance {
                    class: BevClass::Lane,
                    footprint: rect_polygon(center, [len / 2.0, h], 0.0),
                    center,
                });
            }
            blockers.push(rect_polygon([0.0, y], [half + 1.0, h + spec.gap], 0.0));
        }

        let mut solids = Vec::new();
        let mut colors = Vec::new();
        let palette = [[0.8, 0.1, 0.1], [0.1, 0.2, 0.8], [0.9, 0.9, 0.9], [0.15, 0.15, 0.15], [0.9, 0.75, 0.1], [0.2, 0.6, 0.3]];
        let place = |rng: &mut ChaCha8Rng, blockers: &mut Vec<Vec<[f64; 2]>>, radius: f64, make: &dyn Fn(&mut ChaCha8Rng, [f64; 2]) -> (Vec<[f64; 2]>, Vec<[f64; 2]>), what: &str| -> Result<(Vec<[f64; 2]>, [f64; 2], ChaCha8Rng)> {
            for _ in 0..spec.max_attempts {
                let c = [rng.gen_range(-half + radius..half - radius), rng.gen_range(-half + radius..half - radius)];
                if (c[0] * c[0] + c[1] * c[1]).sqrt() < spec.ego_clearance + radius {
                    continue;
                }
                let mut sub = rng.clone();
                let (poly, grown) = make(&mut sub, c);
                if blockers.iter().all(|b| !convex_overlap(b, &grown)) {
                    blockers.push(grown);
                    return Ok((poly, c, sub));
                }
            }
            Err(Error::InfeasiblePacking {
                what: what.into(),
                attempts: spec.max_attempts,
            })
        };

        for _ in 0..spec.vehicles {
            let dims = [rng.gen_range(4.0..5.0) / 2.0, rng.gen_range(1.8..2.1) / 2.0];
            let yaw = rng.gen_range(0.0..PI);
            let height = rng.gen_range(1.4..1.8);
            let gap = spec.gap;
            let make = move |_: &mut ChaCha8Rng, c: [f64; 2]| (rect_polygon(c, dims, yaw), rect_polygon(c, [dims[0] + gap, dims[1] + gap], yaw));
            let (poly, c, sub) = place(&mut rng, &mut blockers, 3.0, &make, "vehicle")?;
            rng = sub;
            solids.push((
                Solid::Box {
                    center: c,
                    half: dims,
                    height,
                    yaw,
                },
                Surface::Vehicle,
            ));
            colors.push(palette[rng.gen_range(0..palette.len())]);
            instances.push(Instance {
                class: BevClass::Vehicle,
                footprint: poly,
                center: c,
            });
        }
        for _ in 0..spec.pedestrians {
            let r = spec.pedestrian_radius;
            let height = rng.gen_range(1.6..1.85);
            let gap = spec.gap;
            let make = move |_: &mut ChaCha8Rng, c: [f64; 2]| (disc_polygon(c, r, 48), disc_polygon(c, r + gap, 16));
            let (poly, c, sub) = place(&mut rng, &mut blockers, 1.0, &make, "pedestrian")?;
            rng = sub;
            solids.push((Solid::Cylinder { center: c, radius: r, height }, Surface::Pedestrian));
            colors.push([rng.gen_range(0.6..0.95), rng.gen_range(0.3..0.6), rng.gen_range(0.1..0.3)]);
            instances.push(Instance {
                class: BevClass::Pedestrian,
                footprint: poly,
                center: c,
            });
        }
        if spec.clutter {
            for _ in 0..spec.clutter_count {
                // canopies may overhang anything, including other canopies
                let center = Vector3::new(
                    rng.gen_range(-half + 3.0..half - 3.0),
                    rng.gen_range(-half + 3.0..half - 3.0),
                    rng.gen_range(spec.clutter_band[0]..=spec.clutter_band[1]),
                );
                let radii = Vector3::new(rng.gen_range(2.0..3.0), rng.gen_range(2.0..3.0), rng.gen_range(0.6..1.0));
                solids.push((Solid::Ellipsoid { center, radii }, Surface::Vegetation));
                colors.push([0.2, rng.gen_range(0.45..0.6), 0.2]);
            }
        }
        Ok(SceneLayout {
            spec: spec.clone(),
            embeddings,
            instances,
            lanes,
            solids,
            colors,
        })
    }

    fn embedding(&self, s: Surface) -> &[f64] {
        &self.embeddings[s.index()]
    }

    /// Splat representation of the layout, quantized to `f32` values.
    pub fn gaussians(&self) -> Result<Scene> {
        let bev = BevConfig {
            range: self.spec.extent,
            ..Default::default()
        };
        let bev_cam = make_bev_camera(&bev)?;
        let mut rng = rng_for(self.spec.seed, "scene-splats");
        let mut gs = self.ground(&mut rng);
        for &(y, h) in &self.lanes {
            gs.extend(self.lane(y, h, &bev_cam, &mut rng));
        }
        let mut object_sets: Vec<(usize, Vec<Gaussian>)> = self
            .solids
            .par_iter()
            .enumerate()
            .map(|(k, (solid, surface))| {
                let mut r = rng_for(self.spec.seed, &format!("object-{k}"));
                let color = self.colors[k];
                let f = self.embedding(*surface);
                let set = match *solid {
                    Solid::Box { center, half, height, yaw } => vehicle_splats(center, half, height, yaw, color, f, &bev_cam, &mut r),
                    Solid::Cylinder { center, radius, height } => pedestrian_splats(center, radius, height, color, f, &bev_cam, &mut r),
                    Solid::Ellipsoid { center, radii } => canopy_splats(center, radii, color, f, &mut r),
                };
                (k, set)
            })
            .collect();
        object_sets.sort_by_key(|(k, _)| *k);
        gs.extend(object_sets.into_iter().flat_map(|(_, s)| s));
        let mut scene = Scene::new(self.spec.feature_dim);
        scene.sh_degree = ShDegree::Zero;
        scene.gaussians = gs;
        quantize_scene(&mut scene);
        scene.validate()?;
        Ok(scene)
    }

    fn ground(&self, rng: &mut ChaCha8Rng) -> Vec<Gaussian> {
        let half = self.spec.extent / 2.0;
        let q = self.spec.ground_ring_ratio;
        let f = self.embedding(Surface::Ground);
        let gray = |rng: &mut ChaCha8Rng| {
            let v = 0.4 + rng.gen_range(-0.05..0.05);
            [v, v, v + 0.02]
        };
        let r0 = 1.0;
        let mut out = vec![flat_splat(Vector3::zeros(), Vector3::new(0.6 * r0, 0.6 * r0, 0.02), 0.0, 0.99, gray(rng), f)];
        let mut r_in = r0;
        let mut ring = 0usize;
        while r_in < half * std::f64::consts::SQRT_2 {
            let r_out = r_in * q;
            let r_mid = 0.5 * (r_in + r_out);
            let dr = r_out - r_in;
            let n = (TAU * r_mid / dr).ceil() as usize;
            let dt = TAU * r_mid / n as f64;
            let phase = if ring % 2 == 0 { 0.0 } else { 0.5 };
            for j in 0..n {
                let a = TAU * (j as f64 + phase) / n as f64;
                let c = Vector3::new(r_mid * a.cos(), r_mid * a.sin(), 0.0);
                if c.x.abs() > half + 0.5 * dr || c.y.abs() > half + 0.5 * dr {
                    continue;
                }
                out.push(flat_splat(c, Vector3::new(0.6 * dr, 0.6 * dt, 0.02), a, 0.99, gray(rng), f));
            }
            r_in = r_out;
            ring += 1;
        }
        out
    }

    fn lane(&self, y: f64, hw: f64, bev_cam: &Camera, rng: &mut ChaCha8Rng) -> Vec<Gaussian> {
        let half = self.spec.extent / 2.0;
        let f = self.embedding(Surface::Lane);
        let step = 1.5;
        let nx = ((self.spec.extent + 2.0) / step).ceil() as usize + 1;
        let ny = 3usize;
        let build = |inset: f64, jitter: &mut dyn FnMut() -> f64| {
            let span = 2.0 * (hw - inset);
            let dy = span / (ny - 1) as f64;
            let mut out = Vec::with_capacity(nx * ny);
            for i in 0..nx {
                let x = -half - 1.0 + i as f64 * step;
                for j in 0..ny {
                    let yy = y - (hw - inset) + j as f64 * dy;
                    let v = 0.85 + jitter();
                    out.push(flat_splat(Vector3::new(x, yy, LANE_HEIGHT), Vector3::new(0.55 * step, 0.55 * dy, 0.01), 0.0, 0.99, [v, v, v], f));
                }
            }
            out
        };
        let edge = Vector3::new(0.25 * step, y + hw, 0.0);
        let inset = bisect(0.0, 0.9 * hw, |ins| {
            let gs = build(ins, &mut || 0.0);
            let near: Vec<Gaussian> = gs.into_iter().filter(|g| (g.mean.x - edge.x).abs() < 6.0).collect();
            bev_margin(&near, &edge, bev_cam)
        });
        build(inset, &mut || rng.gen_range(-0.05..0.05))
    }

    /// BEV supervision rasterized from the instance footprints.
    pub fn bev_targets(&self, bev: &BevConfig) -> (MaskSet, usize) {
        gt_bev_rasterize(&self.instances, bev)
    }

    /// First surface hit along `origin + t·dir` for `t > 0`.
    pub fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Surface)> {
        let half = self.spec.extent / 2.0;
        let mut best: Option<(f64, Surface)> = None;
        let mut offer = |t: f64, s: Surface| {
            if t > 1e-9 && best.is_none_or(|(b, _)| t < b) {
                best = Some((t, s));
            }
        };
        if dir.z < 0.0 {
            let t = -origin.z / dir.z;
            let p = origin + dir * t;
            if p.x.abs() <= half && p.y.abs() <= half {
                let on_lane = self.lanes.iter().any(|(y, h)| (p.y - y).abs() <= *h);
                offer(t, if on_lane { Surface::Lane } else { Surface::Ground });
            }
        }
        for (solid, surface) in &self.solids {
            if let Some(t) = ray_solid(solid, origin, dir) {
                offer(t, *surface);
            }
        }
        best
    }

    /// Analytic depth (camera z) and feature teachers for one camera.
    pub fn teachers(&self, cam: &Camera) -> (DepthMap, Map) {
        let (w, h) = (cam.width, cam.height);
        let c = self.spec.feature_dim;
        let origin = cam.center();
        let rows: Vec<(Vec<f64>, Vec<bool>, Vec<f64>)> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut depth = vec![0.0; w];
                let mut valid = vec![false; w];
                let mut feat = vec![0.0; w * c];
                for x in 0..w {
                    // unit camera-z step, so the ray parameter is the depth
                    let d_cam = Vector3::new((x as f64 + 0.5 - cam.cx) / cam.fx, (y as f64 + 0.5 - cam.cy) / cam.fy, 1.0);
                    let dir = cam.pose.rotation.transpose() * d_cam;
                    if let Some((t, s)) = self.raycast(&origin, &dir) {
                        depth[x] = t;
                        valid[x] = true;
                        feat[x * c..(x + 1) * c].copy_from_slice(self.embedding(s));
                    } else {
                        depth[x] = f64::NAN;
                    }
                }
                (depth, valid, feat)
            })
            .collect();
        let mut depth = Map::zeros(w, h, 1);
        let mut valid = Vec::with_capacity(w * h);
        let mut feature = Map::zeros(w, h, c);
        for (y, (d, v, f)) in rows.into_iter().enumerate() {
            depth.data[y * w..(y + 1) * w].copy_from_slice(&d);
            valid.extend(v);
            feature.data[y * w * c..(y + 1) * w * c].copy_from_slice(&f);
        }
        (DepthMap { depth, valid }, feature)
    }

    /// Reference images (naive oracle renders of `scene`) plus analytic teachers.
    pub fn render_views(&self, scene: &Scene) -> Result<Vec<ViewData>> {
        self.spec
            .rig
            .cameras()?
            .into_iter()
            .map(|camera| {
                let image = render_naive_oracle(scene, &camera)?.color;
                let (depth, feature) = self.teachers(&camera);
                Ok(ViewData {
                    camera,
                    image,
                    depth,
                    feature,
                })
            })
            .collect()
    }
}

fn ray_solid(solid: &Solid, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
    match *solid {
        Solid::Box { center, half, height, yaw } => {
            let (s, c) = yaw.sin_cos();
            let rel = Vector2::new(o.x - center[0], o.y - center[1]);
            let lo = Vector3::new(c * rel.x + s * rel.y, -s * rel.x + c * rel.y, o.z);
            let ld = Vector3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z);
            let bounds = [(-half[0], half[0]), (-half[1], half[1]), (0.0, height)];
            let mut t0 = f64::NEG_INFINITY;
            let mut t1 = f64::INFINITY;
            for k in 0..3 {
                let (a, b) = bounds[k];
                if ld[k].abs() < 1e-15 {
                    if lo[k] < a || lo[k] > b {
                        return None;
                    }
                    continue;
                }
                let (mut ta, mut tb) = ((a - lo[k]) / ld[k], (b - lo[k]) / ld[k]);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
            }
            (t0 <= t1 && t0 > 0.0).then_some(t0)
        }
        Solid::Cylinder { center, radius, height } => {
            let (ox, oy) = (o.x - center[0], o.y - center[1]);
            let mut best: Option<f64> = None;
            let mut take = |t: f64| {
                if t > 0.0 && best.is_none_or(|b| t < b) {
                    best = Some(t);
                }
            };
            let a = d.x * d.x + d.y * d.y;
            if a > 0.0 {
                let b = 2.0 * (ox * d.x + oy * d.y);
                let cc = ox * ox + oy * oy - radius * radius;
                let disc = b * b - 4.0 * a * cc;
                if disc >= 0.0 {
                    let t = (-b - disc.sqrt()) / (2.0 * a);
                    let z = o.z + t * d.z;
                    if (0.0..=height).contains(&z) {
                        take(t);
                    }
                }
            }
            if d.z.abs() > 1e-15 {
                let t = (height - o.z) / d.z;
                let (px, py) = (ox + t * d.x, oy + t * d.y);
                if px * px + py * py <= radius * radius {
                    take(t);
                }
            }
            best
        }
        Solid::Ellipsoid { center, radii } => {
            let lo = (o - center).component_div(&radii);
            let ld = d.component_div(&radii);
            let a = ld.dot(&ld);
            let b = 2.0 * lo.dot(&ld);
            let c = lo.dot(&lo) - 1.0;
            let disc = b * b - 4.0 * a * c;
            if disc < 0.0 {
                return None;
            }
            let t = (-b - disc.sqrt()) / (2.0 * a);
            (t > 0.0).then_some(t)
        }
    }
}

fn flat_splat(center: Vector3<f64>, std: Vector3<f64>, yaw: f64, opacity: f64, rgb: [f64; 3], feature: &[f64]) -> Gaussian {
    let mut g = Gaussian::isotropic(center, 1.0, opacity, [0.5; 3], feature.to_vec());
    g.scale_log = std.map(f64::ln);
    g.rotation = axis_angle_quat(Vector3::z(), yaw);
    g.color_coeffs[0] = rgb_to_dc(rgb.map(|c| c.clamp(0.0, 1.0)));
    g
}

/// Weight of `gs` minus what remains for an opaque ground below, at the BEV
/// pixel of world point `p`. Positive where the object wins nearest-embedding
/// classification against the ground.
fn bev_margin(gs: &[Gaussian], p: &Vector3<f64>, cam: &Camera) -> f64 {
    let (u, v) = (cam.fx * p.x + cam.cx, cam.fy * p.y + cam.cy);
    let mut hits: Vec<(f64, f64)> = gs
        .iter()
        .filter_map(|g| {
            let a = activate(g, None).ok()?;
            let (m, c) = world_to_camera(&a.mean, &a.cov, &cam.pose);
            let mut g2 = project(&m, &c, cam).visible()?;
            g2.cov2d = regularize_cov2d(&g2.cov2d);
            let alpha = evaluate_alpha(&g2, a.opacity, (u, v)).ok()?;
            (alpha > 0.0).then_some((g2.depth, alpha))
        })
        .collect();
    hits.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut t = 1.0;
    let mut w = 0.0;
    for (_, a) in hits {
        w += t * a;
        t *= 1.0 - a;
    }
    w - t
}

/// Root of a decreasing function on `[lo, hi]`; clamps to the better end if
/// there is no sign change.
fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let (flo, fhi) = (f(lo), f(hi));
    if flo <= 0.0 {
        return lo;
    }
    if fhi >= 0.0 {
        return hi;
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[allow(clippy::too_many_arguments)]
fn vehicle_splats(
    center: [f64; 2],
    half: [f64; 2],
    height: f64,
    yaw: f64,
    color: [f64; 3],
    f: &[f64],
    bev_cam: &Camera,
    rng: &mut ChaCha8Rng,
) -> Vec<Gaussian> {
    let (s, c) = yaw.sin_cos();
    let to_world = |lx: f64, ly: f64, z: f64| Vector3::new(center[0] + c * lx - s * ly, center[1] + s * lx + c * ly, z);
    let nx = ((2.0 * half[0]) / 0.9).ceil().max(2.0) as usize;
    let ny = ((2.0 * half[1]) / 0.9).ceil().max(2.0) as usize;
    let nz = (height / 0.7).ceil().max(2.0) as usize;
    let build = |ix: f64, iy: f64, jitter: &mut dyn FnMut() -> f64| {
        let (ex, ey) = (half[0] - ix, half[1] - iy);
        let dx = 2.0 * ex / (nx - 1) as f64;
        let dy = 2.0 * ey / (ny - 1) as f64;
        let dz = height / nz as f64;
        let mut out = Vec::new();
        let col = |j: &mut dyn FnMut() -> f64| color.map(|v| v + j());
        for i in 0..nx {
            for k in 0..ny {
                let p = to_world(-ex + i as f64 * dx, -ey + k as f64 * dy, height);
                out.push(flat_splat(p, Vector3::new(0.55 * dx, 0.55 * dy, 0.03), yaw, 0.99, col(jitter), f));
            }
        }
        for r in 0..nz {
            let z = (r as f64 + 0.5) * dz;
            for i in 0..nx {
                let lx = -ex + i as f64 * dx;
                for side in [-1.0, 1.0] {
                    out.push(flat_splat(to_world(lx, side * ey, z), Vector3::new(0.55 * dx, 0.03, 0.55 * dz), yaw, 0.99, col(jitter), f));
                }
            }
            for k in 1..ny - 1 {
                let ly = -ey + k as f64 * dy;
                for side in [-1.0, 1.0] {
                    out.push(flat_splat(to_world(side * ex, ly, z), Vector3::new(0.03, 0.55 * dy, 0.55 * dz), yaw, 0.99, col(jitter), f));
                }
            }
        }
        out
    };
    let mut ix = 0.0;
    let mut iy = 0.0;
    for _ in 0..2 {
        let end = to_world(half[0], 0.0, 0.0);
        ix = bisect(0.0, 0.9 * half[0], |t| bev_margin(&build(t, iy, &mut || 0.0), &end, bev_cam));
        let side = to_world(0.0, half[1], 0.0);
        iy = bisect(0.0, 0.9 * half[1], |t| bev_margin(&build(ix, t, &mut || 0.0), &side, bev_cam));
    }
    build(ix, iy, &mut || rng.gen_range(-0.04..0.04))
}

fn pedestrian_splats(center: [f64; 2], radius: f64, height: f64, color: [f64; 3], f: &[f64], bev_cam: &Camera, rng: &mut ChaCha8Rng) -> Vec<Gaussian> {
    let levels = [0.2, 0.45, 0.7];
    let build = |k: f64, jitter: &mut dyn FnMut() -> f64| {
        let mut out = vec![flat_splat(
            Vector3::new(center[0], center[1], height),
            Vector3::new(k * radius, k * radius, 0.05),
            0.0,
            0.99,
            color.map(|v| v + jitter()),
            f,
        )];
        for l in levels {
            out.push(flat_splat(
                Vector3::new(center[0], center[1], l * height),
                Vector3::new(k * radius, k * radius, 0.15 * height),
                0.0,
                0.95,
                color.map(|v| v + jitter()),
                f,
            ));
        }
        out
    };
    let edge = Vector3::new(center[0] + radius, center[1], 0.0);
    let k = bisect(0.05, 1.5, |k| -bev_margin(&build(k, &mut || 0.0), &edge, bev_cam));
    build(k, &mut || rng.gen_range(-0.04..0.04))
}

fn canopy_splats(center: Vector3<f64>, radii: Vector3<f64>, color: [f64; 3], f: &[f64], rng: &mut ChaCha8Rng) -> Vec<Gaussian> {
    (0..14)
        .map(|_| {
            let p = loop {
                let q = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                if q.norm_squared() <= 1.0 {
                    break q;
                }
            };
            let c = center + p.component_mul(&(radii * 0.7));
            let col = color.map(|v| v + rng.gen_range(-0.05..0.05));
            flat_splat(c, Vector3::new(0.45 * radii.x, 0.45 * radii.y, 0.5 * radii.z), rng.gen_range(0.0..PI), 0.9, col, f)
        })
        .collect()
}

/// Scan-converts instance footprints at BEV pixel centers. Returns the masks
/// and the number of degenerate (zero-area) footprints skipped.
pub fn gt_bev_rasterize(instances: &[Instance], bev: &BevConfig) -> (MaskSet, usize) {
    let n = bev.resolution;
    let mut masks = MaskSet::empty(n, n, NUM_CLASSES);
    let mut skipped = 0;
    let sigma: f64 = 3.0;
    for inst in instances {
        if inst.footprint.len() < 3 || polygon_area(&inst.footprint) <= 0.0 {
            skipped += 1;
            continue;
        }
        let poly: Vec<(f64, f64)> = inst.footprint.iter().map(|p| bev.world_to_pixel(p[0], p[1])).collect();
        let (cu, cv) = bev.world_to_pixel(inst.center[0], inst.center[1]);
        let (ymin, ymax) = poly.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
        let j0 = (ymin - 0.5).ceil().max(0.0) as usize;
        let j1 = ((ymax - 0.5).floor().min(n as f64 - 1.0)).max(-1.0);
        if j1 >= 0.0 {
            for j in j0..=j1 as usize {
                let yc = j as f64 + 0.5;
                let mut xs: Vec<f64> = Vec::new();
                for k in 0..poly.len() {
                    let (a, b) = (poly[k], poly[(k + 1) % poly.len()]);
                    if (a.1 <= yc) != (b.1 <= yc) {
                        xs.push(a.0 + (yc - a.1) * (b.0 - a.0) / (b.1 - a.1));
                    }
                }
                xs.sort_by(f64::total_cmp);
                for pair in xs.chunks_exact(2) {
                    let i0 = (pair[0] - 0.5).ceil().max(0.0) as usize;
                    let i1 = (pair[1] - 0.5).ceil().min(n as f64);
                    if i1 <= 0.0 {
                        continue;
                    }
                    for i in i0..i1 as usize {
                        let p = j * n + i;
                        masks.classes.pixel_mut(p)[inst.class.index()] = 1.0;
                        masks.instance[p] = true;
                        let o = masks.offset.pixel_mut(p);
                        o[0] = cu - (i as f64 + 0.5);
                        o[1] = cv - yc;
                    }
                }
            }
        }
        let reach = (4.0 * sigma).ceil() as i64;
        for j in (cv as i64 - reach).max(0)..(cv as i64 + reach + 1).min(n as i64) {
            for i in (cu as i64 - reach).max(0)..(cu as i64 + reach + 1).min(n as i64) {
                let d2 = (i as f64 + 0.5 - cu).powi(2) + (j as f64 + 0.5 - cv).powi(2);
                let c = &mut masks.centerness.data[j as usize * n + i as usize];
                *c = c.max((-d2 / (2.0 * sigma * sigma)).exp());
            }
        }
    }
    (masks, skipped)
}

/// Scene, teachers, reference images and BEV targets for `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<(Scene, GroundTruthBundle)> {
    let layout = SceneLayout::sample(spec)?;
    let scene = layout.gaussians()?;
    let views = layout.render_views(&scene)?;
    let bev = BevConfig {
        range: spec.extent,
        ..Default::default()
    };
    let (masks, skipped) = layout.bev_targets(&bev);
    Ok((
        scene,
        GroundTruthBundle {
            views,
            bev: masks,
            instances: layout.instances.clone(),
            embeddings: layout.embeddings.clone(),
            skipped_instances: skipped,
        },
    ))
}

/// Noise model standing in for an imperfect scene generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbSpec {
    /// Horizontal position noise, meters.
    pub mean_std: f64,
    /// Vertical position noise, meters.
    pub mean_z_std: f64,
    pub scale_log_std: f64,
    pub opacity_logit_std: f64,
    pub color_std: f64,
    pub feature_std: f64,
}

impl Default for PerturbSpec {
    fn default() -> Self {
        PerturbSpec {
            mean_std: 0.2,
            mean_z_std: 0.2,
            scale_log_std: 0.1,
            opacity_logit_std: 0.3,
            color_std: 0.3,
            feature_std: 0.2,
        }
    }
}

/// Adds independent Gaussian noise to every raw parameter of every splat.
pub fn perturb_scene(scene: &Scene, p: &PerturbSpec, rng: &mut ChaCha8Rng) -> Scene {
    let mut out = scene.clone();
    let n = |std: f64| Normal::new(0.0, std.max(0.0)).expect("non-negative std");
    let (nm, nz, ns, no, nc, nf) = (n(p.mean_std), n(p.mean_z_std), n(p.scale_log_std), n(p.opacity_logit_std), n(p.color_std), n(p.feature_std));
    for g in &mut out.gaussians {
        g.mean += Vector3::new(nm.sample(rng), nm.sample(rng), nz.sample(rng));
        g.scale_log += Vector3::from_fn(|_, _| ns.sample(rng));
        g.opacity_logit += no.sample(rng);
        for c in &mut g.color_coeffs {
            c.iter_mut().for_each(|v| *v += nc.sample(rng));
        }
        g.feature.iter_mut().for_each(|v| *v += nf.sample(rng));
    }
    quantize_scene(&mut out);
    out
}
