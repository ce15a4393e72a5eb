//! Finite-difference gradient suite: renderer parameters under both camera
//! modes, every loss term, and the splat -> BEV -> head -> loss chain.

use nalgebra::{Matrix3, Vector3, Vector4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bev::{make_bev_camera, BevChainLoss, BevConfig, SegHead, NUM_CLASSES};
use crate::buffer::{DepthMap, Map, MaskSet, RenderOutput};
use crate::camera::{Camera, Pose};
use crate::error::Result;
use crate::gaussian::{logit, rgb_to_dc, Gaussian, ParamGroup, Scene, ShDegree};
use crate::grad::{finite_diff_check, relative_error, FdConfig, RenderUpstream};
use crate::loss::{
    bev_loss, center_l2, depth_l1, depth_silog, feature_cosine, focal, loss_bev, loss_total, mse, offset_l1, render_view_loss,
    LossConfig, ViewTarget,
};
use crate::seed::rng_for;

/// Tolerance for renderer and per-loss checks.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Tolerance for the end-to-end BEV chain.
pub const CHAIN_TOLERANCE: f64 = 1e-3;

/// Renderer probes. Losses here are O(1) per-pixel means, so components
/// below ~1e-6 are dominated by cancellation in the difference quotient; the
/// larger step keeps roundoff under the truncation error.
fn render_fd(seed: u64, samples: usize) -> FdConfig {
    FdConfig {
        eps: 1e-4,
        floor: 1e-6,
        samples,
        seed,
        ..Default::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub samples: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn random_scene(rng: &mut ChaCha8Rng, n: usize, feature_dim: usize, sh: ShDegree) -> Scene {
    let mut scene = Scene::new(feature_dim);
    scene.sh_degree = sh;
    for _ in 0..n {
        let mean = Vector3::new(rng.gen_range(-2.5..2.5), rng.gen_range(-2.5..2.5), rng.gen_range(-0.6..0.6));
        let mut g = Gaussian::isotropic(
            mean,
            1.0,
            rng.gen_range(0.3..0.8),
            [rng.gen(), rng.gen(), rng.gen()],
            (0..feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        g.scale_log = Vector3::from_fn(|_, _| rng.gen_range(0.35f64..1.1).ln());
        g.rotation = Vector4::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        if g.rotation.norm() < 0.2 {
            g.rotation = Vector4::new(1.0, 0.0, 0.0, 0.0);
        }
        g.opacity_logit = logit(rng.gen_range(0.3..0.85));
        g.color_coeffs = vec![rgb_to_dc([rng.gen(), rng.gen(), rng.gen()])];
        if sh == ShDegree::One {
            g.color_coeffs.extend((0..3).map(|_| [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)]));
        }
        scene.gaussians.push(g);
    }
    scene
}

fn check_cameras() -> Result<Vec<(&'static str, Camera)>> {
    let top = Pose {
        rotation: Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)),
        translation: Vector3::new(0.0, 0.0, 3.0),
    };
    let side = Pose::looking(Vector3::new(0.0, -12.0, 1.5), Vector3::new(0.0, 1.0, -0.1), -Vector3::z());
    Ok(vec![
        ("orthogonal", Camera::orthogonal(2.0, 2.0, 12.0, 12.0, top, 24, 24)?),
        ("perspective", Camera::from_fov(1.2, side, 32, 24, 0.1, 100.0)?),
    ])
}

/// Sum of squared differences against fixed random targets on every buffer.
struct QuadraticLoss {
    targets: RenderOutput,
    weights: [f64; 4],
}

impl QuadraticLoss {
    fn eval(&self, out: &RenderOutput) -> (f64, RenderUpstream) {
        let mut up = RenderUpstream::zeros_like(out);
        let n = out.color.pixels() as f64;
        let mut l = 0.0;
        let maps = [
            (&out.color, &self.targets.color, up.color.as_mut()),
            (&out.feature, &self.targets.feature, up.feature.as_mut()),
            (&out.depth, &self.targets.depth, up.depth.as_mut()),
            (&out.alpha, &self.targets.alpha, up.alpha.as_mut()),
        ];
        for ((m, t, g), w) in maps.into_iter().zip(self.weights) {
            let g = g.expect("allocated by zeros_like");
            for k in 0..m.data.len() {
                let d = m.data[k] - t.data[k];
                l += w * d * d / n;
                g.data[k] = 2.0 * w * d / n;
            }
        }
        (l, up)
    }
}

fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize, lo: f64, hi: f64) -> Map {
    Map {
        width: w,
        height: h,
        channels: c,
        data: (0..w * h * c).map(|_| rng.gen_range(lo..hi)).collect(),
    }
}

/// Renderer gradients of every parameter group under both camera modes.
pub fn renderer_checks(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for (name, cam) in check_cameras()? {
        for sh in [ShDegree::Zero, ShDegree::One] {
            let mut rng = rng_for(seed, &format!("check-{name}-{sh:?}"));
            let scene = random_scene(&mut rng, 10, 3, sh);
            let (w, h) = (cam.width, cam.height);
            let loss = QuadraticLoss {
                targets: RenderOutput {
                    color: random_map(&mut rng, w, h, 3, 0.0, 1.0),
                    feature: random_map(&mut rng, w, h, 3, -1.0, 1.0),
                    depth: random_map(&mut rng, w, h, 1, 0.0, 12.0),
                    alpha: random_map(&mut rng, w, h, 1, 0.0, 1.0),
                },
                weights: [1.0, 0.7, 0.01, 0.5],
            };
            let f = |o: &RenderOutput| loss.eval(o);
            let report = finite_diff_check(&scene, &cam, &f, &render_fd(rng.gen(), 48))?;
            let covered = report.groups_covered();
            let expect = ParamGroup::ALL.len();
            rows.push(CheckRow {
                name: format!("render/{name}/sh{}", if sh == ShDegree::One { 1 } else { 0 }),
                samples: report.samples.iter().filter(|s| !s.crosses_cutoff).count(),
                // a group that was never sampled counts as a failure
                max_rel_error: if covered.len() == expect { report.max_rel_error } else { f64::INFINITY },
                tolerance: GRAD_TOLERANCE,
            });
        }
    }
    Ok(rows)
}

fn map_check(name: &str, x: &Map, analytic: &Map, f: impl Fn(&Map) -> f64) -> CheckRow {
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for k in 0..x.data.len() {
        let mut a = x.clone();
        let mut b = x.clone();
        a.data[k] += eps;
        b.data[k] -= eps;
        let n = (f(&a) - f(&b)) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data[k], n, 1e-4));
    }
    CheckRow {
        name: format!("loss/{name}"),
        samples: x.data.len(),
        max_rel_error: worst,
        tolerance: GRAD_TOLERANCE,
    }
}

/// Every loss term, and both composed objectives, against central differences
/// over all inputs.
pub fn loss_checks(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rng = rng_for(seed, "check-losses");
    let (w, h) = (4, 3);
    let cfg = LossConfig::default();
    let mut rows = Vec::new();

    let x = random_map(&mut rng, w, h, 3, -1.0, 1.0);
    let y = random_map(&mut rng, w, h, 3, -1.0, 1.0);
    rows.push(map_check("mse", &x, &mse(&x, &y)?.grad, |m| mse(m, &y).map_or(f64::NAN, |t| t.value)));
    rows.push(map_check("feature_cosine", &x, &feature_cosine(&x, &y)?.grad, |m| {
        feature_cosine(m, &y).map_or(f64::NAN, |t| t.value)
    }));

    let d = random_map(&mut rng, w, h, 1, 0.5, 10.0);
    let r = DepthMap {
        depth: random_map(&mut rng, w, h, 1, 0.5, 10.0),
        valid: (0..w * h).map(|p| p % 5 != 2).collect(),
    };
    let wrap = |m: &Map| DepthMap::all_valid(m.clone());
    rows.push(map_check("depth_l1", &d, &depth_l1(&wrap(&d), &r)?.grad, |m| {
        depth_l1(&wrap(m), &r).map_or(f64::NAN, |t| t.value)
    }));
    rows.push(map_check("depth_silog", &d, &depth_silog(&wrap(&d), &r)?.grad, |m| {
        depth_silog(&wrap(m), &r).map_or(f64::NAN, |t| t.value)
    }));

    let logits = random_map(&mut rng, w, h, NUM_CLASSES, -3.0, 3.0);
    let labels = Map {
        data: random_map(&mut rng, w, h, NUM_CLASSES, 0.0, 1.0).data.iter().map(|v| v.round()).collect(),
        ..logits.clone()
    };
    let (g, a) = (cfg.focal_gamma, Some(cfg.focal_alpha));
    rows.push(map_check("focal", &logits, &focal(&logits, &labels, g, a)?.grad, |m| {
        focal(m, &labels, g, a).map_or(f64::NAN, |t| t.value)
    }));
    let c = random_map(&mut rng, w, h, 1, 0.0, 1.0);
    let ct = random_map(&mut rng, w, h, 1, 0.0, 1.0);
    rows.push(map_check("center_l2", &c, &center_l2(&c, &ct)?.grad, |m| center_l2(m, &ct).map_or(f64::NAN, |t| t.value)));
    let o = random_map(&mut rng, w, h, 2, -4.0, 4.0);
    let ot = random_map(&mut rng, w, h, 2, -4.0, 4.0);
    let mask: Vec<bool> = (0..w * h).map(|p| p % 3 != 0).collect();
    rows.push(map_check("offset_l1", &o, &offset_l1(&o, &ot, &mask)?.grad, |m| {
        offset_l1(m, &ot, &mask).map_or(f64::NAN, |t| t.value)
    }));

    // BEV objective over all three head outputs
    let targets = MaskSet {
        classes: labels.clone(),
        centerness: ct.clone(),
        offset: ot.clone(),
        instance: mask.clone(),
    };
    let (_, bg) = bev_loss(&logits, &c, &o, &targets, &cfg)?;
    let total = |l: &Map, c: &Map, o: &Map| bev_loss(l, c, o, &targets, &cfg).map_or(f64::NAN, |(p, _)| loss_bev(&p, &cfg));
    let mut bev_rows = vec![
        map_check("bev/logits", &logits, &bg.logits, |m| total(m, &c, &o)),
        map_check("bev/center", &c, &bg.center, |m| total(&logits, m, &o)),
        map_check("bev/offset", &o, &bg.offset, |m| total(&logits, &c, m)),
    ];
    rows.append(&mut bev_rows);

    // weighted render objective, alpha kept above the depth validity gate
    let out = RenderOutput {
        color: random_map(&mut rng, w, h, 3, 0.0, 1.0),
        feature: random_map(&mut rng, w, h, 3, -1.0, 1.0),
        depth: random_map(&mut rng, w, h, 1, 1.0, 8.0),
        alpha: random_map(&mut rng, w, h, 1, 0.6, 0.99),
    };
    let target = ViewTarget {
        color: random_map(&mut rng, w, h, 3, 0.0, 1.0),
        depth: Some(r.clone()),
        feature: Some(random_map(&mut rng, w, h, 3, -1.0, 1.0)),
    };
    let (_, up) = render_view_loss(&out, &target, &cfg)?;
    let value = |o: &RenderOutput| render_view_loss(o, &target, &cfg).map_or(f64::NAN, |(p, _)| loss_total(&p, &cfg));
    let with = |pick: fn(&mut RenderOutput) -> &mut Map, m: &Map| {
        let mut o = out.clone();
        *pick(&mut o) = m.clone();
        value(&o)
    };
    let zero = |m: &Map| Map::zeros(m.width, m.height, m.channels);
    let g_or_zero = |g: &Option<Map>, m: &Map| g.clone().unwrap_or_else(|| zero(m));
    rows.push(map_check("render_total/color", &out.color, &g_or_zero(&up.color, &out.color), |m| with(|o| &mut o.color, m)));
    rows.push(map_check("render_total/feature", &out.feature, &g_or_zero(&up.feature, &out.feature), |m| {
        with(|o| &mut o.feature, m)
    }));
    rows.push(map_check("render_total/depth", &out.depth, &g_or_zero(&up.depth, &out.depth), |m| with(|o| &mut o.depth, m)));
    rows.push(map_check("render_total/alpha", &out.alpha, &g_or_zero(&up.alpha, &out.alpha), |m| with(|o| &mut o.alpha, m)));
    Ok(rows)
}

/// Gaussian parameters through the orthogonal BEV render, a random head and
/// the BEV loss on a crop.
pub fn bev_chain_check(seed: u64) -> Result<CheckRow> {
    let mut rng = rng_for(seed, "check-bev-chain");
    let bev = BevConfig {
        resolution: 24,
        range: 12.0,
        height: 3.0,
    };
    let scene = random_scene(&mut rng, 16, 4, ShDegree::Zero);
    let head = SegHead::init(4, 6, NUM_CLASSES, &mut rng);
    let n = bev.resolution;
    let classes = Map {
        data: random_map(&mut rng, n, n, NUM_CLASSES, 0.0, 1.0).data.iter().map(|v| v.round()).collect(),
        ..Map::zeros(n, n, NUM_CLASSES)
    };
    let targets = MaskSet {
        classes,
        centerness: random_map(&mut rng, n, n, 1, 0.0, 1.0),
        offset: random_map(&mut rng, n, n, 2, -5.0, 5.0),
        instance: (0..n * n).map(|p| p % 4 != 0).collect(),
    };
    let cfg = LossConfig::default();
    let chain = BevChainLoss {
        head: &head,
        targets: &targets,
        crop: (3, 5, 16),
        loss: &cfg,
    };
    let cam = make_bev_camera(&bev)?;
    let report = finite_diff_check(&scene, &cam, &chain, &render_fd(rng.gen(), 36))?;
    Ok(CheckRow {
        name: "bev_chain".into(),
        samples: report.samples.iter().filter(|s| !s.crosses_cutoff).count(),
        max_rel_error: report.max_rel_error,
        tolerance: CHAIN_TOLERANCE,
    })
}

pub fn run_all(seed: u64) -> Result<Vec<CheckRow>> {
    let mut rows = renderer_checks(seed)?;
    rows.extend(loss_checks(seed)?);
    rows.push(bev_chain_check(seed)?);
    Ok(rows)
}
