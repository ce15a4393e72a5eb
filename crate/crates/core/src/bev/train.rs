//! Head-only and joint BEV training, IoU evaluation and the camera-height sweep.

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::head::{BevPrediction, SegHead};
use super::{iou_counts, make_bev_camera, BevClass, BevConfig, NUM_CLASSES};
use crate::buffer::{Map, MaskSet, RenderOutput};
use crate::error::{Error, Result};
use crate::gaussian::Scene;
use crate::grad::{RenderLoss, RenderUpstream};
use crate::loss::{bev_loss, loss_bev, BevLossParts, LossConfig};
use crate::optim::{AdamState, LearningRates, SceneOptimizer, DEFAULT_CLIP_NORM};
use crate::raster::{Frame, RenderConfig};

/// A scene with its analytic BEV targets.
#[derive(Clone, Debug)]
pub struct BevSample {
    pub scene: Scene,
    pub targets: MaskSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage2_iters: usize,
    pub stage3_iters: usize,
    /// Side of the square training crop, pixels.
    pub crop: usize,
    pub head_lr: f64,
    /// Joint fine-tuning runs every learning rate (head and Gaussian groups)
    /// at this multiple of its earlier value.
    pub stage3_lr_scale: f64,
    pub hidden: usize,
    /// Probability that a crop is centered on an instance pixel.
    pub positive_crop_prob: f64,
    pub seed: u64,
    pub lr: LearningRates,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage2_iters: 600,
            stage3_iters: 300,
            crop: 64,
            head_lr: 5e-3,
            stage3_lr_scale: 0.01,
            hidden: super::head::DEFAULT_HIDDEN,
            positive_crop_prob: 0.7,
            seed: 0,
            lr: LearningRates::default(),
        }
    }
}

/// Loss of one training step, recorded before the update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BevRecord {
    pub stage: u8,
    pub iteration: usize,
    pub focal: f64,
    pub center: f64,
    pub offset: f64,
    pub total: f64,
}

impl BevRecord {
    fn new(stage: u8, iteration: usize, parts: &BevLossParts, cfg: &LossConfig) -> Self {
        BevRecord {
            stage,
            iteration,
            focal: parts.focal,
            center: parts.center,
            offset: parts.offset,
            total: loss_bev(parts, cfg),
        }
    }
}

/// Adam over the flat head parameters with global-norm clipping.
struct HeadOptimizer {
    state: AdamState,
    lr: f64,
}

impl HeadOptimizer {
    fn new(head: &SegHead, lr: f64) -> Self {
        HeadOptimizer {
            state: AdamState::new(head.params.len()),
            lr,
        }
    }

    fn step(&mut self, head: &mut SegHead, grads: &mut [f64]) -> Result<()> {
        let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > DEFAULT_CLIP_NORM {
            let k = DEFAULT_CLIP_NORM / norm;
            grads.iter_mut().for_each(|g| *g *= k);
        }
        self.state.step(&mut head.params, grads, self.lr)
    }
}

fn choose_crop(targets: &MaskSet, size: usize, p_pos: f64, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let (w, h) = (targets.classes.width, targets.classes.height);
    let size_x = size.min(w);
    let size_y = size.min(h);
    let positives = targets.instance.iter().filter(|v| **v).count();
    if positives > 0 && rng.gen::<f64>() < p_pos {
        let pick = rng.gen_range(0..positives);
        let p = targets.instance.iter().enumerate().filter(|(_, v)| **v).nth(pick).map(|(p, _)| p).unwrap();
        let (px, py) = (p % w, p / w);
        let jx = rng.gen_range(0..size_x);
        let jy = rng.gen_range(0..size_y);
        (px.saturating_sub(jx).min(w - size_x), py.saturating_sub(jy).min(h - size_y))
    } else {
        (rng.gen_range(0..=w - size_x), rng.gen_range(0..=h - size_y))
    }
}

fn check_targets(samples: &[BevSample], bev: &BevConfig) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("no training samples".into()));
    }
    for s in samples {
        if s.targets.classes.width != bev.resolution || s.targets.classes.height != bev.resolution {
            return Err(Error::ShapeMismatch("BEV targets do not match the BEV resolution".into()));
        }
        if s.targets.classes.channels != NUM_CLASSES {
            return Err(Error::ShapeMismatch("BEV targets must have one channel per class".into()));
        }
    }
    Ok(())
}

/// Trains the head on frozen BEV renders of every sample. Returns the loss
/// curve; any change to a sample's Gaussians is a hard error.
pub fn train_stage2(samples: &[BevSample], head: &mut SegHead, bev: &BevConfig, loss: &LossConfig, cfg: &TrainConfig) -> Result<Vec<BevRecord>> {
    check_targets(samples, bev)?;
    let before: Vec<u64> = samples.iter().map(|s| s.scene.checksum()).collect();
    let features: Vec<Map> = samples
        .iter()
        .map(|s| super::render_bev_features(&s.scene, bev).map(|o| o.feature))
        .collect::<Result<_>>()?;
    let mut opt = HeadOptimizer::new(head, cfg.head_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.stage2_iters);
    for it in 0..cfg.stage2_iters {
        let k = it % samples.len();
        let (x0, y0) = choose_crop(&samples[k].targets, cfg.crop, cfg.positive_crop_prob, &mut rng);
        let c = cfg.crop.min(bev.resolution);
        let input = features[k].crop(x0, y0, c, c);
        let targets = samples[k].targets.crop(x0, y0, c, c);
        let (pred, cache) = head.forward_cached(&input)?;
        let (parts, g) = bev_loss(&pred.logits, &pred.center, &pred.offset, &targets, loss)?;
        let rec = BevRecord::new(2, it, &parts, loss);
        guard(&rec)?;
        curve.push(rec);
        let grad = BevPrediction {
            logits: g.logits,
            center: g.center,
            offset: g.offset,
        };
        let (mut gp, _) = head.backward(&cache, &grad, false)?;
        opt.step(head, &mut gp)?;
        if it % 50 == 0 {
            info!("stage2 iter {it}: loss {:.5}", rec.total);
        }
    }
    for (s, b) in samples.iter().zip(before) {
        if s.scene.checksum() != b {
            return Err(Error::Invariant("stage 2 modified Gaussian parameters".into()));
        }
    }
    Ok(curve)
}

fn guard(rec: &BevRecord) -> Result<()> {
    if !rec.total.is_finite() || rec.total > 1e6 {
        return Err(Error::Divergence {
            iteration: rec.iteration,
            loss: rec.total,
        });
    }
    Ok(())
}

/// Joint fine-tuning: BEV loss gradients flow through the head into the BEV
/// render and on to every raw Gaussian parameter of the sample scenes.
pub fn train_stage3_joint(
    samples: &mut [BevSample],
    head: &mut SegHead,
    bev: &BevConfig,
    loss: &LossConfig,
    cfg: &TrainConfig,
    freeze_head: bool,
) -> Result<Vec<BevRecord>> {
    check_targets(samples, bev)?;
    let cam = make_bev_camera(bev)?;
    let mut head_opt = HeadOptimizer::new(head, cfg.head_lr * cfg.stage3_lr_scale);
    let lr = cfg.lr.scaled(cfg.stage3_lr_scale);
    let mut scene_opts: Vec<SceneOptimizer> = samples.iter().map(|s| SceneOptimizer::new(&s.scene, &lr, &[])).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0003);
    let mut curve = Vec::with_capacity(cfg.stage3_iters);
    for it in 0..cfg.stage3_iters {
        let k = it % samples.len();
        let (x0, y0) = choose_crop(&samples[k].targets, cfg.crop, cfg.positive_crop_prob, &mut rng);
        let c = cfg.crop.min(bev.resolution);
        let (features, gaussian_grads) = {
            let frame = Frame::new(&samples[k].scene, &cam, RenderConfig::default())?;
            let out = frame.render();
            let step = bev_chain_step(head, &out.feature, &samples[k].targets, (x0, y0, c), loss)?;
            let rec = BevRecord::new(3, it, &step.parts, loss);
            guard(&rec)?;
            curve.push(rec);
            let up = RenderUpstream {
                feature: Some(step.feature_grad),
                ..Default::default()
            };
            (step.head_grads, frame.backward(&up)?)
        };
        let mut gp = features;
        if !freeze_head {
            head_opt.step(head, &mut gp)?;
        }
        scene_opts[k].step(&mut samples[k].scene, &gaussian_grads)?;
        if it % 50 == 0 {
            info!("stage3 iter {it}: loss {:.5}", curve[it].total);
        }
    }
    Ok(curve)
}

/// Loss and gradients of the head applied to one crop of a rendered BEV
/// feature map.
pub struct ChainStep {
    pub parts: BevLossParts,
    pub total: f64,
    pub head_grads: Vec<f64>,
    /// Gradient w.r.t. the full feature map (zero outside the crop).
    pub feature_grad: Map,
}

/// Runs head, loss and backward on the `(x0, y0, size)` crop of `features`.
pub fn bev_chain_step(
    head: &SegHead,
    features: &Map,
    targets: &MaskSet,
    (x0, y0, c): (usize, usize, usize),
    loss: &LossConfig,
) -> Result<ChainStep> {
    let input = features.crop(x0, y0, c, c);
    let tgt = targets.crop(x0, y0, c, c);
    let (pred, cache) = head.forward_cached(&input)?;
    let (parts, g) = bev_loss(&pred.logits, &pred.center, &pred.offset, &tgt, loss)?;
    let grad = BevPrediction {
        logits: g.logits,
        center: g.center,
        offset: g.offset,
    };
    let (head_grads, g_in) = head.backward(&cache, &grad, true)?;
    let mut feature_grad = Map::zeros(features.width, features.height, features.channels);
    feature_grad.paste(&g_in.expect("input gradient requested"), x0, y0);
    Ok(ChainStep {
        total: loss_bev(&parts, loss),
        parts,
        head_grads,
        feature_grad,
    })
}

/// The BEV objective as a function of a rendered frame, for gradient checks
/// through the full splat -> feature map -> head -> loss chain. Errors map to
/// a NaN value.
pub struct BevChainLoss<'a> {
    pub head: &'a SegHead,
    pub targets: &'a MaskSet,
    pub crop: (usize, usize, usize),
    pub loss: &'a LossConfig,
}

impl RenderLoss for BevChainLoss<'_> {
    fn value_and_grad(&self, out: &RenderOutput) -> (f64, RenderUpstream) {
        match bev_chain_step(self.head, &out.feature, self.targets, self.crop, self.loss) {
            Ok(step) => (
                step.total,
                RenderUpstream {
                    feature: Some(step.feature_grad),
                    ..Default::default()
                },
            ),
            Err(_) => (f64::NAN, RenderUpstream::default()),
        }
    }
}

/// Per-class IoU pooled over samples (sums of intersections over sums of unions).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IouReport {
    pub per_class: [f64; NUM_CLASSES],
    /// Classes whose pooled union was empty.
    pub undefined: [bool; NUM_CLASSES],
}

impl IouReport {
    /// Mean over classes with a defined IoU.
    pub fn mean(&self) -> f64 {
        let vals: Vec<f64> = (0..NUM_CLASSES).filter(|k| !self.undefined[*k]).map(|k| self.per_class[k]).collect();
        if vals.is_empty() {
            1.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    pub fn class(&self, c: BevClass) -> f64 {
        self.per_class[c.index()]
    }
}

/// Pools predicted masks against targets; `predictions[i]` pairs with `targets[i]`.
pub fn pooled_iou(predictions: &[BevPrediction], targets: &[&MaskSet]) -> Result<IouReport> {
    let mut inter = [0usize; NUM_CLASSES];
    let mut union = [0usize; NUM_CLASSES];
    for (p, t) in predictions.iter().zip(targets) {
        for k in 0..NUM_CLASSES {
            let (i, u) = iou_counts(&p.class_mask(k), &t.class_mask(k))?;
            inter[k] += i;
            union[k] += u;
        }
    }
    Ok(IouReport {
        per_class: std::array::from_fn(|k| if union[k] == 0 { 1.0 } else { inter[k] as f64 / union[k] as f64 }),
        undefined: std::array::from_fn(|k| union[k] == 0),
    })
}

pub fn predict(head: &SegHead, scene: &Scene, bev: &BevConfig) -> Result<BevPrediction> {
    let features = super::render_bev_features(scene, bev)?.feature;
    head.forward(&features)
}

pub fn evaluate_iou(head: &SegHead, samples: &[BevSample], bev: &BevConfig) -> Result<IouReport> {
    let preds: Vec<BevPrediction> = samples.iter().map(|s| predict(head, &s.scene, bev)).collect::<Result<_>>()?;
    let targets: Vec<&MaskSet> = samples.iter().map(|s| &s.targets).collect();
    pooled_iou(&preds, &targets)
}

/// One row of the height sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub height: f64,
    pub iou: IouReport,
}

/// Trains a fresh head (stage 2) per camera height on `train` and evaluates on
/// `heldout` at the same height. Rows are sorted by height.
pub fn height_sweep(
    train: &[BevSample],
    heldout: &[BevSample],
    heights: &[f64],
    bev: &BevConfig,
    loss: &LossConfig,
    cfg: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    let mut hs = heights.to_vec();
    hs.sort_by(f64::total_cmp);
    hs.dedup();
    let feature_dim = train.first().map_or(0, |s| s.scene.feature_dim);
    hs.into_iter()
        .map(|height| {
            let b = BevConfig { height, ..*bev };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut head = SegHead::init(feature_dim, cfg.hidden, NUM_CLASSES, &mut rng);
            train_stage2(train, &mut head, &b, loss, cfg)?;
            Ok(SweepRow {
                height,
                iou: evaluate_iou(&head, heldout, &b)?,
            })
        })
        .collect()
}
