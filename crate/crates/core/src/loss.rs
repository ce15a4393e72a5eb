//! Supervision terms with analytic gradients with respect to their map inputs.
//!
//! Each per-view function returns a [`Term`]: the value, `∂value/∂pred`, and a
//! flag raised when the view had nothing to measure (no valid depth pixels,
//! zero-norm features, empty instance mask). Stack functions average views.

use serde::{Deserialize, Serialize};

use crate::buffer::{DepthMap, Map, MaskSet, RenderOutput};
use crate::error::{Error, Result};
use crate::gaussian::logistic;
use crate::grad::RenderUpstream;

pub const LOG_DEPTH_FLOOR: f64 = 1e-3;
/// Rendered depth counts as valid where accumulated alpha exceeds this.
pub const DEPTH_MIN_ALPHA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_l1: f64,
    pub lambda_silog: f64,
    pub lambda_feat: f64,
    pub lambda_center: f64,
    pub lambda_offset: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_l1: 0.2,
            lambda_silog: 0.8,
            lambda_feat: 0.1,
            lambda_center: 2.0,
            lambda_offset: 0.1,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_l1", self.lambda_l1),
            ("lambda_silog", self.lambda_silog),
            ("lambda_feat", self.lambda_feat),
            ("lambda_center", self.lambda_center),
            ("lambda_offset", self.lambda_offset),
            ("focal_gamma", self.focal_gamma),
        ];
        for (name, v) in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::InvalidConfig(format!("focal_alpha must lie in [0, 1], got {}", self.focal_alpha)));
        }
        Ok(())
    }
}

/// One loss evaluation on one view.
#[derive(Clone, Debug, PartialEq)]
pub struct Term {
    pub value: f64,
    pub grad: Map,
    pub flagged: bool,
}

fn shape(pred: &Map, target: &Map, what: &str) -> Result<()> {
    pred.check_shape(target, what)
}

pub fn mse(pred: &Map, target: &Map) -> Result<Term> {
    shape(pred, target, "mse")?;
    let n = pred.data.len().max(1) as f64;
    let mut grad = Map::zeros(pred.width, pred.height, pred.channels);
    let mut sum = 0.0;
    for ((g, p), t) in grad.data.iter_mut().zip(&pred.data).zip(&target.data) {
        let d = p - t;
        sum += d * d;
        *g = 2.0 * d / n;
    }
    Ok(Term {
        value: sum / n,
        grad,
        flagged: false,
    })
}

fn depth_mask(pred: &DepthMap, target: &DepthMap) -> Result<Vec<bool>> {
    shape(&pred.depth, &target.depth, "depth")?;
    if pred.depth.channels != 1 {
        return Err(Error::ShapeMismatch("depth maps must have one channel".into()));
    }
    Ok(pred.valid.iter().zip(&target.valid).map(|(a, b)| *a && *b).collect())
}

/// Mean `|D̂ − D|` over pixels valid in both maps.
pub fn depth_l1(pred: &DepthMap, target: &DepthMap) -> Result<Term> {
    let mask = depth_mask(pred, target)?;
    let n = mask.iter().filter(|v| **v).count();
    let mut grad = Map::zeros(pred.depth.width, pred.depth.height, 1);
    if n == 0 {
        return Ok(Term {
            value: 0.0,
            grad,
            flagged: true,
        });
    }
    let mut sum = 0.0;
    for p in (0..mask.len()).filter(|p| mask[*p]) {
        let d = pred.depth.data[p] - target.depth.data[p];
        sum += d.abs();
        grad.data[p] = sign(d) / n as f64;
    }
    Ok(Term {
        value: sum / n as f64,
        grad,
        flagged: false,
    })
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Scale-invariant log depth: `mean δ² − (mean δ)²` with `δ = log D̂ − log D`.
pub fn depth_silog(pred: &DepthMap, target: &DepthMap) -> Result<Term> {
    let mask = depth_mask(pred, target)?;
    let idx: Vec<usize> = (0..mask.len()).filter(|p| mask[*p]).collect();
    let mut grad = Map::zeros(pred.depth.width, pred.depth.height, 1);
    if idx.is_empty() {
        return Ok(Term {
            value: 0.0,
            grad,
            flagged: true,
        });
    }
    let n = idx.len() as f64;
    let delta: Vec<f64> = idx
        .iter()
        .map(|&p| pred.depth.data[p].max(LOG_DEPTH_FLOOR).ln() - target.depth.data[p].max(LOG_DEPTH_FLOOR).ln())
        .collect();
    let s: f64 = delta.iter().sum();
    let s2: f64 = delta.iter().map(|d| d * d).sum();
    let value = (s2 / n - (s / n) * (s / n)).max(0.0);
    for (&p, d) in idx.iter().zip(&delta) {
        let x = pred.depth.data[p];
        if x > LOG_DEPTH_FLOOR {
            grad.data[p] = (2.0 * d / n - 2.0 * s / (n * n)) / x;
        }
    }
    Ok(Term {
        value,
        grad,
        flagged: false,
    })
}

/// `1 − mean_p cos(F̂(p), F(p))`. Pixels where either vector is zero count as
/// `cos = 0` and raise the flag.
pub fn feature_cosine(pred: &Map, teacher: &Map) -> Result<Term> {
    shape(pred, teacher, "feature")?;
    let n = pred.pixels();
    let mut grad = Map::zeros(pred.width, pred.height, pred.channels);
    if n == 0 {
        return Ok(Term {
            value: 0.0,
            grad,
            flagged: true,
        });
    }
    let mut cos_sum = 0.0;
    let mut flagged = false;
    for p in 0..n {
        let a = pred.pixel(p);
        let b = teacher.pixel(p);
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            flagged = true;
            continue;
        }
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let cos = dot / (na * nb);
        cos_sum += cos;
        for ((g, x), y) in grad.pixel_mut(p).iter_mut().zip(a).zip(b) {
            *g = -(y / (na * nb) - cos * x / (na * na)) / n as f64;
        }
    }
    Ok(Term {
        value: 1.0 - cos_sum / n as f64,
        grad,
        flagged,
    })
}

/// Sigmoid focal loss averaged over pixels and classes. `alpha = None`
/// weights both polarities by 1.
pub fn focal(logits: &Map, targets: &Map, gamma: f64, alpha: Option<f64>) -> Result<Term> {
    shape(logits, targets, "focal")?;
    let n = logits.data.len().max(1) as f64;
    let mut grad = Map::zeros(logits.width, logits.height, logits.channels);
    let mut sum = 0.0;
    for ((g, &z), &y) in grad.data.iter_mut().zip(&logits.data).zip(&targets.data) {
        let positive = y > 0.5;
        let (zt, sgn) = if positive { (z, 1.0) } else { (-z, -1.0) };
        let at = match alpha {
            Some(a) if positive => a,
            Some(a) => 1.0 - a,
            None => 1.0,
        };
        let pt = logistic(zt);
        let one_minus = logistic(-zt);
        // log σ(z) = −softplus(−z)
        let log_pt = -softplus(-zt);
        let mod_ = one_minus.powf(gamma);
        sum += -at * mod_ * log_pt;
        *g = sgn * at * mod_ * (gamma * pt * log_pt - one_minus) / n;
    }
    Ok(Term {
        value: sum / n,
        grad,
        flagged: false,
    })
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn center_l2(pred: &Map, target: &Map) -> Result<Term> {
    mse(pred, target)
}

/// Mean absolute offset error over both channels of pixels inside an instance.
pub fn offset_l1(pred: &Map, target: &Map, mask: &[bool]) -> Result<Term> {
    shape(pred, target, "offset")?;
    if mask.len() != pred.pixels() {
        return Err(Error::ShapeMismatch("offset mask size".into()));
    }
    let mut grad = Map::zeros(pred.width, pred.height, pred.channels);
    let n = mask.iter().filter(|v| **v).count() * pred.channels;
    if n == 0 {
        return Ok(Term {
            value: 0.0,
            grad,
            flagged: true,
        });
    }
    let mut sum = 0.0;
    for p in (0..mask.len()).filter(|p| mask[*p]) {
        for ch in 0..pred.channels {
            let k = p * pred.channels + ch;
            let d = pred.data[k] - target.data[k];
            sum += d.abs();
            grad.data[k] = sign(d) / n as f64;
        }
    }
    Ok(Term {
        value: sum / n as f64,
        grad,
        flagged: false,
    })
}

fn stack_mean(terms: Vec<Term>) -> (f64, usize) {
    let k = terms.len().max(1) as f64;
    let flagged = terms.iter().filter(|t| t.flagged).count();
    (terms.iter().map(|t| t.value).sum::<f64>() / k, flagged)
}

fn zip_views<A, B, F>(a: &[A], b: &[B], f: F) -> Result<Vec<Term>>
where
    F: Fn(&A, &B) -> Result<Term>,
{
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{} predicted views vs {} references", a.len(), b.len())));
    }
    a.iter().zip(b).map(|(x, y)| f(x, y)).collect()
}

/// Mean over views of per-view MSE.
pub fn loss_render_mse(rendered: &[Map], reference: &[Map]) -> Result<f64> {
    Ok(stack_mean(zip_views(rendered, reference, mse)?).0)
}

/// Mean over views of the masked depth L1; the count is how many views had no valid pixels.
pub fn loss_depth_l1(pred: &[DepthMap], reference: &[DepthMap]) -> Result<(f64, usize)> {
    Ok(stack_mean(zip_views(pred, reference, depth_l1)?))
}

pub fn loss_depth_silog(pred: &[DepthMap], reference: &[DepthMap]) -> Result<(f64, usize)> {
    Ok(stack_mean(zip_views(pred, reference, depth_silog)?))
}

pub fn loss_feature_cosine(pred: &[Map], teacher: &[Map]) -> Result<(f64, usize)> {
    Ok(stack_mean(zip_views(pred, teacher, feature_cosine)?))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct RenderLossParts {
    pub render: f64,
    pub depth_l1: f64,
    pub silog: f64,
    pub feature: f64,
}

impl RenderLossParts {
    pub fn add_scaled(&mut self, o: &RenderLossParts, k: f64) {
        self.render += k * o.render;
        self.depth_l1 += k * o.depth_l1;
        self.silog += k * o.silog;
        self.feature += k * o.feature;
    }
}

pub fn loss_total(parts: &RenderLossParts, cfg: &LossConfig) -> f64 {
    parts.render + cfg.lambda_l1 * parts.depth_l1 + cfg.lambda_silog * parts.silog + cfg.lambda_feat * parts.feature
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct BevLossParts {
    pub focal: f64,
    pub center: f64,
    pub offset: f64,
}

pub fn loss_bev(parts: &BevLossParts, cfg: &LossConfig) -> f64 {
    parts.focal + cfg.lambda_center * parts.center + cfg.lambda_offset * parts.offset
}

/// Gradients of the weighted BEV loss with respect to each head output.
#[derive(Clone, Debug, PartialEq)]
pub struct BevLossGrad {
    pub logits: Map,
    pub center: Map,
    pub offset: Map,
}

/// Focal + centerness + offset terms against `targets`, with gradients
/// already scaled by the loss weights.
pub fn bev_loss(logits: &Map, center: &Map, offset: &Map, targets: &MaskSet, cfg: &LossConfig) -> Result<(BevLossParts, BevLossGrad)> {
    let f = focal(logits, &targets.classes, cfg.focal_gamma, Some(cfg.focal_alpha))?;
    let mut c = center_l2(center, &targets.centerness)?;
    let mut o = offset_l1(offset, &targets.offset, &targets.instance)?;
    c.grad.scale(cfg.lambda_center);
    o.grad.scale(cfg.lambda_offset);
    Ok((
        BevLossParts {
            focal: f.value,
            center: c.value,
            offset: o.value,
        },
        BevLossGrad {
            logits: f.grad,
            center: c.grad,
            offset: o.grad,
        },
    ))
}

/// Supervision for one rendered view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewTarget {
    pub color: Map,
    pub depth: Option<DepthMap>,
    pub feature: Option<Map>,
}

/// Weighted render loss of one view and its gradient with respect to the render.
///
/// Depth terms use alpha-normalized depth `D/A` on pixels with `A > 0.5`, so
/// their gradient reaches both the depth and the alpha buffers.
pub fn render_view_loss(out: &RenderOutput, target: &ViewTarget, cfg: &LossConfig) -> Result<(RenderLossParts, RenderUpstream)> {
    let mut parts = RenderLossParts::default();
    let mut up = RenderUpstream::default();
    let color = mse(&out.color, &target.color)?;
    parts.render = color.value;
    up.color = Some(color.grad);

    if let Some(reference) = &target.depth {
        let pred = out.normalized_depth(DEPTH_MIN_ALPHA);
        let l1 = depth_l1(&pred, reference)?;
        let si = depth_silog(&pred, reference)?;
        parts.depth_l1 = l1.value;
        parts.silog = si.value;
        let mut g_depth = Map::zeros(out.depth.width, out.depth.height, 1);
        let mut g_alpha = Map::zeros(out.depth.width, out.depth.height, 1);
        for p in 0..pred.valid.len() {
            if !pred.valid[p] {
                continue;
            }
            let g = cfg.lambda_l1 * l1.grad.data[p] + cfg.lambda_silog * si.grad.data[p];
            if g != 0.0 {
                let a = out.alpha.data[p];
                g_depth.data[p] = g / a;
                g_alpha.data[p] = -g * out.depth.data[p] / (a * a);
            }
        }
        up.depth = Some(g_depth);
        up.alpha = Some(g_alpha);
    }
    if let Some(teacher) = &target.feature {
        let f = feature_cosine(&out.feature, teacher)?;
        parts.feature = f.value;
        let mut g = f.grad;
        g.scale(cfg.lambda_feat);
        up.feature = Some(g);
    }
    Ok((parts, up))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(w: usize, h: usize, c: usize, data: Vec<f64>) -> Map {
        Map::from_vec(w, h, c, data).unwrap()
    }

    fn depth(values: Vec<f64>) -> DepthMap {
        DepthMap::all_valid(map(values.len(), 1, 1, values))
    }

    /// Central differences of `f` at `x` along every coordinate.
    fn numeric_grad(x: &Map, f: impl Fn(&Map) -> f64) -> Vec<f64> {
        let eps = 1e-6;
        (0..x.data.len())
            .map(|k| {
                let mut a = x.clone();
                let mut b = x.clone();
                a.data[k] += eps;
                b.data[k] -= eps;
                (f(&a) - f(&b)) / (2.0 * eps)
            })
            .collect()
    }

    fn check_grad(x: &Map, analytic: &Map, f: impl Fn(&Map) -> f64) {
        for (a, n) in analytic.data.iter().zip(numeric_grad(x, f)) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            assert!(rel < 1e-5, "analytic {a} numeric {n}");
        }
    }

    #[test]
    fn mse_examples() {
        let a = map(2, 2, 3, vec![0.0; 12]);
        assert_eq!(mse(&a, &a).unwrap().value, 0.0);
        assert_eq!(mse(&a, &map(2, 2, 3, vec![1.0; 12])).unwrap().value, 1.0);
        let r = [map(2, 1, 1, vec![0.0; 2]), map(2, 1, 1, vec![0.0; 2])];
        let p = [map(2, 1, 1, vec![0.2f64.sqrt(); 2]), map(2, 1, 1, vec![0.4f64.sqrt(); 2])];
        assert_close!(loss_render_mse(&p, &r).unwrap(), 0.3, 1e-15);
        assert!(mse(&a, &map(3, 2, 2, vec![0.0; 12])).is_err());
    }

    #[test]
    fn depth_l1_examples() {
        let r = depth(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(depth_l1(&r, &r).unwrap().value, 0.0);
        assert_eq!(depth_l1(&depth(vec![3.0, 4.0, 5.0, 6.0]), &r).unwrap().value, 2.0);
        assert_eq!(depth_l1(&depth(vec![2.0, 3.0, 3.0, 4.0]), &r).unwrap().value, 0.5);
        let mut empty = r.clone();
        empty.valid = vec![false; 4];
        let t = depth_l1(&empty, &r).unwrap();
        assert!(t.flagged && t.value == 0.0);
        let (v, flagged) = loss_depth_l1(&[empty, depth(vec![3.0, 4.0, 5.0, 6.0])], &[r.clone(), r]).unwrap();
        assert_eq!((v, flagged), (1.0, 1));
    }

    #[test]
    fn silog_examples() {
        let r = depth(vec![1.0, 2.0, 5.0]);
        assert_eq!(depth_silog(&r, &r).unwrap().value, 0.0);
        assert!(depth_silog(&depth(vec![3.0, 6.0, 15.0]), &r).unwrap().value < 1e-15);
        let two = depth_silog(&depth(vec![1.0, 2.0]), &depth(vec![1.0, 1.0])).unwrap().value;
        let ln2 = 2f64.ln();
        assert_close!(two, ln2 * ln2 / 2.0 - ln2 * ln2 / 4.0, 1e-15);
        assert_close!(two, 0.1201, 1e-4);
    }

    #[test]
    fn silog_clamps_nonpositive_depth() {
        let t = depth_silog(&depth(vec![0.0, 1.0]), &depth(vec![1.0, 1.0])).unwrap();
        assert!(t.value.is_finite());
        assert_eq!(t.grad.data[0], 0.0);
    }

    #[test]
    fn cosine_examples() {
        let a = map(2, 1, 2, vec![1.0, 0.0, 0.3, 0.4]);
        assert!(feature_cosine(&a, &a).unwrap().value.abs() < 1e-15);
        let orth = map(2, 1, 2, vec![0.0, 2.0, -0.4, 0.3]);
        assert!((feature_cosine(&a, &orth).unwrap().value - 1.0).abs() < 1e-15);
        let neg = map(2, 1, 2, vec![-1.0, 0.0, -0.3, -0.4]);
        assert!((feature_cosine(&neg, &a).unwrap().value - 2.0).abs() < 1e-15);
        let zero = map(2, 1, 2, vec![0.0, 0.0, 0.3, 0.4]);
        let t = feature_cosine(&zero, &a).unwrap();
        assert!(t.flagged);
        assert!((t.value - 0.5).abs() < 1e-15);
        assert!(feature_cosine(&a, &map(1, 1, 4, vec![0.0; 4])).is_err());
    }

    #[test]
    fn focal_examples() {
        let pos = map(1, 1, 1, vec![1.0]);
        let zero = map(1, 1, 1, vec![0.0]);
        let ce = focal(&zero, &pos, 0.0, None).unwrap().value;
        assert_close!(ce, 2f64.ln(), 1e-15);
        let f = focal(&zero, &pos, 2.0, Some(0.25)).unwrap().value;
        assert_close!(f, 0.25 * 0.25 * 2f64.ln(), 1e-15);
        assert_close!(f, 0.04332, 1e-5);
        let big = focal(&map(1, 1, 1, vec![60.0]), &pos, 2.0, Some(0.25)).unwrap().value;
        assert!(big < 1e-30);
        // monotone toward the fixed point
        let mut last = f64::INFINITY;
        for z in [-4.0, -1.0, 0.0, 1.0, 3.0, 8.0] {
            let v = focal(&map(1, 1, 1, vec![z]), &pos, 2.0, Some(0.25)).unwrap().value;
            assert!(v < last);
            last = v;
        }
        let neg = map(1, 1, 1, vec![0.0]);
        let vneg = focal(&map(1, 1, 1, vec![0.0]), &neg, 2.0, Some(0.25)).unwrap().value;
        assert_close!(vneg, 0.75 * 0.25 * 2f64.ln(), 1e-15);
    }

    #[test]
    fn focal_is_stable_for_huge_logits() {
        let t = focal(&map(2, 1, 1, vec![-800.0, 800.0]), &map(2, 1, 1, vec![1.0, 0.0]), 2.0, Some(0.25)).unwrap();
        assert!(t.value.is_finite() && t.grad.is_finite());
        assert!(t.value > 100.0);
    }

    #[test]
    fn bev_terms_examples() {
        let t = map(3, 1, 1, vec![0.2, 0.5, 0.9]);
        assert_eq!(center_l2(&t, &t).unwrap().value, 0.0);
        let p = map(3, 1, 1, t.data.iter().map(|v| v + 0.1).collect());
        assert_close!(center_l2(&p, &t).unwrap().value, 0.01, 1e-15);
        let off = map(2, 1, 2, vec![1.0, -1.0, 5.0, 5.0]);
        let tgt = map(2, 1, 2, vec![0.0, 0.0, 0.0, 0.0]);
        assert_eq!(offset_l1(&off, &tgt, &[true, false]).unwrap().value, 1.0);
        assert!(offset_l1(&off, &tgt, &[false, false]).unwrap().flagged);
        let parts = BevLossParts {
            focal: 1.0,
            center: 1.0,
            offset: 1.0,
        };
        assert_close!(loss_bev(&parts, &LossConfig::default()), 3.1, 1e-15);
        assert_eq!(loss_bev(&BevLossParts::default(), &LossConfig::default()), 0.0);
    }

    #[test]
    fn total_examples() {
        let cfg = LossConfig::default();
        let ones = RenderLossParts {
            render: 1.0,
            depth_l1: 1.0,
            silog: 1.0,
            feature: 1.0,
        };
        assert_close!(loss_total(&ones, &cfg), 2.1, 1e-15);
        assert_eq!(loss_total(&RenderLossParts::default(), &cfg), 0.0);
        let zero = LossConfig {
            lambda_l1: 0.0,
            lambda_silog: 0.0,
            lambda_feat: 0.0,
            ..cfg
        };
        assert_eq!(loss_total(&RenderLossParts { render: 0.7, ..ones }, &zero), 0.7);
        assert!(LossConfig { lambda_l1: -1.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = map(3, 2, 2, vec![0.3, -0.2, 1.1, 0.5, -0.7, 0.25, 0.9, 0.05, -0.4, 0.6, 0.35, -1.2]);
        let y = map(3, 2, 2, vec![0.1, 0.4, -0.5, 0.2, 0.3, 0.3, -0.6, 0.8, 0.2, 0.1, 0.9, -0.3]);
        check_grad(&x, &mse(&x, &y).unwrap().grad, |m| mse(m, &y).unwrap().value);
        check_grad(&x, &feature_cosine(&x, &y).unwrap().grad, |m| feature_cosine(m, &y).unwrap().value);
        check_grad(&x, &focal(&x, &y.clone(), 2.0, Some(0.25)).unwrap().grad, |m| {
            focal(m, &y, 2.0, Some(0.25)).unwrap().value
        });
        let mask = [true, false, true, true, false, true];
        check_grad(&x, &offset_l1(&x, &y, &mask).unwrap().grad, |m| offset_l1(m, &y, &mask).unwrap().value);

        let d = map(6, 1, 1, vec![1.5, 2.0, 7.0, 3.3, 0.8, 4.0]);
        let r = DepthMap {
            depth: map(6, 1, 1, vec![1.0, 2.5, 6.0, 3.0, 1.0, 5.0]),
            valid: vec![true, true, false, true, true, true],
        };
        let wrap = |m: &Map| DepthMap::all_valid(m.clone());
        check_grad(&d, &depth_l1(&wrap(&d), &r).unwrap().grad, |m| depth_l1(&wrap(m), &r).unwrap().value);
        check_grad(&d, &depth_silog(&wrap(&d), &r).unwrap().grad, |m| depth_silog(&wrap(m), &r).unwrap().value);
    }

    #[test]
    fn render_view_loss_routes_depth_through_alpha() {
        let mut out = RenderOutput::zeros(3, 1, 2);
        out.color.data = vec![0.2, 0.3, 0.4, 0.5, 0.5, 0.5, 0.9, 0.1, 0.0];
        out.feature.data = vec![0.3, 0.1, -0.2, 0.5, 0.6, 0.6];
        out.alpha.data = vec![0.9, 0.7, 0.3];
        out.depth.data = vec![4.5, 2.8, 0.6];
        let target = ViewTarget {
            color: map(3, 1, 3, vec![0.1; 9]),
            depth: Some(depth(vec![5.5, 3.0, 2.0])),
            feature: Some(map(3, 1, 2, vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8])),
        };
        let cfg = LossConfig::default();
        let value = |o: &RenderOutput| loss_total(&render_view_loss(o, &target, &cfg).unwrap().0, &cfg);
        let (_, up) = render_view_loss(&out, &target, &cfg).unwrap();
        let eps = 1e-7;
        let probe = |pick: fn(&mut RenderOutput) -> &mut Vec<f64>, grad: &Map| {
            for k in 0..grad.data.len() {
                let mut a = out.clone();
                let mut b = out.clone();
                pick(&mut a)[k] += eps;
                pick(&mut b)[k] -= eps;
                let n = (value(&a) - value(&b)) / (2.0 * eps);
                let g = grad.data[k];
                assert!((g - n).abs() <= 1e-6 * g.abs().max(n.abs()).max(1e-3), "{g} vs {n}");
            }
        };
        probe(|o| &mut o.depth.data, up.depth.as_ref().unwrap());
        probe(|o| &mut o.alpha.data, up.alpha.as_ref().unwrap());
        probe(|o| &mut o.color.data, up.color.as_ref().unwrap());
        probe(|o| &mut o.feature.data, up.feature.as_ref().unwrap());
    }

    proptest! {
        #[test]
        fn silog_is_scale_invariant(values in prop::collection::vec(0.1f64..50.0, 2..20), refs in prop::collection::vec(0.1f64..50.0, 20), k in 0.01f64..100.0) {
            let n = values.len();
            let r = depth(refs[..n].to_vec());
            let base = depth_silog(&depth(values.clone()), &r).unwrap().value;
            let scaled = depth_silog(&depth(values.iter().map(|v| v * k).collect()), &r).unwrap().value;
            prop_assert!((base - scaled).abs() < 1e-10);
            prop_assert!(base >= 0.0);
        }

        #[test]
        fn cosine_is_invariant_to_positive_pixel_scaling(
            a in prop::collection::vec(-2.0f64..2.0, 12),
            b in prop::collection::vec(-2.0f64..2.0, 12),
            s in prop::collection::vec(0.01f64..100.0, 4),
        ) {
            let pa = map(4, 1, 3, a.clone());
            let pb = map(4, 1, 3, b);
            let base = feature_cosine(&pa, &pb).unwrap().value;
            let scaled: Vec<f64> = a.iter().enumerate().map(|(k, v)| v * s[k / 3]).collect();
            let v = feature_cosine(&map(4, 1, 3, scaled), &pb).unwrap().value;
            prop_assert!((base - v).abs() < 1e-10);
            prop_assert!((0.0..=2.0 + 1e-12).contains(&base));
        }

        #[test]
        fn losses_are_nonnegative(p in prop::collection::vec(-3.0f64..3.0, 8), t in prop::collection::vec(0.0f64..1.0, 8)) {
            let pm = map(4, 2, 1, p);
            let tm = map(4, 2, 1, t.iter().map(|v| v.round()).collect());
            prop_assert!(mse(&pm, &tm).unwrap().value >= 0.0);
            prop_assert!(focal(&pm, &tm, 2.0, Some(0.25)).unwrap().value >= 0.0);
            prop_assert!(offset_l1(&map(2, 2, 2, pm.data.clone()), &map(2, 2, 2, tm.data.clone()), &[true; 4]).unwrap().value >= 0.0);
        }
    }
}
