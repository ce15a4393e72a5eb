//! BEV encoder and segmentation head.
//!
//! `conv3×3(C→H) → SiLU → conv3×3(H→H) → SiLU → 1×1(H→K+3)`, zero padding,
//! HWC maps. Output channels are the K class logits, centerness, then the
//! two offset components. All weights live in one flat vector so a single
//! Adam state covers the head.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::buffer::Map;
use crate::error::{Error, Result};
use crate::gaussian::logistic;

pub const DEFAULT_HIDDEN: usize = 32;
/// Rows per gradient-reduction chunk; fixed so sums do not depend on thread count.
const ROW_CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct SegHead {
    pub in_channels: usize,
    pub hidden: usize,
    pub classes: usize,
    pub params: Vec<f64>,
}

/// Offsets of each tensor inside [`SegHead::params`].
#[derive(Clone, Copy, Debug)]
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BevPrediction {
    pub logits: Map,
    pub center: Map,
    pub offset: Map,
}

impl BevPrediction {
    pub fn is_finite(&self) -> bool {
        self.logits.is_finite() && self.center.is_finite() && self.offset.is_finite()
    }

    /// Binary mask of `class`, thresholded at logit 0.
    pub fn class_mask(&self, class: usize) -> Vec<bool> {
        (0..self.logits.pixels()).map(|p| self.logits.pixel(p)[class] > 0.0).collect()
    }
}

/// Activations kept from the forward pass for [`SegHead::backward`].
pub struct HeadCache {
    input: Map,
    z1: Map,
    a1: Map,
    z2: Map,
    a2: Map,
}

fn silu(z: f64) -> f64 {
    z * logistic(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = logistic(z);
    s * (1.0 + z * (1.0 - s))
}

impl SegHead {
    pub fn outputs(&self) -> usize {
        self.classes + 3
    }

    fn layout(&self) -> Layout {
        let (c, h, o) = (self.in_channels, self.hidden, self.outputs());
        let w1 = 0;
        let b1 = w1 + 9 * c * h;
        let w2 = b1 + h;
        let b2 = w2 + 9 * h * h;
        let w3 = b2 + h;
        let b3 = w3 + h * o;
        Layout {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            len: b3 + o,
        }
    }

    pub fn zeros(in_channels: usize, hidden: usize, classes: usize) -> Self {
        let mut head = SegHead {
            in_channels,
            hidden,
            classes,
            params: Vec::new(),
        };
        head.params = vec![0.0; head.layout().len];
        head
    }

    /// He-style random weights, zero biases except a negative class prior.
    pub fn init<R: Rng>(in_channels: usize, hidden: usize, classes: usize, rng: &mut R) -> Self {
        let mut head = SegHead::zeros(in_channels, hidden, classes);
        let l = head.layout();
        let fill = |params: &mut [f64], fan_in: usize, rng: &mut R| {
            let n = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            params.iter_mut().for_each(|w| *w = n.sample(rng));
        };
        fill(&mut head.params[l.w1..l.b1], 9 * in_channels, rng);
        fill(&mut head.params[l.w2..l.b2], 9 * hidden, rng);
        fill(&mut head.params[l.w3..l.b3], hidden, rng);
        for w in &mut head.params[l.w3..l.b3] {
            *w *= 0.1;
        }
        let prior = (0.1f64 / 0.9).ln();
        for k in 0..classes {
            head.params[l.b3 + k] = prior;
        }
        head
    }

    pub fn forward(&self, input: &Map) -> Result<BevPrediction> {
        Ok(self.forward_cached(input)?.0)
    }

    pub fn forward_cached(&self, input: &Map) -> Result<(BevPrediction, HeadCache)> {
        if input.channels != self.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "head expects {} input channels, got {}",
                self.in_channels, input.channels
            )));
        }
        let l = self.layout();
        let p = &self.params;
        let (c, h) = (self.in_channels, self.hidden);
        let z1 = conv3x3(input, &p[l.w1..l.b1], &p[l.b1..l.w2], c, h);
        let a1 = map_values(&z1, silu);
        let z2 = conv3x3(&a1, &p[l.w2..l.b2], &p[l.b2..l.w3], h, h);
        let a2 = map_values(&z2, silu);
        let out = conv1x1(&a2, &p[l.w3..l.b3], &p[l.b3..l.len], h, self.outputs());
        let pred = split_outputs(&out, self.classes);
        Ok((
            pred,
            HeadCache {
                input: input.clone(),
                z1,
                a1,
                z2,
                a2,
            },
        ))
    }

    /// Parameter gradients and, when `want_input` is set, the gradient with
    /// respect to the input feature map.
    pub fn backward(&self, cache: &HeadCache, grad: &BevPrediction, want_input: bool) -> Result<(Vec<f64>, Option<Map>)> {
        let l = self.layout();
        let p = &self.params;
        let (c, h, o) = (self.in_channels, self.hidden, self.outputs());
        let g_out = merge_outputs(grad, self.classes)?;
        if g_out.width != cache.a2.width || g_out.height != cache.a2.height {
            return Err(Error::ShapeMismatch("head gradient size differs from forward input".into()));
        }
        if !g_out.is_finite() {
            return Err(Error::NonFiniteGradient("head output"));
        }
        let mut grads = vec![0.0; l.len];

        // 1×1 layer
        let (gw3, gb3) = conv1x1_param_grad(&cache.a2, &g_out, h, o);
        grads[l.w3..l.b3].copy_from_slice(&gw3);
        grads[l.b3..l.len].copy_from_slice(&gb3);
        let mut g_a2 = conv1x1_input_grad(&g_out, &p[l.w3..l.b3], h, o);
        mul_in_place(&mut g_a2, &cache.z2, silu_grad);

        // second 3×3
        let (gw2, gb2) = conv3x3_param_grad(&cache.a1, &g_a2, h, h);
        grads[l.w2..l.b2].copy_from_slice(&gw2);
        grads[l.b2..l.w3].copy_from_slice(&gb2);
        let mut g_a1 = conv3x3_input_grad(&g_a2, &p[l.w2..l.b2], h, h);
        mul_in_place(&mut g_a1, &cache.z1, silu_grad);

        // first 3×3
        let (gw1, gb1) = conv3x3_param_grad(&cache.input, &g_a1, c, h);
        grads[l.w1..l.b1].copy_from_slice(&gw1);
        grads[l.b1..l.w2].copy_from_slice(&gb1);
        let g_in = want_input.then(|| conv3x3_input_grad(&g_a1, &p[l.w1..l.b1], c, h));
        Ok((grads, g_in))
    }
}

fn map_values(m: &Map, f: impl Fn(f64) -> f64 + Sync) -> Map {
    Map {
        width: m.width,
        height: m.height,
        channels: m.channels,
        data: m.data.par_iter().map(|v| f(*v)).collect(),
    }
}

fn mul_in_place(g: &mut Map, z: &Map, f: impl Fn(f64) -> f64 + Sync) {
    g.data.par_iter_mut().zip(&z.data).for_each(|(g, z)| *g *= f(*z));
}

/// `out[y,x,o] = b[o] + Σ in[y+ky−1, x+kx−1, i]·w[ky,kx,i,o]`, zero padded.
fn conv3x3(input: &Map, w: &[f64], b: &[f64], cin: usize, cout: usize) -> Map {
    let (width, height) = (input.width, input.height);
    let mut out = Map::zeros(width, height, cout);
    out.data.par_chunks_mut(width * cout).enumerate().for_each(|(y, row)| {
        for x in 0..width {
            let acc = &mut row[x * cout..(x + 1) * cout];
            acc.copy_from_slice(b);
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= height as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = x as isize + kx as isize - 1;
                    if sx < 0 || sx >= width as isize {
                        continue;
                    }
                    let src = input.pixel(sy as usize * width + sx as usize);
                    let wk = &w[(ky * 3 + kx) * cin * cout..(ky * 3 + kx + 1) * cin * cout];
                    for (i, &v) in src.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        for (a, wv) in acc.iter_mut().zip(&wk[i * cout..(i + 1) * cout]) {
                            *a += v * wv;
                        }
                    }
                }
            }
        }
    });
    out
}

fn conv3x3_param_grad(input: &Map, g: &Map, cin: usize, cout: usize) -> (Vec<f64>, Vec<f64>) {
    let (width, height) = (input.width, input.height);
    let chunks: Vec<(Vec<f64>, Vec<f64>)> = (0..height.div_ceil(ROW_CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut gw = vec![0.0; 9 * cin * cout];
            let mut gb = vec![0.0; cout];
            for y in chunk * ROW_CHUNK..((chunk + 1) * ROW_CHUNK).min(height) {
                for x in 0..width {
                    let go = g.pixel(y * width + x);
                    if go.iter().all(|v| *v == 0.0) {
                        continue;
                    }
                    gb.iter_mut().zip(go).for_each(|(a, b)| *a += b);
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= height as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = x as isize + kx as isize - 1;
                            if sx < 0 || sx >= width as isize {
                                continue;
                            }
                            let src = input.pixel(sy as usize * width + sx as usize);
                            let base = (ky * 3 + kx) * cin * cout;
                            for (i, &v) in src.iter().enumerate() {
                                if v == 0.0 {
                                    continue;
                                }
                                let row = &mut gw[base + i * cout..base + (i + 1) * cout];
                                row.iter_mut().zip(go).for_each(|(a, b)| *a += v * b);
                            }
                        }
                    }
                }
            }
            (gw, gb)
        })
        .collect();
    reduce_chunks(chunks, 9 * cin * cout, cout)
}

fn reduce_chunks(chunks: Vec<(Vec<f64>, Vec<f64>)>, nw: usize, nb: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gw = vec![0.0; nw];
    let mut gb = vec![0.0; nb];
    for (w, b) in chunks {
        gw.iter_mut().zip(&w).for_each(|(a, v)| *a += v);
        gb.iter_mut().zip(&b).for_each(|(a, v)| *a += v);
    }
    (gw, gb)
}

/// Gradient with respect to the input of [`conv3x3`], gathered per input pixel.
fn conv3x3_input_grad(g: &Map, w: &[f64], cin: usize, cout: usize) -> Map {
    let (width, height) = (g.width, g.height);
    let mut out = Map::zeros(width, height, cin);
    out.data.par_chunks_mut(width * cin).enumerate().for_each(|(y, row)| {
        for x in 0..width {
            let acc = &mut row[x * cin..(x + 1) * cin];
            // input (y, x) feeds output (y − ky + 1, x − kx + 1)
            for ky in 0..3 {
                let oy = y as isize - ky as isize + 1;
                if oy < 0 || oy >= height as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ox = x as isize - kx as isize + 1;
                    if ox < 0 || ox >= width as isize {
                        continue;
                    }
                    let go = g.pixel(oy as usize * width + ox as usize);
                    if go.iter().all(|v| *v == 0.0) {
                        continue;
                    }
                    let wk = &w[(ky * 3 + kx) * cin * cout..(ky * 3 + kx + 1) * cin * cout];
                    for (i, a) in acc.iter_mut().enumerate() {
                        *a += wk[i * cout..(i + 1) * cout].iter().zip(go).map(|(w, g)| w * g).sum::<f64>();
                    }
                }
            }
        }
    });
    out
}

fn conv1x1(input: &Map, w: &[f64], b: &[f64], cin: usize, cout: usize) -> Map {
    let mut out = Map::zeros(input.width, input.height, cout);
    out.data.par_chunks_mut(cout).enumerate().for_each(|(p, acc)| {
        acc.copy_from_slice(b);
        for (i, &v) in input.pixel(p).iter().enumerate() {
            for (a, wv) in acc.iter_mut().zip(&w[i * cout..(i + 1) * cout]) {
                *a += v * wv;
            }
        }
    });
    debug_assert_eq!(input.channels, cin);
    out
}

fn conv1x1_param_grad(input: &Map, g: &Map, cin: usize, cout: usize) -> (Vec<f64>, Vec<f64>) {
    let width = input.width;
    let chunks: Vec<(Vec<f64>, Vec<f64>)> = (0..input.height.div_ceil(ROW_CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut gw = vec![0.0; cin * cout];
            let mut gb = vec![0.0; cout];
            for y in chunk * ROW_CHUNK..((chunk + 1) * ROW_CHUNK).min(input.height) {
                for x in 0..width {
                    let p = y * width + x;
                    let go = g.pixel(p);
                    gb.iter_mut().zip(go).for_each(|(a, b)| *a += b);
                    for (i, &v) in input.pixel(p).iter().enumerate() {
                        gw[i * cout..(i + 1) * cout].iter_mut().zip(go).for_each(|(a, b)| *a += v * b);
                    }
                }
            }
            (gw, gb)
        })
        .collect();
    reduce_chunks(chunks, cin * cout, cout)
}

fn conv1x1_input_grad(g: &Map, w: &[f64], cin: usize, cout: usize) -> Map {
    let mut out = Map::zeros(g.width, g.height, cin);
    out.data.par_chunks_mut(cin).enumerate().for_each(|(p, acc)| {
        let go = g.pixel(p);
        for (i, a) in acc.iter_mut().enumerate() {
            *a = w[i * cout..(i + 1) * cout].iter().zip(go).map(|(w, g)| w * g).sum();
        }
    });
    out
}

fn split_outputs(out: &Map, k: usize) -> BevPrediction {
    let (w, h) = (out.width, out.height);
    let mut pred = BevPrediction {
        logits: Map::zeros(w, h, k),
        center: Map::zeros(w, h, 1),
        offset: Map::zeros(w, h, 2),
    };
    for p in 0..w * h {
        let src = out.pixel(p);
        pred.logits.pixel_mut(p).copy_from_slice(&src[..k]);
        pred.center.data[p] = src[k];
        pred.offset.pixel_mut(p).copy_from_slice(&src[k + 1..k + 3]);
    }
    pred
}

fn merge_outputs(pred: &BevPrediction, k: usize) -> Result<Map> {
    let (w, h) = (pred.logits.width, pred.logits.height);
    if pred.logits.channels != k || !pred.center.same_shape(&Map::zeros(w, h, 1)) || !pred.offset.same_shape(&Map::zeros(w, h, 2)) {
        return Err(Error::ShapeMismatch("malformed head gradient".into()));
    }
    let mut out = Map::zeros(w, h, k + 3);
    for p in 0..w * h {
        let dst = out.pixel_mut(p);
        dst[..k].copy_from_slice(pred.logits.pixel(p));
        dst[k] = pred.center.data[p];
        dst[k + 1..].copy_from_slice(pred.offset.pixel(p));
    }
    Ok(out)
}
