//! Dense per-pixel buffers: rendered outputs, depth/feature maps and BEV targets.

use crate::error::{Error, Result};

/// Row-major `height × width × channels` buffer of `f64`, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Map {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Map::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Map {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "{}x{}x{} map needs {} values, got {}",
                width,
                height,
                channels,
                width * height * channels,
                data.len()
            )));
        }
        Ok(Map {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize, c: usize) -> &mut f64 {
        &mut self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn same_shape(&self, other: &Map) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_shape(&self, other: &Map, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    /// Copies the `w × h` window whose top-left pixel is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Map {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop out of bounds");
        let mut out = Map::zeros(w, h, self.channels);
        for y in 0..h {
            let src = ((y0 + y) * self.width + x0) * self.channels;
            let dst = y * w * self.channels;
            out.data[dst..dst + w * self.channels].copy_from_slice(&self.data[src..src + w * self.channels]);
        }
        out
    }

    /// Writes `patch` into this map with its top-left pixel at `(x0, y0)`.
    pub fn paste(&mut self, patch: &Map, x0: usize, y0: usize) {
        assert_eq!(patch.channels, self.channels);
        for y in 0..patch.height {
            let dst = ((y0 + y) * self.width + x0) * self.channels;
            let src = y * patch.width * patch.channels;
            self.data[dst..dst + patch.width * self.channels]
                .copy_from_slice(&patch.data[src..src + patch.width * patch.channels]);
        }
    }

    /// Single-channel map holding channel `c`.
    pub fn channel(&self, c: usize) -> Map {
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        Map {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Map) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Output of a forward render: `color = Σ wᵢcᵢ`, `feature = Σ wᵢfᵢ`,
/// `depth = Σ wᵢzᵢ` and `alpha = Σ wᵢ = 1 − T_final`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: Map,
    pub feature: Map,
    pub depth: Map,
    pub alpha: Map,
}

impl RenderOutput {
    pub fn zeros(width: usize, height: usize, feature_dim: usize) -> Self {
        RenderOutput {
            color: Map::zeros(width, height, 3),
            feature: Map::zeros(width, height, feature_dim),
            depth: Map::zeros(width, height, 1),
            alpha: Map::zeros(width, height, 1),
        }
    }

    /// Depth divided by accumulated alpha, valid where alpha exceeds `min_alpha`.
    pub fn normalized_depth(&self, min_alpha: f64) -> DepthMap {
        let n = self.depth.pixels();
        let mut depth = Map::zeros(self.depth.width, self.depth.height, 1);
        let mut valid = vec![false; n];
        for p in 0..n {
            let a = self.alpha.data[p];
            if a > min_alpha {
                depth.data[p] = self.depth.data[p] / a;
                valid[p] = true;
            }
        }
        DepthMap { depth, valid }
    }
}

/// Scalar depth in meters with a per-pixel validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub depth: Map,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn all_valid(depth: Map) -> Self {
        let valid = vec![true; depth.pixels()];
        DepthMap { depth, valid }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// BEV supervision targets.
///
/// `classes` holds one {0,1} channel per class, `centerness` values in [0,1],
/// `offset` two channels of BEV-pixel vectors pointing at the owning
/// instance's center, and `instance` marks pixels inside any instance.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub classes: Map,
    pub centerness: Map,
    pub offset: Map,
    pub instance: Vec<bool>,
}

impl MaskSet {
    pub fn empty(width: usize, height: usize, classes: usize) -> Self {
        MaskSet {
            classes: Map::zeros(width, height, classes),
            centerness: Map::zeros(width, height, 1),
            offset: Map::zeros(width, height, 2),
            instance: vec![false; width * height],
        }
    }

    pub fn class_mask(&self, class: usize) -> Vec<bool> {
        (0..self.classes.pixels())
            .map(|p| self.classes.pixel(p)[class] > 0.5)
            .collect()
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> MaskSet {
        let inst = Map::from_vec(
            self.classes.width,
            self.classes.height,
            1,
            self.instance.iter().map(|b| f64::from(u8::from(*b))).collect(),
        )
        .expect("instance mask shape");
        MaskSet {
            classes: self.classes.crop(x0, y0, w, h),
            centerness: self.centerness.crop(x0, y0, w, h),
            offset: self.offset.crop(x0, y0, w, h),
            instance: inst.crop(x0, y0, w, h).data.iter().map(|v| *v > 0.5).collect(),
        }
    }
}
