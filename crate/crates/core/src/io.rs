//! File formats.
//!
//! Scene file (`.spb`), all integers and floats little-endian, no padding:
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 4 | magic `SPB1` |
//! | 4 | 4 | version `u32` = 1 |
//! | 8 | 8 | gaussian count `u64` |
//! | 16 | 4 | feature_dim `u32` |
//! | 20 | 4 | flags `u32`; bit 0 = degree-1 color coefficients |
//! | 24 | ... | records |
//!
//! Each record is `f32` values in the order mean (3), scale_log (3), rotation
//! `w x y z` (4), opacity_logit (1), color coefficients (3 per coefficient, 1
//! or 4 coefficients), feature (feature_dim).
//!
//! Map file (`.spm`): magic `SPM1`, width `u32`, height `u32`, channels `u32`,
//! then `width·height·channels` `f32` values, row-major, channels interleaved.
//! Invalid depth pixels are stored as NaN.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3, Vector4};
use serde::Serialize;

use crate::bev::train::{BevRecord, IouReport, SweepRow};
use crate::bev::{BevClass, SegHead, NUM_CLASSES};
use crate::buffer::{DepthMap, Map, MaskSet};
use crate::camera::{Camera, Pose, ProjectionMode};
use crate::error::{FormatError, Result};
use crate::gaussian::{Gaussian, Scene, ShDegree};
use crate::optim::LossRecord;
use crate::synth::{GroundTruthBundle, Instance, ViewData};

pub const SCENE_MAGIC: [u8; 4] = *b"SPB1";
pub const SCENE_VERSION: u32 = 1;
pub const SCENE_HEADER_LEN: usize = 24;
pub const MAP_MAGIC: [u8; 4] = *b"SPM1";
pub const MAP_HEADER_LEN: usize = 16;
const FLAG_SH1: u32 = 1;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    Ok(fs::read(path).map_err(io_err(path))?)
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().expect("4 bytes"))
}

fn f32_at(b: &[u8], off: usize) -> f64 {
    f32::from_le_bytes(b[off..off + 4].try_into().expect("4 bytes")) as f64
}

fn magic_at(b: &[u8]) -> [u8; 4] {
    b[..4].try_into().expect("4 bytes")
}

fn record_floats(feature_dim: usize, sh: ShDegree) -> usize {
    3 + 3 + 4 + 1 + 3 * sh.coeff_count() + feature_dim
}

pub fn encode_scene(scene: &Scene) -> Vec<u8> {
    let rec = record_floats(scene.feature_dim, scene.sh_degree);
    let mut out = Vec::with_capacity(SCENE_HEADER_LEN + 4 * rec * scene.len());
    out.extend_from_slice(&SCENE_MAGIC);
    out.extend_from_slice(&SCENE_VERSION.to_le_bytes());
    out.extend_from_slice(&(scene.len() as u64).to_le_bytes());
    out.extend_from_slice(&(scene.feature_dim as u32).to_le_bytes());
    let flags = if scene.sh_degree == ShDegree::One { FLAG_SH1 } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    let mut put = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    for g in &scene.gaussians {
        g.mean.iter().for_each(|v| put(*v));
        g.scale_log.iter().for_each(|v| put(*v));
        g.rotation.iter().for_each(|v| put(*v));
        put(g.opacity_logit);
        for k in 0..scene.sh_degree.coeff_count() {
            let c = g.color_coeffs.get(k).copied().unwrap_or([0.0; 3]);
            c.iter().for_each(|v| put(*v));
        }
        for k in 0..scene.feature_dim {
            put(g.feature.get(k).copied().unwrap_or(0.0));
        }
    }
    out
}

pub fn decode_scene(b: &[u8]) -> Result<Scene> {
    if b.len() < SCENE_HEADER_LEN {
        if b.len() >= 4 && magic_at(b) != SCENE_MAGIC {
            return Err(FormatError::BadMagic {
                expected: SCENE_MAGIC,
                found: magic_at(b),
            }
            .into());
        }
        return Err(FormatError::Truncated {
            expected: SCENE_HEADER_LEN,
            actual: b.len(),
        }
        .into());
    }
    if magic_at(b) != SCENE_MAGIC {
        return Err(FormatError::BadMagic {
            expected: SCENE_MAGIC,
            found: magic_at(b),
        }
        .into());
    }
    let version = u32_at(b, 4);
    if version != SCENE_VERSION {
        return Err(FormatError::UnsupportedVersion { offset: 4, version }.into());
    }
    let count = u64::from_le_bytes(b[8..16].try_into().expect("8 bytes"));
    let feature_dim = u32_at(b, 16) as usize;
    let flags = u32_at(b, 20);
    if flags & !FLAG_SH1 != 0 {
        return Err(FormatError::InvalidHeader {
            field: "flags",
            offset: 20,
            value: flags as u64,
        }
        .into());
    }
    let sh = if flags & FLAG_SH1 != 0 { ShDegree::One } else { ShDegree::Zero };
    let rec = 4 * record_floats(feature_dim, sh);
    let expected = usize::try_from(count)
        .ok()
        .and_then(|c| c.checked_mul(rec))
        .and_then(|n| n.checked_add(SCENE_HEADER_LEN))
        .ok_or(FormatError::InvalidHeader {
            field: "count",
            offset: 8,
            value: count,
        })?;
    if b.len() < expected {
        return Err(FormatError::Truncated { expected, actual: b.len() }.into());
    }
    if b.len() > expected {
        return Err(FormatError::CountMismatch { expected, actual: b.len() }.into());
    }
    let mut scene = Scene::new(feature_dim);
    scene.sh_degree = sh;
    scene.gaussians.reserve(count as usize);
    let mut off = SCENE_HEADER_LEN;
    let mut next = || {
        let v = f32_at(b, off);
        off += 4;
        v
    };
    for _ in 0..count {
        let mean = Vector3::new(next(), next(), next());
        let scale_log = Vector3::new(next(), next(), next());
        let rotation = Vector4::new(next(), next(), next(), next());
        let opacity_logit = next();
        let color_coeffs = (0..sh.coeff_count()).map(|_| [next(), next(), next()]).collect();
        let feature = (0..feature_dim).map(|_| next()).collect();
        scene.gaussians.push(Gaussian {
            mean,
            scale_log,
            rotation,
            opacity_logit,
            color_coeffs,
            feature,
        });
    }
    Ok(scene)
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    write_file(path, &encode_scene(scene))
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    decode_scene(&read_file(path)?)
}

pub fn encode_map(map: &Map) -> Result<Vec<u8>> {
    if map.channels == 0 {
        return Err(FormatError::ZeroChannels.into());
    }
    let mut out = Vec::with_capacity(MAP_HEADER_LEN + 4 * map.data.len());
    out.extend_from_slice(&MAP_MAGIC);
    for d in [map.width, map.height, map.channels] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &map.data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_map(b: &[u8]) -> Result<Map> {
    if b.len() >= 4 && magic_at(b) != MAP_MAGIC {
        return Err(FormatError::BadMagic {
            expected: MAP_MAGIC,
            found: magic_at(b),
        }
        .into());
    }
    if b.len() < MAP_HEADER_LEN {
        return Err(FormatError::Truncated {
            expected: MAP_HEADER_LEN,
            actual: b.len(),
        }
        .into());
    }
    let (w, h, c) = (u32_at(b, 4) as usize, u32_at(b, 8) as usize, u32_at(b, 12) as usize);
    if c == 0 {
        return Err(FormatError::InvalidHeader {
            field: "channels",
            offset: 12,
            value: 0,
        }
        .into());
    }
    let expected = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(c))
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(MAP_HEADER_LEN))
        .ok_or(FormatError::InvalidHeader {
            field: "width",
            offset: 4,
            value: w as u64,
        })?;
    if b.len() < expected {
        return Err(FormatError::Truncated { expected, actual: b.len() }.into());
    }
    if b.len() > expected {
        return Err(FormatError::CountMismatch { expected, actual: b.len() }.into());
    }
    let data = (0..w * h * c).map(|k| f32_at(b, MAP_HEADER_LEN + 4 * k)).collect();
    Map::from_vec(w, h, c, data)
}

pub fn save_map(map: &Map, path: &Path) -> Result<()> {
    write_file(path, &encode_map(map)?)
}

pub fn load_map(path: &Path) -> Result<Map> {
    decode_map(&read_file(path)?)
}

/// One-channel map with NaN at invalid pixels.
pub fn depth_to_map(d: &DepthMap) -> Map {
    let mut m = d.depth.clone();
    for (v, ok) in m.data.iter_mut().zip(&d.valid) {
        if !ok {
            *v = f64::NAN;
        }
    }
    m
}

pub fn map_to_depth(m: &Map) -> DepthMap {
    let valid: Vec<bool> = m.data.iter().map(|v| v.is_finite()).collect();
    let mut depth = m.clone();
    depth.data.iter_mut().for_each(|v| {
        if !v.is_finite() {
            *v = 0.0;
        }
    });
    DepthMap { depth, valid }
}

/// Packs a mask set into one map: class masks, centerness, offset x/y, instance flag.
pub fn masks_to_map(m: &MaskSet) -> Map {
    let k = m.classes.channels;
    let mut out = Map::zeros(m.classes.width, m.classes.height, k + 4);
    for p in 0..out.pixels() {
        let px = out.pixel_mut(p);
        px[..k].copy_from_slice(m.classes.pixel(p));
        px[k] = m.centerness.data[p];
        px[k + 1..k + 3].copy_from_slice(m.offset.pixel(p));
        px[k + 3] = f64::from(u8::from(m.instance[p]));
    }
    out
}

pub fn map_to_masks(m: &Map) -> Result<MaskSet> {
    if m.channels < 5 {
        return Err(crate::Error::ShapeMismatch(format!("mask map needs at least 5 channels, has {}", m.channels)));
    }
    let k = m.channels - 4;
    let mut out = MaskSet::empty(m.width, m.height, k);
    for p in 0..m.pixels() {
        let px = m.pixel(p);
        out.classes.pixel_mut(p).copy_from_slice(&px[..k]);
        out.centerness.data[p] = px[k];
        out.offset.pixel_mut(p).copy_from_slice(&px[k + 1..k + 3]);
        out.instance[p] = px[k + 3] > 0.5;
    }
    Ok(out)
}

/// Binary PPM (P6). One-channel maps are written as gray.
pub fn encode_ppm(map: &Map) -> Result<Vec<u8>> {
    if map.channels != 3 && map.channels != 1 {
        return Err(crate::Error::ShapeMismatch(format!("PPM needs 1 or 3 channels, got {}", map.channels)));
    }
    let mut out = format!("P6\n{} {}\n255\n", map.width, map.height).into_bytes();
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for p in 0..map.pixels() {
        let px = map.pixel(p);
        if map.channels == 3 {
            out.extend(px.iter().map(|v| q(*v)));
        } else {
            out.extend([q(px[0]); 3]);
        }
    }
    Ok(out)
}

pub fn save_image(map: &Map, path: &Path) -> Result<()> {
    write_file(path, &encode_ppm(map)?)
}

/// Binary PLY with the field names common Gaussian splat viewers expect.
/// For inspection only; features are appended as `feat_k`.
pub fn encode_ply(scene: &Scene) -> Vec<u8> {
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header += &format!("element vertex {}\n", scene.len());
    let mut props: Vec<String> = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"].iter().map(|s| s.to_string()).collect();
    let rest = 3 * (scene.sh_degree.coeff_count() - 1);
    props.extend((0..rest).map(|k| format!("f_rest_{k}")));
    props.push("opacity".into());
    props.extend((0..3).map(|k| format!("scale_{k}")));
    props.extend((0..4).map(|k| format!("rot_{k}")));
    props.extend((0..scene.feature_dim).map(|k| format!("feat_{k}")));
    for p in &props {
        header += &format!("property float {p}\n");
    }
    header += "end_header\n";
    let mut out = header.into_bytes();
    let mut put = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    for g in &scene.gaussians {
        g.mean.iter().for_each(|v| put(*v));
        (0..3).for_each(|_| put(0.0));
        g.color_coeffs[0].iter().for_each(|v| put(*v));
        // viewers store the remaining coefficients channel-major
        for ch in 0..3 {
            for c in g.color_coeffs.iter().skip(1) {
                put(c[ch]);
            }
        }
        put(g.opacity_logit);
        g.scale_log.iter().for_each(|v| put(*v));
        g.rotation.iter().for_each(|v| put(*v));
        g.feature.iter().for_each(|v| put(*v));
    }
    out
}

pub fn save_ply(scene: &Scene, path: &Path) -> Result<()> {
    write_file(path, &encode_ply(scene))
}

/// One camera per line:
/// `mode fx fy cx cy width height near far r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz`.
/// Values use Rust's shortest round-trip float formatting.
pub fn encode_cameras(cams: &[Camera]) -> String {
    let mut s = String::from("# mode fx fy cx cy width height near far R(row-major) t\n");
    for c in cams {
        let mode = match c.mode {
            ProjectionMode::Perspective => "perspective",
            ProjectionMode::Orthogonal => "orthogonal",
        };
        let mut fields = vec![mode.to_string()];
        fields.extend([c.fx, c.fy, c.cx, c.cy].iter().map(|v| format!("{v:?}")));
        fields.push(c.width.to_string());
        fields.push(c.height.to_string());
        fields.extend([c.near, c.far].iter().map(|v| format!("{v:?}")));
        for r in 0..3 {
            for k in 0..3 {
                fields.push(format!("{:?}", c.pose.rotation[(r, k)]));
            }
        }
        fields.extend(c.pose.translation.iter().map(|v| format!("{v:?}")));
        s += &fields.join(" ");
        s.push('\n');
    }
    s
}

pub fn decode_cameras(text: &str) -> Result<Vec<Camera>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| FormatError::Malformed { line: i + 1, reason };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 21 {
            return Err(bad(format!("expected 21 fields, found {}", f.len())).into());
        }
        let num = |k: usize| f[k].parse::<f64>().map_err(|e| bad(format!("field {}: {e}", k + 1)));
        let int = |k: usize| f[k].parse::<usize>().map_err(|e| bad(format!("field {}: {e}", k + 1)));
        let mut r = [0.0; 9];
        for (k, v) in r.iter_mut().enumerate() {
            *v = num(9 + k)?;
        }
        let pose = Pose {
            rotation: Matrix3::from_row_slice(&r),
            translation: Vector3::new(num(18)?, num(19)?, num(20)?),
        };
        let (fx, fy, cx, cy) = (num(1)?, num(2)?, num(3)?, num(4)?);
        let (w, h) = (int(5)?, int(6)?);
        let cam = match f[0] {
            "perspective" => Camera::perspective(fx, fy, cx, cy, pose, w, h, num(7)?, num(8)?)?,
            "orthogonal" => Camera::orthogonal(fx, fy, cx, cy, pose, w, h)?,
            other => return Err(bad(format!("unknown mode {other:?}")).into()),
        };
        out.push(cam);
    }
    Ok(out)
}

pub fn save_cameras(cams: &[Camera], path: &Path) -> Result<()> {
    write_file(path, encode_cameras(cams).as_bytes())
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    decode_cameras(&text)
}

/// `class center_x center_y x0 y0 x1 y1 ...` per line.
pub fn encode_instances(instances: &[Instance]) -> String {
    let mut s = String::new();
    for inst in instances {
        let mut f = vec![inst.class.name().to_string(), format!("{:?}", inst.center[0]), format!("{:?}", inst.center[1])];
        for p in &inst.footprint {
            f.push(format!("{:?}", p[0]));
            f.push(format!("{:?}", p[1]));
        }
        s += &f.join(" ");
        s.push('\n');
    }
    s
}

pub fn decode_instances(text: &str) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| FormatError::Malformed { line: i + 1, reason };
        let f: Vec<&str> = line.split_whitespace().collect();
        let class = BevClass::ALL
            .into_iter()
            .find(|c| c.name() == f[0])
            .ok_or_else(|| bad(format!("unknown class {:?}", f[0])))?;
        let nums: Vec<f64> = f[1..]
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(e.to_string()))?;
        if nums.len() < 2 || nums.len() % 2 != 0 {
            return Err(bad("odd number of coordinates".into()).into());
        }
        out.push(Instance {
            class,
            center: [nums[0], nums[1]],
            footprint: nums[2..].chunks_exact(2).map(|p| [p[0], p[1]]).collect(),
        });
    }
    Ok(out)
}

/// File names used inside a bundle directory.
pub struct BundleLayout {
    pub dir: PathBuf,
}

impl BundleLayout {
    pub fn new(dir: &Path) -> Self {
        BundleLayout { dir: dir.to_path_buf() }
    }

    pub fn scene(&self) -> PathBuf {
        self.dir.join("scene.spb")
    }

    pub fn cameras(&self) -> PathBuf {
        self.dir.join("cameras.txt")
    }

    pub fn view(&self, k: usize, what: &str, ext: &str) -> PathBuf {
        self.dir.join(format!("view{k:02}_{what}.{ext}"))
    }

    pub fn bev_targets(&self) -> PathBuf {
        self.dir.join("bev_targets.spm")
    }

    pub fn embeddings(&self) -> PathBuf {
        self.dir.join("embeddings.spm")
    }

    pub fn instances(&self) -> PathBuf {
        self.dir.join("instances.txt")
    }
}

/// Writes a scene and its supervision. Images go out both as PPM (for
/// viewing) and as SPM (exact values for fitting).
pub fn save_bundle(dir: &Path, scene: &Scene, gt: &GroundTruthBundle) -> Result<()> {
    let l = BundleLayout::new(dir);
    save_scene(scene, &l.scene())?;
    let cams: Vec<Camera> = gt.views.iter().map(|v| v.camera.clone()).collect();
    save_cameras(&cams, &l.cameras())?;
    for (k, v) in gt.views.iter().enumerate() {
        save_image(&v.image, &l.view(k, "image", "ppm"))?;
        save_map(&v.image, &l.view(k, "image", "spm"))?;
        save_map(&depth_to_map(&v.depth), &l.view(k, "depth", "spm"))?;
        save_map(&v.feature, &l.view(k, "feature", "spm"))?;
    }
    save_map(&masks_to_map(&gt.bev), &l.bev_targets())?;
    let dim = gt.embeddings.first().map_or(0, Vec::len);
    let emb = Map::from_vec(dim, gt.embeddings.len(), 1, gt.embeddings.concat())?;
    save_map(&emb, &l.embeddings())?;
    write_file(&l.instances(), encode_instances(&gt.instances).as_bytes())
}

pub fn load_bundle(dir: &Path) -> Result<(Scene, GroundTruthBundle)> {
    let l = BundleLayout::new(dir);
    let scene = load_scene(&l.scene())?;
    let cams = load_cameras(&l.cameras())?;
    let views = cams
        .into_iter()
        .enumerate()
        .map(|(k, camera)| {
            Ok(ViewData {
                camera,
                image: load_map(&l.view(k, "image", "spm"))?,
                depth: map_to_depth(&load_map(&l.view(k, "depth", "spm"))?),
                feature: load_map(&l.view(k, "feature", "spm"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let bev = map_to_masks(&load_map(&l.bev_targets())?)?;
    let emb = load_map(&l.embeddings())?;
    let embeddings = emb.data.chunks(emb.width.max(1)).map(<[f64]>::to_vec).collect();
    let text = fs::read_to_string(l.instances()).map_err(io_err(&l.instances()))?;
    Ok((
        scene,
        GroundTruthBundle {
            views,
            bev,
            instances: decode_instances(&text)?,
            embeddings,
            skipped_instances: 0,
        },
    ))
}

/// Head weights as a one-row map; the architecture comes from the run config.
pub fn save_head(head: &SegHead, path: &Path) -> Result<()> {
    save_map(&Map::from_vec(head.params.len(), 1, 1, head.params.clone())?, path)
}

pub fn load_head(path: &Path, in_channels: usize, hidden: usize) -> Result<SegHead> {
    let m = load_map(path)?;
    let mut head = SegHead::zeros(in_channels, hidden, NUM_CLASSES);
    if m.data.len() != head.params.len() {
        return Err(crate::Error::ShapeMismatch(format!(
            "head file has {} weights, architecture needs {}",
            m.data.len(),
            head.params.len()
        )));
    }
    head.params = m.data;
    Ok(head)
}

/// Serializes rows with a header line.
pub fn to_csv<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| crate::Error::Invariant(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| crate::Error::Invariant(format!("csv: {e}")))
}

pub fn loss_curve_csv(curve: &[LossRecord]) -> Result<Vec<u8>> {
    to_csv(curve)
}

/// One metrics row: a training step's losses or an evaluation's IoU.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub stage: String,
    pub iteration: usize,
    pub class: String,
    pub iou: Option<f64>,
    pub focal: Option<f64>,
    pub center: Option<f64>,
    pub offset: Option<f64>,
    pub total: Option<f64>,
}

impl MetricRow {
    pub fn from_record(r: &BevRecord) -> Self {
        MetricRow {
            stage: format!("stage{}", r.stage),
            iteration: r.iteration,
            class: "all".into(),
            iou: None,
            focal: Some(r.focal),
            center: Some(r.center),
            offset: Some(r.offset),
            total: Some(r.total),
        }
    }

    /// One row per class with a defined IoU, plus the mean.
    pub fn from_iou(stage: &str, iteration: usize, rep: &IouReport) -> Vec<Self> {
        let row = |class: &str, iou: f64| MetricRow {
            stage: stage.into(),
            iteration,
            class: class.into(),
            iou: Some(iou),
            focal: None,
            center: None,
            offset: None,
            total: None,
        };
        let mut out: Vec<MetricRow> = BevClass::ALL
            .iter()
            .filter(|c| !rep.undefined[c.index()])
            .map(|c| row(c.name(), rep.per_class[c.index()]))
            .collect();
        out.push(row("mean", rep.mean()));
        out
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> Result<Vec<u8>> {
    to_csv(rows)
}

#[derive(Serialize)]
struct SweepCsvRow<'a> {
    height: f64,
    class: &'a str,
    iou: Option<f64>,
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in rows {
        for c in BevClass::ALL {
            out.push(SweepCsvRow {
                height: r.height,
                class: c.name(),
                iou: (!r.iou.undefined[c.index()]).then_some(r.iou.per_class[c.index()]),
            });
        }
        out.push(SweepCsvRow {
            height: r.height,
            class: "mean",
            iou: Some(r.iou.mean()),
        });
    }
    to_csv(out)
}

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    write_file(path, bytes)
}

/// Appends without truncating; used for logs.
pub fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    writeln!(f, "{line}").map_err(io_err(path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_scene(n: usize, dim: usize, sh: ShDegree, seed: u64) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = Scene::new(dim);
        s.sh_degree = sh;
        for _ in 0..n {
            let mut r = || rng.gen_range(-5.0f64..5.0) as f32 as f64;
            s.gaussians.push(Gaussian {
                mean: Vector3::new(r(), r(), r()),
                scale_log: Vector3::new(r(), r(), r()),
                rotation: Vector4::new(r(), r(), r(), r()),
                opacity_logit: r(),
                color_coeffs: (0..sh.coeff_count()).map(|_| [r(), r(), r()]).collect(),
                feature: (0..dim).map(|_| r()).collect(),
            });
        }
        s
    }

    #[test]
    fn empty_scene_is_header_only() {
        let b = encode_scene(&Scene::new(16));
        assert_eq!(b.len(), SCENE_HEADER_LEN);
        assert_eq!(&b[..4], b"SPB1");
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 0);
        let s = decode_scene(&b).unwrap();
        assert!(s.is_empty());
        assert_eq!(s.feature_dim, 16);
    }

    #[test]
    fn thousand_gaussians_round_trip_bit_exact() {
        for sh in [ShDegree::Zero, ShDegree::One] {
            let s = random_scene(1000, 16, sh, 4);
            let b = encode_scene(&s);
            assert_eq!(b.len(), 24 + 1000 * 4 * record_floats(16, sh));
            let back = decode_scene(&b).unwrap();
            assert_eq!(back, s);
            assert_eq!(encode_scene(&back), b);
        }
    }

    #[test]
    fn structured_errors() {
        let b = encode_scene(&random_scene(3, 2, ShDegree::Zero, 1));
        match decode_scene(&b[..b.len() - 5]) {
            Err(crate::Error::Format(FormatError::Truncated { expected, actual })) => {
                assert_eq!((expected, actual), (b.len(), b.len() - 5));
            }
            other => panic!("{other:?}"),
        }
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode_scene(&bad), Err(crate::Error::Format(FormatError::BadMagic { .. }))));
        let mut v2 = b.clone();
        v2[4] = 2;
        assert!(matches!(
            decode_scene(&v2),
            Err(crate::Error::Format(FormatError::UnsupportedVersion { offset: 4, version: 2 }))
        ));
        let mut extra = b.clone();
        extra.extend([0u8; 4]);
        assert!(matches!(decode_scene(&extra), Err(crate::Error::Format(FormatError::CountMismatch { .. }))));
        let mut flags = b.clone();
        flags[20] = 6;
        assert!(matches!(decode_scene(&flags), Err(crate::Error::Format(FormatError::InvalidHeader { field: "flags", .. }))));
        assert!(matches!(decode_scene(&b[..10]), Err(crate::Error::Format(FormatError::Truncated { expected: 24, .. }))));
        let msg = decode_scene(&b[..b.len() - 5]).unwrap_err().to_string();
        assert!(msg.contains(&format!("{}", b.len() - 5)), "{msg}");
    }

    #[test]
    fn white_2x2_ppm() {
        let b = encode_ppm(&Map::filled(2, 2, 3, 1.0)).unwrap();
        let header = b"P6\n2 2\n255\n";
        assert_eq!(&b[..header.len()], header);
        assert_eq!(&b[header.len()..], &[0xFF; 12]);
        let clamp = encode_ppm(&Map::from_vec(1, 1, 3, vec![-1.0, 0.5, 7.0]).unwrap()).unwrap();
        assert_eq!(&clamp[clamp.len() - 3..], &[0, 128, 255]);
    }

    #[test]
    fn zero_channel_map_rejected() {
        let m = Map {
            width: 2,
            height: 2,
            channels: 0,
            data: vec![],
        };
        assert!(matches!(encode_map(&m), Err(crate::Error::Format(FormatError::ZeroChannels))));
        let mut b = encode_map(&Map::zeros(1, 1, 1)).unwrap();
        b[12] = 0;
        assert!(decode_map(&b).is_err());
    }

    #[test]
    fn depth_and_masks_round_trip() {
        let mut d = DepthMap::all_valid(Map::from_vec(3, 1, 1, vec![1.5, 2.0, 3.25]).unwrap());
        d.valid[1] = false;
        let back = map_to_depth(&decode_map(&encode_map(&depth_to_map(&d)).unwrap()).unwrap());
        assert_eq!(back.valid, d.valid);
        assert_eq!((back.depth.data[0], back.depth.data[2]), (1.5, 3.25));

        let mut m = MaskSet::empty(4, 3, 3);
        m.classes.data[5] = 1.0;
        m.centerness.data[2] = 0.75;
        m.offset.data[7] = -2.5;
        m.instance[1] = true;
        assert_eq!(map_to_masks(&decode_map(&encode_map(&masks_to_map(&m)).unwrap()).unwrap()).unwrap(), m);
    }

    #[test]
    fn cameras_and_instances_round_trip() {
        let pose = Pose::looking(Vector3::new(0.3, 0.1, 1.6), Vector3::new(1.0, 0.2, -0.4), -Vector3::z());
        let cams = vec![
            Camera::from_fov(1.2, pose, 224, 128, 1.0, 200.0).unwrap(),
            crate::bev::make_bev_camera(&Default::default()).unwrap(),
        ];
        assert_eq!(decode_cameras(&encode_cameras(&cams)).unwrap(), cams);
        assert!(matches!(
            decode_cameras("perspective 1 2 3"),
            Err(crate::Error::Format(FormatError::Malformed { line: 1, .. }))
        ));
        let inst = vec![Instance {
            class: BevClass::Pedestrian,
            footprint: vec![[0.1, 0.2], [1.0, 0.2], [0.5, 1.0 / 3.0]],
            center: [0.5, 0.3],
        }];
        assert_eq!(decode_instances(&encode_instances(&inst)).unwrap(), inst);
    }

    #[test]
    fn ply_header_and_size() {
        let s = random_scene(5, 2, ShDegree::One, 2);
        let b = encode_ply(&s);
        let text = String::from_utf8_lossy(&b);
        let end = text.find("end_header\n").unwrap() + "end_header\n".len();
        assert!(text.starts_with("ply\nformat binary_little_endian 1.0\nelement vertex 5\n"));
        assert!(text[..end].contains("property float f_rest_8\n"));
        let props = text[..end].matches("property float").count();
        assert_eq!(props, 3 + 3 + 3 + 9 + 1 + 3 + 4 + 2);
        assert_eq!(b.len() - end, 5 * 4 * props);
    }

    #[test]
    fn csv_columns() {
        let rep = IouReport {
            per_class: [0.5, 0.25, 1.0],
            undefined: [false, true, false],
        };
        let text = String::from_utf8(metrics_csv(&MetricRow::from_iou("eval", 0, &rep)).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "stage,iteration,class,iou,focal,center,offset,total");
        assert_eq!(lines[1], "eval,0,vehicle,0.5,,,,");
        assert_eq!(lines[2], "eval,0,lane,1.0,,,,");
        assert_eq!(lines[3], "eval,0,mean,0.75,,,,");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn map_round_trip(w in 1usize..6, h in 1usize..6, c in 1usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = (0..w * h * c).map(|_| (rng.gen::<f32>() * 100.0 - 50.0) as f64).collect();
            let m = Map::from_vec(w, h, c, data).unwrap();
            let b = encode_map(&m).unwrap();
            prop_assert_eq!(b.len(), 16 + 4 * w * h * c);
            prop_assert_eq!(decode_map(&b).unwrap(), m);
        }

        #[test]
        fn scene_round_trip(n in 0usize..20, dim in 0usize..5, sh1 in any::<bool>(), seed in any::<u64>()) {
            let s = random_scene(n, dim, if sh1 { ShDegree::One } else { ShDegree::Zero }, seed);
            prop_assert_eq!(decode_scene(&encode_scene(&s)).unwrap(), s);
        }
    }
}
