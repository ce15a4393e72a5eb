//! Pinned byte-level fixtures for the scene and map formats.
//!
//! Set `SPLATBEV_BLESS=1` to rewrite the fixtures after an intentional
//! format change.

use std::path::PathBuf;

use nalgebra::{Vector3, Vector4};
use splatbev_core::buffer::Map;
use splatbev_core::gaussian::{Gaussian, Scene, ShDegree};
use splatbev_core::io::{decode_map, decode_scene, encode_map, encode_ppm, encode_scene, SCENE_HEADER_LEN};

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn check_golden(name: &str, bytes: &[u8]) {
    let path = golden_path(name);
    if std::env::var_os("SPLATBEV_BLESS").is_some() {
        std::fs::write(&path, bytes).unwrap();
    }
    let pinned = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(pinned.len(), bytes.len(), "{name}: length");
    assert!(pinned == bytes, "{name}: bytes differ from pinned fixture");
}

/// Three Gaussians with f32-exact values, degree-1 color.
pub fn golden_scene() -> Scene {
    let mut scene = Scene::new(2);
    scene.sh_degree = ShDegree::One;
    for i in 0..3 {
        let t = i as f64;
        scene.gaussians.push(Gaussian {
            mean: Vector3::new(t, -0.5 * t, 2.0 + t),
            scale_log: Vector3::new(-1.0, -0.5, 0.25 * t),
            rotation: Vector4::new(1.0, 0.0, 0.5 * t, 0.0),
            opacity_logit: 0.75 - t,
            color_coeffs: (0..4).map(|k| [0.125 * k as f64, -0.25, t]).collect(),
            feature: vec![1.0, -t],
        });
    }
    scene
}

fn golden_map() -> Map {
    let data = (0..2 * 3 * 2).map(|i| i as f64 * 0.5 - 2.0).collect();
    Map::from_vec(2, 3, 2, data).unwrap()
}

#[test]
fn scene_matches_pinned_bytes() {
    let bytes = encode_scene(&golden_scene());
    check_golden("scene.spb", &bytes);
    let back = decode_scene(&std::fs::read(golden_path("scene.spb")).unwrap()).unwrap();
    assert_eq!(back, golden_scene());
}

#[test]
fn scene_header_fields() {
    let b = std::fs::read(golden_path("scene.spb")).unwrap();
    assert_eq!(&b[0..4], b"SPB1");
    assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
    assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 3);
    assert_eq!(u32::from_le_bytes(b[16..20].try_into().unwrap()), 2);
    // mean.x of the second record
    let rec = (b.len() - SCENE_HEADER_LEN) / 3;
    let off = SCENE_HEADER_LEN + rec;
    assert_eq!(f32::from_le_bytes(b[off..off + 4].try_into().unwrap()), 1.0);
}

#[test]
fn empty_scene_is_header_only() {
    let bytes = encode_scene(&Scene::new(4));
    assert_eq!(bytes.len(), SCENE_HEADER_LEN);
    check_golden("empty.spb", &bytes);
}

#[test]
fn map_matches_pinned_bytes() {
    let bytes = encode_map(&golden_map()).unwrap();
    check_golden("map.spm", &bytes);
    let back = decode_map(&std::fs::read(golden_path("map.spm")).unwrap()).unwrap();
    assert_eq!(back, golden_map());
}

#[test]
fn ppm_matches_pinned_bytes() {
    let img = Map::from_vec(2, 1, 3, vec![0.0, 0.5, 1.0, -1.0, 2.0, 0.25]).unwrap();
    check_golden("image.ppm", &encode_ppm(&img).unwrap());
}
