use std::path::{Path, PathBuf};

use log::{info, warn};
use splatbev_core::bev::train::predict;
use splatbev_core::bev::{render_bev_features, BevPrediction, NUM_CLASSES};
use splatbev_core::buffer::{Map, MaskSet, RenderOutput};
use splatbev_core::camera::Camera;
use splatbev_core::check::{run_all, CHAIN_TOLERANCE, GRAD_TOLERANCE};
use splatbev_core::gaussian::logistic;
use splatbev_core::io::{
    depth_to_map, load_bundle, load_cameras, load_head, load_map, load_scene, loss_curve_csv, map_to_masks, masks_to_map, metrics_csv,
    save_bundle, save_head, save_image, save_map, save_scene, sweep_csv, to_csv, write_bytes, BundleLayout, MetricRow,
};
use splatbev_core::loss::DEPTH_MIN_ALPHA;
use splatbev_core::pipeline::{fit_views, pooled_iou, run_stages, run_sweep};
use splatbev_core::raster::render_with;
use splatbev_core::seed::rng_for;
use splatbev_core::synth::{generate_scene, perturb_scene, ViewData};
use splatbev_core::Error;

use crate::config::RunConfig;
use crate::error::CliError;

pub type CmdResult = Result<(), CliError>;

pub struct Ctx {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> CmdResult {
        Ok(write_bytes(&self.path(name), bytes)?)
    }

    /// Color, alpha-normalized depth, features and alpha of one render.
    fn write_render(&self, prefix: &str, out: &RenderOutput) -> CmdResult {
        save_image(&out.color, &self.path(&format!("{prefix}_image.ppm")))?;
        save_map(&depth_to_map(&out.normalized_depth(DEPTH_MIN_ALPHA)), &self.path(&format!("{prefix}_depth.spm")))?;
        save_map(&out.feature, &self.path(&format!("{prefix}_feature.spm")))?;
        save_map(&out.alpha, &self.path(&format!("{prefix}_alpha.spm")))?;
        Ok(())
    }
}

fn require(path: &Path) -> CmdResult {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Input(format!("{}: no such file or directory", path.display())))
    }
}

pub fn gen(ctx: &Ctx) -> CmdResult {
    let (scene, gt) = generate_scene(&ctx.cfg.scene_spec())?;
    if gt.skipped_instances > 0 {
        warn!("{} degenerate footprints skipped", gt.skipped_instances);
    }
    save_bundle(&ctx.out, &scene, &gt)?;
    println!("gen: {} gaussians, {} views, {} instances -> {}", scene.len(), gt.views.len(), gt.instances.len(), ctx.out.display());
    Ok(())
}

pub fn fit(ctx: &Ctx, bundle: Option<&Path>) -> CmdResult {
    let cfg = &ctx.cfg;
    let (gt_scene, views): (_, Vec<ViewData>) = match bundle {
        Some(dir) => {
            require(dir)?;
            let (s, gt) = load_bundle(dir)?;
            (s, gt.views)
        }
        None => {
            let (s, gt) = generate_scene(&cfg.scene_spec())?;
            (s, gt.views)
        }
    };
    let init = perturb_scene(&gt_scene, &cfg.fit.init_perturb, &mut rng_for(cfg.seed, "fit-init"));
    info!("fitting {} gaussians to {} views", init.len(), views.len());
    let report = fit_views(&views, init, &cfg.fit_config())?;
    save_scene(&report.scene, &ctx.path("scene.spb"))?;
    ctx.write("loss_curve.csv", &loss_curve_csv(&report.curve)?)?;
    let summary = toml::to_string(&report).map_err(|e| CliError::Config(format!("fit summary: {e}")))?;
    ctx.write("fit_summary.toml", summary.as_bytes())?;
    let render = cfg.fit_config().render;
    for (k, v) in views.iter().enumerate() {
        let out = render_with(&report.scene, &v.camera, &render)?;
        save_image(&out.color, &ctx.path(&format!("view{k:02}_fit.ppm")))?;
    }
    println!(
        "fit: render loss {:.6} -> {:.6} ({:.3}x), median depth error {:.4} m -> {:.4} m",
        report.initial.render,
        report.final_loss.render,
        report.final_loss.render / report.initial.render,
        report.initial_depth_error,
        report.final_depth_error
    );
    Ok(())
}

pub fn render(ctx: &Ctx, scene: &Path, cameras: Option<&Path>) -> CmdResult {
    require(scene)?;
    let scene = load_scene(scene)?;
    let cams: Vec<Camera> = match cameras {
        Some(p) => {
            require(p)?;
            load_cameras(p)?
        }
        None => ctx.cfg.scene.rig.cameras()?,
    };
    let rc = ctx.cfg.fit_config().render;
    for (k, cam) in cams.iter().enumerate() {
        ctx.write_render(&format!("view{k:02}"), &render_with(&scene, cam, &rc)?)?;
    }
    println!("render: {} views -> {}", cams.len(), ctx.out.display());
    Ok(())
}

/// Class probabilities, centerness and offsets in the mask-file layout.
fn prediction_to_masks(p: &BevPrediction) -> MaskSet {
    let mut classes = p.logits.clone();
    classes.data.iter_mut().for_each(|v| *v = logistic(*v));
    let instance = (0..classes.pixels()).map(|i| classes.pixel(i).iter().any(|v| *v > 0.5)).collect();
    MaskSet {
        classes,
        centerness: p.center.clone(),
        offset: p.offset.clone(),
        instance,
    }
}

/// Reads class channels as probabilities thresholded at 0.5.
fn masks_to_prediction(m: &MaskSet) -> BevPrediction {
    let mut logits = m.classes.clone();
    logits.data.iter_mut().for_each(|v| *v -= 0.5);
    BevPrediction {
        logits,
        center: m.centerness.clone(),
        offset: m.offset.clone(),
    }
}

fn class_image(classes: &Map) -> Map {
    let mut img = Map::zeros(classes.width, classes.height, 3);
    for p in 0..classes.pixels() {
        img.pixel_mut(p)[..NUM_CLASSES.min(3)].copy_from_slice(&classes.pixel(p)[..NUM_CLASSES.min(3)]);
    }
    img
}

pub fn bev(ctx: &Ctx, scene: &Path, head: Option<&Path>) -> CmdResult {
    require(scene)?;
    let scene = load_scene(scene)?;
    let out = render_bev_features(&scene, &ctx.cfg.bev)?;
    ctx.write_render("bev", &out)?;
    if let Some(h) = head {
        require(h)?;
        let head = load_head(h, scene.feature_dim, ctx.cfg.train.hidden)?;
        let masks = prediction_to_masks(&head.forward(&out.feature)?);
        save_map(&masks_to_map(&masks), &ctx.path("bev_prediction.spm"))?;
        save_image(&class_image(&masks.classes), &ctx.path("bev_classes.ppm"))?;
    }
    println!("bev: {0}x{0} grid at height {1} m -> {2}", ctx.cfg.bev.resolution, ctx.cfg.bev.height, ctx.out.display());
    Ok(())
}

fn print_iou(label: &str, rows: &[MetricRow]) {
    let parts: Vec<String> = rows.iter().map(|r| format!("{} {:.4}", r.class, r.iou.unwrap_or(f64::NAN))).collect();
    println!("{label}: {}", parts.join(", "));
}

pub fn train(ctx: &Ctx) -> CmdResult {
    let cfg = &ctx.cfg;
    let rep = run_stages(&cfg.experiment(), cfg.seed)?;
    if rep.checksums_before != rep.checksums_after_stage2 {
        return Err(Error::Invariant("train scenes changed during stage 2".into()).into());
    }
    save_head(&rep.head_stage2, &ctx.path("head_stage2.spm"))?;
    save_head(&rep.head_stage3, &ctx.path("head_stage3.spm"))?;
    let mut rows: Vec<MetricRow> = rep.curve.iter().map(MetricRow::from_record).collect();
    let s2 = MetricRow::from_iou("stage2_heldout", cfg.train.stage2_iters, &rep.stage2);
    let s3 = MetricRow::from_iou("stage3_heldout", cfg.train.stage2_iters + cfg.train.stage3_iters, &rep.stage3);
    print_iou("stage 2 held-out IoU", &s2);
    print_iou("stage 3 held-out IoU", &s3);
    rows.extend(s2);
    rows.extend(s3);
    ctx.write("metrics.csv", &metrics_csv(&rows)?)?;
    Ok(())
}

pub fn eval(ctx: &Ctx, bundle: &Path, prediction: Option<&Path>, head: Option<&Path>) -> CmdResult {
    require(bundle)?;
    let layout = BundleLayout::new(bundle);
    require(&layout.bev_targets())?;
    let targets = map_to_masks(&load_map(&layout.bev_targets())?)?;
    let pred = match (prediction, head) {
        (Some(p), None) => {
            require(p)?;
            masks_to_prediction(&map_to_masks(&load_map(p)?)?)
        }
        (None, Some(h)) => {
            require(h)?;
            let scene = load_scene(&layout.scene())?;
            let head = load_head(h, scene.feature_dim, ctx.cfg.train.hidden)?;
            predict(&head, &scene, &ctx.cfg.bev)?
        }
        _ => return Err(CliError::Input("eval needs exactly one of --prediction or --head".into())),
    };
    if pred.logits.width != targets.classes.width || pred.logits.height != targets.classes.height {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs targets {}x{}",
            pred.logits.width, pred.logits.height, targets.classes.width, targets.classes.height
        ))
        .into());
    }
    let rep = pooled_iou(&[pred], &[&targets])?;
    let rows = MetricRow::from_iou("eval", 0, &rep);
    print_iou("IoU", &rows);
    ctx.write("metrics.csv", &metrics_csv(&rows)?)?;
    Ok(())
}

pub fn sweep_height(ctx: &Ctx) -> CmdResult {
    let cfg = &ctx.cfg;
    let rows = run_sweep(&cfg.experiment(), cfg.seed, &cfg.sweep_heights)?;
    for r in &rows {
        println!("height {:>5.2} m: mean IoU {:.4}", r.height, r.iou.mean());
    }
    ctx.write("sweep.csv", &sweep_csv(&rows)?)?;
    Ok(())
}

pub fn check_grads(ctx: &Ctx) -> CmdResult {
    let rows = run_all(ctx.cfg.seed)?;
    let mut failed = 0;
    for r in &rows {
        let ok = r.passed();
        failed += usize::from(!ok);
        println!(
            "{:<28} samples {:>3}  max rel err {:.3e}  tol {:.0e}  {}",
            r.name,
            r.samples,
            r.max_rel_error,
            r.tolerance,
            if ok { "ok" } else { "FAIL" }
        );
    }
    let max = rows.iter().filter(|r| r.tolerance <= GRAD_TOLERANCE).map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!("max relative error: {max:.3e} (tolerance {GRAD_TOLERANCE:.0e}; BEV chain {CHAIN_TOLERANCE:.0e})");
    ctx.write("grad_check.csv", &to_csv(&rows)?)?;
    if failed > 0 {
        return Err(CliError::CheckFailed(failed));
    }
    Ok(())
}
