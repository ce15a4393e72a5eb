use std::path::Path;

use serde::{Deserialize, Serialize};
use splatbev_core::bev::{BevConfig, TrainConfig};
use splatbev_core::loss::LossConfig;
use splatbev_core::optim::{FitConfig, LearningRates, DEFAULT_CLIP_NORM};
use splatbev_core::pipeline::ExperimentConfig;
use splatbev_core::raster::RenderConfig;
use splatbev_core::synth::{PerturbSpec, SceneSpec};

use crate::error::CliError;

/// Scene-fitting settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSettings {
    pub iterations: usize,
    pub lr: LearningRates,
    pub clip_norm: f64,
    pub divergence_limit: f64,
    pub tile_size: usize,
    pub early_termination: bool,
    /// Noise applied to the ground-truth splats to form the initial scene.
    pub init_perturb: PerturbSpec,
}

impl Default for FitSettings {
    fn default() -> Self {
        let f = FitConfig::default();
        FitSettings {
            iterations: f.iterations,
            lr: f.lr,
            clip_norm: DEFAULT_CLIP_NORM,
            divergence_limit: f.divergence_limit,
            tile_size: f.render.tile_size,
            early_termination: f.render.early_termination,
            init_perturb: PerturbSpec::default(),
        }
    }
}

/// Everything a command needs. Precedence: defaults < config file < flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Rayon worker threads; 0 uses every core.
    pub workers: usize,
    pub scene: SceneSpec,
    pub bev: BevConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub fit: FitSettings,
    pub train_scenes: usize,
    pub heldout_scenes: usize,
    /// Noise standing in for generator output in the BEV experiments.
    pub bev_perturb: PerturbSpec,
    pub sweep_heights: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        RunConfig {
            seed: 7,
            workers: 0,
            scene: e.scene,
            bev: e.bev,
            loss: e.loss,
            train: e.train,
            fit: FitSettings::default(),
            train_scenes: e.train_scenes,
            heldout_scenes: e.heldout_scenes,
            bev_perturb: e.perturb,
            sweep_heights: vec![0.0, 3.0, 5.0],
        }
    }
}

/// Flag values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub bev_height: Option<f64>,
    pub iters: Option<usize>,
    pub resolution: Option<(usize, usize)>,
}

/// Which size `--resolution` sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResolutionTarget {
    Views,
    Bev,
}

pub fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    let (w, h) = (p(w)?, p(h)?);
    if w == 0 || h == 0 {
        return Err("resolution must be positive".into());
    }
    Ok((w, h))
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides, target: ResolutionTarget) -> Result<(), CliError> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        if let Some(h) = o.bev_height {
            self.bev.height = h;
            self.sweep_heights = vec![h];
        }
        if let Some(n) = o.iters {
            self.fit.iterations = n;
            self.train.stage2_iters = n;
            self.train.stage3_iters = n;
        }
        if let Some((w, h)) = o.resolution {
            match target {
                ResolutionTarget::Views => {
                    self.scene.rig.width = w;
                    self.scene.rig.height = h;
                }
                ResolutionTarget::Bev => {
                    if w != h {
                        return Err(CliError::Config(format!("BEV grid must be square, got {w}x{h}")));
                    }
                    self.bev.resolution = w;
                }
            }
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: splatbev_core::Error| CliError::Config(e.to_string());
        self.bev.validate().map_err(cfg)?;
        self.loss.validate().map_err(cfg)?;
        self.scene.validate(&self.bev).map_err(cfg)?;
        if self.fit.tile_size == 0 {
            return Err(CliError::Config("fit.tile_size must be positive".into()));
        }
        if self.train.crop == 0 {
            return Err(CliError::Config("train.crop must be positive".into()));
        }
        if self.train_scenes == 0 {
            return Err(CliError::Config("train_scenes must be positive".into()));
        }
        Ok(())
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            seed: self.seed,
            ..self.scene.clone()
        }
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            iterations: self.fit.iterations,
            lr: self.fit.lr,
            loss: self.loss,
            frozen: Vec::new(),
            clip_norm: self.fit.clip_norm,
            divergence_limit: self.fit.divergence_limit,
            render: RenderConfig {
                tile_size: self.fit.tile_size,
                early_termination: self.fit.early_termination,
            },
        }
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            train_scenes: self.train_scenes,
            heldout_scenes: self.heldout_scenes,
            scene: self.scene.clone(),
            perturb: self.bev_perturb,
            bev: self.bev,
            loss: self.loss,
            train: self.train.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("serializing resolved config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn file_then_flags() {
        let mut c: RunConfig = toml::from_str("seed = 3\n[bev]\nheight = 4.0\n[train]\nstage2_iters = 9\n").unwrap();
        assert_eq!((c.seed, c.bev.height, c.train.stage2_iters), (3, 4.0, 9));
        assert_eq!(c.bev.resolution, BevConfig::default().resolution);
        let o = Overrides {
            seed: Some(5),
            iters: Some(2),
            ..Default::default()
        };
        c.apply(&o, ResolutionTarget::Views).unwrap();
        assert_eq!((c.seed, c.bev.height, c.train.stage2_iters, c.fit.iterations), (5, 4.0, 2, 2));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sede = 3\n").is_err());
        assert!(toml::from_str::<RunConfig>("[bev]\nheigth = 3.0\n").is_err());
    }

    #[test]
    fn resolution_parsing() {
        assert_eq!(parse_resolution("224x128"), Ok((224, 128)));
        assert!(parse_resolution("224").is_err());
        assert!(parse_resolution("0x5").is_err());
        let mut c = RunConfig::default();
        let o = Overrides {
            resolution: Some((64, 32)),
            ..Default::default()
        };
        assert!(matches!(c.apply(&o, ResolutionTarget::Bev), Err(CliError::Config(_))));
    }
}
