//! Experiment configuration: a named preset, optionally overlaid by a TOML
//! file with `[dataset]`, `[model]` and `[train]` sections.

use std::path::Path;

use ccflow::model::ModelConfig;
use ccflow::scenario::{DatasetConfig, FrameMode, GridGeometry, RasterMode, Timeline, WorldConfig};
use ccflow::training::TrainConfig;
use ccflow::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub const PRESETS: [&str; 4] = ["womd-desk", "av2-desk", "micro", "full-scale"];

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let mut world = WorldConfig::default();
    let mut raster_mode = RasterMode::Womd;
    let mut model = ModelConfig::new(64, 64, 64, 4);
    let mut train = TrainConfig::default();
    match name {
        "womd-desk" => {
            world.grid.height = 80;
            world.grid.width = 80;
            train.crop = Some(64);
        }
        "av2-desk" => {
            world.grid.height = 80;
            world.grid.width = 80;
            world.frame_mode = FrameMode::EgoCentric;
            raster_mode = RasterMode::Av2;
            train.crop = Some(64);
        }
        "micro" => {
            world.grid = GridGeometry {
                height: 16,
                width: 16,
                meters_per_cell: 1.0,
            };
            world.timeline = Timeline {
                history: 3,
                future: 2,
                dt_history: 0.1,
                dt_forecast: 1.0,
            };
            world.agent_count = [1, 1];
            world.lane_count = [1, 1];
            world.stationary_fraction = 0.0;
            world.turn_fraction = 0.0;
            world.ego_stationary_fraction = 1.0;
            model = ModelConfig::new(16, 16, 16, 2);
            train.epochs = 4;
            train.batch_size = 4;
        }
        "full-scale" => {
            world.grid = GridGeometry {
                height: 512,
                width: 512,
                meters_per_cell: 0.25,
            };
            world.timeline = Timeline {
                history: 11,
                future: 8,
                dt_history: 0.1,
                dt_forecast: 1.0,
            };
            world.agent_count = [10, 40];
            world.lane_count = [2, 6];
            model = ModelConfig::new(256, 320, 320, 8);
            train.batch_size = 32;
            train.crop = Some(320);
        }
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; expected one of {PRESETS:?}"
            )))
        }
    }
    Ok(ExperimentConfig {
        dataset: DatasetConfig { world, raster_mode },
        model,
        train,
    })
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// The preset with `overlay` (TOML text) applied key by key.
pub fn resolve(preset_name: &str, overlay: Option<&str>) -> Result<ExperimentConfig> {
    let base = preset(preset_name)?;
    let Some(text) = overlay else {
        return Ok(base);
    };
    let over: toml::Value =
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
    let mut value =
        toml::Value::try_from(&base).map_err(|e| Error::Config(format!("preset: {e}")))?;
    merge(&mut value, over);
    value
        .try_into()
        .map_err(|e| Error::Config(format!("config file: {e}")))
}

pub fn load(preset_name: &str, path: Option<&Path>) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?),
        None => None,
    };
    resolve(preset_name, text.as_deref())
}

pub fn to_toml(cfg: &ExperimentConfig) -> String {
    toml::to_string_pretty(cfg).expect("config serializes to TOML")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for name in PRESETS {
            let cfg = preset(name).unwrap();
            let text = to_toml(&cfg);
            let back: ExperimentConfig = toml::from_str(&text).unwrap();
            assert_eq!(back, cfg, "{name}");
        }
    }

    #[test]
    fn overlay_changes_only_named_keys() {
        let cfg = resolve("womd-desk", Some("[train]\nepochs = 3\n[model]\nlatent_channels = 32\n")).unwrap();
        let base = preset("womd-desk").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model.latent_channels, 32);
        assert_eq!(cfg.train.lr, base.train.lr);
        assert_eq!(cfg.dataset, base.dataset);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(resolve("micro", Some("[train]\nepoch = 3\n")).is_err());
        assert!(preset("huge").is_err());
    }
}
