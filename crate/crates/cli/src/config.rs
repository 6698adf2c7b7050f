//! Run configuration: a single TOML file with a complete default set;
//! individual CLI flags override individual keys.

use posediff_core::conditioning::{CondDims, Mode, PerViewMode};
use posediff_core::diffusion::{AdamParams, ModelDims, NoiseSchedule, TrainSetup};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub root: PathBuf,
    pub seed: u64,
    pub n_scenes: usize,
    pub resolution: usize,
    pub views_per_scene: usize,
    pub heldout_views: Vec<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            root: PathBuf::from("data/scenes"),
            seed: 42,
            n_scenes: 64,
            resolution: 32,
            views_per_scene: 12,
            heldout_views: vec![10, 11],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: Mode,
    /// Condition views per sample (N); a sample also draws one target.
    pub condition_views: usize,
    /// Per-view layout inside mode C contexts.
    pub per_view_mode: PerViewMode,
    pub d_ctx: usize,
    pub d_embed: usize,
    pub n_tok: usize,
    /// UNet channels at full / half resolution.
    pub unet_channels: [usize; 2],
    pub time_embed_dim: usize,
    pub norm_groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: Mode::Legacy,
            condition_views: 1,
            per_view_mode: PerViewMode::Revamped,
            d_ctx: 64,
            d_embed: 64,
            n_tok: 16,
            unet_channels: [16, 32],
            time_embed_dim: 64,
            norm_groups: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub p_uncond: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            p_uncond: 0.1,
            seed: 7,
            checkpoint_every: 500,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    /// Sweep rows: inference step counts.
    pub steps: Vec<usize>,
    /// Sweep columns: guidance scales.
    pub scales: Vec<f64>,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            steps: vec![20, 50, 100, 150, 200],
            scales: vec![1.0, 4.0, 16.0, 30.0],
            seed: 1234,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub steps: usize,
    pub scale: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            steps: 50,
            scale: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let config: RunConfig = toml::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |msg: String| Err(ConfigError::Invalid(msg));
        let d = &self.dataset;
        if d.n_scenes == 0 {
            return err("dataset.n_scenes must be >= 1".into());
        }
        if ![16usize, 32, 64].contains(&d.resolution) {
            return err(format!("dataset.resolution {} not in {{16,32,64}}", d.resolution));
        }
        if d.views_per_scene == 0 {
            return err("dataset.views_per_scene must be >= 1".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for &v in &d.heldout_views {
            if v >= d.views_per_scene {
                return err(format!("heldout view {v} out of range"));
            }
            if !seen.insert(v) {
                return err(format!("heldout view {v} repeated"));
            }
        }

        let m = &self.model;
        if m.condition_views == 0 {
            return err("model.condition_views must be >= 1".into());
        }
        if m.mode == Mode::MultiView && m.condition_views < 2 {
            return err("mode c requires model.condition_views >= 2".into());
        }
        let train_views = d.views_per_scene - d.heldout_views.len();
        if m.condition_views + 1 > train_views {
            return err(format!(
                "condition_views + 1 target = {} exceeds the {train_views} non-holdout views",
                m.condition_views + 1
            ));
        }
        self.model_dims()
            .validate()
            .map_err(ConfigError::Invalid)?;

        let s = &self.schedule;
        if s.steps == 0 || !(0.0 < s.beta_start && s.beta_start <= s.beta_end && s.beta_end < 1.0) {
            return err(format!(
                "schedule: steps {} betas [{}, {}] invalid",
                s.steps, s.beta_start, s.beta_end
            ));
        }

        let t = &self.train;
        if t.batch_size == 0 {
            return err("train.batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&t.p_uncond) {
            return err(format!("train.p_uncond {} not in [0, 1)", t.p_uncond));
        }
        if t.checkpoint_every == 0 {
            return err("train.checkpoint_every must be >= 1".into());
        }

        for &steps in self.sample.steps.iter().chain(&[self.eval.steps]) {
            if steps == 0 || steps > s.steps {
                return err(format!(
                    "sampling steps {steps} outside [1, {}]",
                    s.steps
                ));
            }
        }
        Ok(())
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            c1: self.model.unet_channels[0],
            c2: self.model.unet_channels[1],
            d_time: self.model.time_embed_dim,
            groups: self.model.norm_groups,
            cond: CondDims {
                d_ctx: self.model.d_ctx,
                d_embed: self.model.d_embed,
                n_tok: self.model.n_tok,
                resolution: self.dataset.resolution,
            },
        }
    }

    pub fn train_setup(&self) -> TrainSetup {
        TrainSetup {
            dims: self.model_dims(),
            mode: self.model.mode,
            per_view: self.model.per_view_mode,
            n_cond_views: self.model.condition_views,
            p_uncond: self.train.p_uncond,
            adam: AdamParams {
                lr: self.train.lr,
                ..AdamParams::default()
            },
            heldout_views: self.dataset.heldout_views.clone(),
        }
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule, ConfigError> {
        NoiseSchedule::linear(
            self.schedule.steps,
            self.schedule.beta_start,
            self.schedule.beta_end,
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Echo block embedded into checkpoints.
    pub fn to_meta(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config echo")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let config = RunConfig::default();
        config.validate().unwrap();
        let text = config.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let back: RunConfig = toml::from_str("[model]\nmode = \"b\"\n").unwrap();
        assert_eq!(back.model.mode, Mode::Revamped);
        assert_eq!(back.dataset.n_scenes, 64);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = RunConfig::default();
        c.dataset.n_scenes = 0;
        assert!(c.validate().is_err());

        let mut c = RunConfig::default();
        c.model.mode = Mode::MultiView;
        c.model.condition_views = 1;
        assert!(c.validate().is_err());

        let mut c = RunConfig::default();
        c.sample.steps = vec![20, 500];
        assert!(c.validate().is_err());

        let mut c = RunConfig::default();
        c.dataset.resolution = 20;
        assert!(c.validate().is_err());

        let mut c = RunConfig::default();
        c.model.n_tok = 9;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let res: Result<RunConfig, _> = toml::from_str("[model]\nbogus = 3\n");
        assert!(res.is_err());
    }
}
