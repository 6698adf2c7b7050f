//! Command implementations and the error-to-exit-code mapping.

pub mod diagnose;
pub mod evaluate;
pub mod render;
pub mod sample;
pub mod sweep;
pub mod train;

use crate::config::{ConfigError, RunConfig};
use posediff_core::conditioning::{
    build_context_legacy, build_context_multiview, build_context_revamped, ContextSequence, Mode,
    PerViewMode,
};
use posediff_core::diffusion::{load_checkpoint, CheckpointError, ModelParams, TrainState};
use posediff_core::scenes::{load_dataset, relative_pose, CameraPose, Dataset, SceneViews};
use posediff_core::tensor::Tensor;
use std::path::{Path, PathBuf};

/// Exit codes: 0 success, 2 config error, 3 data error, 4 checkpoint error.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("data error: {0}")]
    Data(String),
    #[error("missing dataset at {0} (run `posediff render-dataset` first)")]
    MissingDataset(PathBuf),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::MissingDataset(_) => 3,
            CliError::Checkpoint(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(ConfigError::Invalid(msg.into()))
    }
}

impl From<posediff_core::scenes::ScenesError> for CliError {
    fn from(e: posediff_core::scenes::ScenesError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Checkpoint(e.to_string())
    }
}

impl From<posediff_core::diffusion::DiffusionError> for CliError {
    fn from(e: posediff_core::diffusion::DiffusionError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Loads the dataset configured in `config`, mapping absence to the
/// dedicated exit code.
pub fn require_dataset(config: &RunConfig) -> CliResult<Dataset> {
    let root = &config.dataset.root;
    if !root.join("manifest.json").is_file() {
        return Err(CliError::MissingDataset(root.clone()));
    }
    let ds = load_dataset(root)?;
    if ds.manifest.resolution != config.dataset.resolution {
        return Err(CliError::Data(format!(
            "dataset resolution {} does not match config {}",
            ds.manifest.resolution, config.dataset.resolution
        )));
    }
    Ok(ds)
}

/// Loads a checkpoint and cross-checks its embedded config echo against the
/// active config's model geometry.
pub fn require_checkpoint(path: &Path, config: &RunConfig) -> CliResult<TrainState> {
    let dims = config.model_dims();
    let (state, meta) = load_checkpoint(path, &dims)?;
    if let Ok(stored) = serde_json::from_value::<RunConfig>(meta) {
        if stored.model != config.model || stored.schedule != config.schedule {
            return Err(CliError::Checkpoint(
                "checkpoint was trained under a different model/schedule configuration".into(),
            ));
        }
    }
    Ok(state)
}

/// Builds the conditioning context for a target pose from chosen condition
/// views of one scene.
pub fn context_for_target(
    params: &ModelParams<Tensor<f32>>,
    config: &RunConfig,
    scene: &SceneViews,
    condition_views: &[usize],
    target_pose: &CameraPose,
) -> CliResult<ContextSequence<f32>> {
    let dims = config.model_dims();
    for &v in condition_views {
        if v >= scene.views.len() {
            return Err(CliError::config(format!(
                "condition view {v} out of range for scene {}",
                scene.scene_id
            )));
        }
    }
    let mode = config.model.mode;
    let build_single = |view: usize, per: PerViewMode| -> CliResult<ContextSequence<f32>> {
        let cv = &scene.views[view];
        let pose = relative_pose(&cv.pose, target_pose);
        let ctx = match per {
            PerViewMode::Legacy => {
                build_context_legacy(&cv.image, &pose, &params.encoder, &params.proj, &dims.cond)
            }
            PerViewMode::Revamped => {
                build_context_revamped(&cv.image, &pose, &params.encoder, &params.proj, &dims.cond)
            }
        };
        ctx.map_err(|e| CliError::Other(e.to_string()))
    };
    match mode {
        Mode::Legacy => build_single(condition_views[0], PerViewMode::Legacy),
        Mode::Revamped => build_single(condition_views[0], PerViewMode::Revamped),
        Mode::MultiView => {
            let views: Vec<(&Tensor<f32>, [f64; 4])> = condition_views
                .iter()
                .map(|&v| {
                    let cv = &scene.views[v];
                    (&cv.image, relative_pose(&cv.pose, target_pose))
                })
                .collect();
            build_context_multiview(
                &views,
                config.model.per_view_mode,
                &params.encoder,
                &params.proj,
                &dims.cond,
            )
            .map_err(|e| CliError::Other(e.to_string()))
        }
    }
}

/// Default condition views for deterministic sampling/evaluation: the first
/// N non-holdout view ids.
pub fn default_condition_views(config: &RunConfig) -> Vec<usize> {
    (0..config.dataset.views_per_scene)
        .filter(|v| !config.dataset.heldout_views.contains(v))
        .take(config.model.condition_views)
        .collect()
}

pub fn write_png(img: &Tensor<f32>, path: &Path) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, posediff_core::scenes::image_png_bytes(img))?;
    Ok(())
}
