//! `sample`: generate one novel view from a checkpoint.

use super::{context_for_target, require_checkpoint, require_dataset, write_png, CliError, CliResult};
use crate::config::RunConfig;
use posediff_core::diffusion::{sample_ddim, SampleSpec};
use posediff_core::rng;
use std::path::PathBuf;

pub struct SampleArgs {
    pub checkpoint: PathBuf,
    pub scene: usize,
    pub condition_views: Option<Vec<usize>>,
    pub target_view: usize,
    pub steps: Option<usize>,
    pub scale: Option<f64>,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
}

pub fn run(config: &RunConfig, args: &SampleArgs) -> CliResult<PathBuf> {
    let dataset = require_dataset(config)?;
    let state = require_checkpoint(&args.checkpoint, config)?;
    let scene = dataset
        .scenes
        .get(args.scene)
        .ok_or_else(|| CliError::config(format!("scene {} out of range", args.scene)))?;
    let target = scene
        .views
        .get(args.target_view)
        .ok_or_else(|| CliError::config(format!("target view {} out of range", args.target_view)))?;

    let condition_views = args
        .condition_views
        .clone()
        .unwrap_or_else(|| super::default_condition_views(config));
    let ctx = context_for_target(&state.params, config, scene, &condition_views, &target.pose)?;

    let steps = args.steps.unwrap_or(config.eval.steps);
    let scale = args.scale.unwrap_or(config.eval.scale);
    if steps == 0 || steps > config.schedule.steps {
        return Err(CliError::config(format!(
            "steps {steps} outside [1, {}]",
            config.schedule.steps
        )));
    }
    let seed = args.seed.unwrap_or(config.sample.seed);
    let schedule = config.noise_schedule().map_err(CliError::Config)?;
    let mut cell_rng = rng::seeded_stream(seed, 1);
    let img = sample_ddim(
        &state.params,
        &config.model_dims(),
        config.model.per_view_mode,
        &schedule,
        &ctx,
        SampleSpec { steps, scale },
        &mut cell_rng,
    )?;
    let path = args.out_dir.join(sample_file_name(
        &scene.scene_id,
        args.target_view,
        steps,
        scale,
    ));
    write_png(&img, &path)?;
    println!("wrote {}", path.display());
    Ok(path)
}

pub fn sample_file_name(scene_id: &str, view: usize, steps: usize, scale: f64) -> String {
    format!("{scene_id}_view{view:02}_steps{steps:03}_scale{scale}.png")
}
