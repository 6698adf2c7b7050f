//! `evaluate`: score generated novel views against held-out ground truth.
//!
//! For every scene, each held-out view becomes a target: the model samples
//! it from the scene's default condition views, and the report records
//! PSNR, perceptual distance and embedding similarity per view, a
//! copy-condition baseline row (the condition image scored as if it were
//! the prediction), and an aggregate Fréchet distance between the generated
//! and real view sets.

use super::{context_for_target, require_checkpoint, require_dataset, write_png, CliError, CliResult};
use crate::config::RunConfig;
use posediff_core::diffusion::{sample_ddim, SampleSpec};
use posediff_core::metrics::{
    embed, embed_similarity, fid_from_features, perceptual_distance, psnr, EvalReport, EvalRow,
    MetricReport,
};
use posediff_core::rng;
use posediff_core::tensor::Tensor;
use rayon::prelude::*;
use std::path::PathBuf;

pub struct EvaluateArgs {
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
    /// Also dump every generated view as PNG next to the report.
    pub keep_images: bool,
}

pub fn run(config: &RunConfig, args: &EvaluateArgs) -> CliResult<PathBuf> {
    let dataset = require_dataset(config)?;
    let state = require_checkpoint(&args.checkpoint, config)?;
    let dims = config.model_dims();
    let schedule = config.noise_schedule().map_err(CliError::Config)?;
    let spec = SampleSpec {
        steps: config.eval.steps,
        scale: config.eval.scale,
    };
    let condition_views = super::default_condition_views(config);
    let views_per_scene = config.dataset.views_per_scene;

    struct Job {
        scene_idx: usize,
        view_id: usize,
    }
    let jobs: Vec<Job> = dataset
        .scenes
        .iter()
        .enumerate()
        .flat_map(|(scene_idx, _)| {
            config.dataset.heldout_views.iter().map(move |&view_id| Job {
                scene_idx,
                view_id,
            })
        })
        .collect();

    let results: CliResult<Vec<(EvalRow, EvalRow, Tensor<f32>, Tensor<f32>)>> = jobs
        .par_iter()
        .map(|job| {
            let scene = &dataset.scenes[job.scene_idx];
            let target = &scene.views[job.view_id];
            let ctx =
                context_for_target(&state.params, config, scene, &condition_views, &target.pose)?;
            let stream = 10_000 + (job.scene_idx * views_per_scene + job.view_id) as u64;
            let mut cell_rng = rng::seeded_stream(config.sample.seed, stream);
            let generated = sample_ddim(
                &state.params,
                &dims,
                config.model.per_view_mode,
                &schedule,
                &ctx,
                spec,
                &mut cell_rng,
            )?;
            let metric_err = |e: posediff_core::metrics::MetricsError| CliError::Other(e.to_string());
            let row = EvalRow {
                scene_id: scene.scene_id.clone(),
                target_view: job.view_id,
                mode: config.model.mode.letter().to_string(),
                steps: spec.steps,
                scale: spec.scale,
                psnr: psnr(&generated, &target.image, 1.0).map_err(metric_err)?,
                perceptual: perceptual_distance(
                    &generated,
                    &target.image,
                    &state.params.encoder,
                    &dims.cond,
                )
                .map_err(metric_err)?,
                embed_sim: embed_similarity(
                    &generated,
                    &target.image,
                    &state.params.encoder,
                    &dims.cond,
                )
                .map_err(metric_err)?,
            };
            // Copy-condition baseline: the first condition image scored as
            // if it were the prediction.
            let copy = &scene.views[condition_views[0]].image;
            let baseline = EvalRow {
                scene_id: scene.scene_id.clone(),
                target_view: job.view_id,
                mode: "copy".into(),
                steps: 0,
                scale: 0.0,
                psnr: psnr(copy, &target.image, 1.0).map_err(metric_err)?,
                perceptual: perceptual_distance(
                    copy,
                    &target.image,
                    &state.params.encoder,
                    &dims.cond,
                )
                .map_err(metric_err)?,
                embed_sim: embed_similarity(
                    copy,
                    &target.image,
                    &state.params.encoder,
                    &dims.cond,
                )
                .map_err(metric_err)?,
            };
            Ok((row, baseline, generated, target.image.clone()))
        })
        .collect();
    let results = results?;

    let metric_err = |e: posediff_core::metrics::MetricsError| CliError::Other(e.to_string());
    let gen_features: Vec<Vec<f64>> = results
        .iter()
        .map(|(_, _, g, _)| embed(g, &state.params.encoder, &dims.cond).map_err(metric_err))
        .collect::<CliResult<_>>()?;
    let real_features: Vec<Vec<f64>> = results
        .iter()
        .map(|(_, _, _, t)| embed(t, &state.params.encoder, &dims.cond).map_err(metric_err))
        .collect::<CliResult<_>>()?;
    let fid = fid_from_features(&real_features, &gen_features).map_err(metric_err)?;

    let rows: Vec<EvalRow> = results.iter().map(|(r, _, _, _)| r.clone()).collect();
    let baseline_rows: Vec<EvalRow> = results.iter().map(|(_, b, _, _)| b.clone()).collect();
    let n = rows.len() as f64;
    let aggregate = MetricReport {
        fid,
        n_real: real_features.len(),
        n_generated: gen_features.len(),
        mean_psnr_db: rows.iter().map(|r| r.psnr.db_or(99.0)).sum::<f64>() / n,
        mean_perceptual: rows.iter().map(|r| r.perceptual).sum::<f64>() / n,
        mean_embed_sim: rows.iter().map(|r| r.embed_sim).sum::<f64>() / n,
    };
    let report = EvalReport {
        mode: config.model.mode.letter().to_string(),
        steps: spec.steps,
        scale: spec.scale,
        rows,
        baseline_rows,
        aggregate: aggregate.clone(),
    };

    std::fs::create_dir_all(&args.out_dir)?;
    if args.keep_images {
        for ((row, _, generated, _), job) in results.iter().zip(&jobs) {
            let file = format!("{}_view{:02}_generated.png", row.scene_id, job.view_id);
            write_png(generated, &args.out_dir.join(file))?;
        }
    }
    let path = args
        .out_dir
        .join(format!("eval_{}.json", config.model.mode.letter()));
    std::fs::write(&path, serde_json::to_string_pretty(&report).unwrap())?;
    println!(
        "evaluated mode {} on {} held-out views: mean PSNR {:.2} dB, FID-analog {:.4} -> {}",
        report.mode,
        report.rows.len(),
        aggregate.mean_psnr_db,
        aggregate.fid,
        path.display()
    );
    Ok(path)
}
