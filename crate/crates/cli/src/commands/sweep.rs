//! `sweep`: render the full inference-steps x guidance-scale grid for one
//! target view.
//!
//! Cells are independent sampling jobs with RNG streams derived from
//! (seed, cell index), so the grid is byte-identical whether cells run in
//! parallel or serially. `--timing` forces serial execution and writes
//! per-cell wall times to a separate file that deterministic-output
//! comparisons ignore.

use super::{context_for_target, require_checkpoint, require_dataset, write_png, CliError, CliResult};
use crate::config::RunConfig;
use posediff_core::diffusion::{sample_ddim, SampleSpec};
use posediff_core::rng;
use rayon::prelude::*;
use serde::Serialize;
use std::path::PathBuf;

pub struct SweepArgs {
    pub checkpoint: PathBuf,
    pub scene: usize,
    pub condition_views: Option<Vec<usize>>,
    pub target_view: usize,
    pub steps: Option<Vec<usize>>,
    pub scales: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub timing: bool,
}

#[derive(Debug, Serialize)]
struct Cell {
    steps: usize,
    scale: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    file: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Debug, Serialize)]
struct Grid {
    scene_id: String,
    target_view: usize,
    condition_views: Vec<usize>,
    rows_steps: Vec<usize>,
    cols_scales: Vec<f64>,
    cells: Vec<Cell>,
}

#[derive(Debug, Serialize)]
struct Timing {
    cells: Vec<TimingCell>,
}

#[derive(Debug, Serialize)]
struct TimingCell {
    steps: usize,
    scale: f64,
    seconds: f64,
}

pub fn cell_file_name(steps: usize, scale: f64) -> String {
    format!("steps{steps:03}_scale{scale}.png")
}

pub fn run(config: &RunConfig, args: &SweepArgs) -> CliResult<PathBuf> {
    let dataset = require_dataset(config)?;
    let state = require_checkpoint(&args.checkpoint, config)?;
    let scene = dataset
        .scenes
        .get(args.scene)
        .ok_or_else(|| CliError::config(format!("scene {} out of range", args.scene)))?;
    let target = scene.views.get(args.target_view).ok_or_else(|| {
        CliError::config(format!("target view {} out of range", args.target_view))
    })?;
    let rows = args.steps.clone().unwrap_or_else(|| config.sample.steps.clone());
    let cols = args
        .scales
        .clone()
        .unwrap_or_else(|| config.sample.scales.clone());
    for &s in &rows {
        if s == 0 || s > config.schedule.steps {
            return Err(CliError::config(format!(
                "sweep steps {s} outside [1, {}]",
                config.schedule.steps
            )));
        }
    }
    let seed = args.seed.unwrap_or(config.sample.seed);
    let condition_views = args
        .condition_views
        .clone()
        .unwrap_or_else(|| super::default_condition_views(config));
    let ctx = context_for_target(&state.params, config, scene, &condition_views, &target.pose)?;
    let schedule = config.noise_schedule().map_err(CliError::Config)?;
    let dims = config.model_dims();
    std::fs::create_dir_all(&args.out_dir)?;

    let jobs: Vec<(usize, SampleSpec)> = rows
        .iter()
        .flat_map(|&steps| cols.iter().map(move |&scale| SampleSpec { steps, scale }))
        .enumerate()
        .collect();

    let render_cell = |(index, spec): &(usize, SampleSpec)| -> (Cell, f64) {
        let started = std::time::Instant::now();
        let mut cell_rng = rng::seeded_stream(seed, 1 + *index as u64);
        let result = sample_ddim(
            &state.params,
            &dims,
            config.model.per_view_mode,
            &schedule,
            &ctx,
            *spec,
            &mut cell_rng,
        );
        let cell = match result {
            Ok(img) => {
                let file = cell_file_name(spec.steps, spec.scale);
                match write_png(&img, &args.out_dir.join(&file)) {
                    Ok(()) => Cell {
                        steps: spec.steps,
                        scale: spec.scale,
                        file: Some(file),
                        error: None,
                    },
                    Err(e) => Cell {
                        steps: spec.steps,
                        scale: spec.scale,
                        file: None,
                        error: Some(e.to_string()),
                    },
                }
            }
            Err(e) => Cell {
                steps: spec.steps,
                scale: spec.scale,
                file: None,
                error: Some(e.to_string()),
            },
        };
        (cell, started.elapsed().as_secs_f64())
    };

    let results: Vec<(Cell, f64)> = if args.timing {
        jobs.iter().map(render_cell).collect()
    } else {
        jobs.par_iter().map(render_cell).collect()
    };

    let grid = Grid {
        scene_id: scene.scene_id.clone(),
        target_view: args.target_view,
        condition_views,
        rows_steps: rows,
        cols_scales: cols,
        cells: results.iter().map(|(c, _)| c).map(clone_cell).collect(),
    };
    let grid_path = args.out_dir.join("grid.json");
    std::fs::write(&grid_path, serde_json::to_string_pretty(&grid).unwrap())?;

    if args.timing {
        let timing = Timing {
            cells: results
                .iter()
                .map(|(c, secs)| TimingCell {
                    steps: c.steps,
                    scale: c.scale,
                    seconds: *secs,
                })
                .collect(),
        };
        std::fs::write(
            args.out_dir.join("timing.json"),
            serde_json::to_string_pretty(&timing).unwrap(),
        )?;
    }

    let failures: Vec<&Cell> = grid.cells.iter().filter(|c| c.error.is_some()).collect();
    println!(
        "sweep: {} cells into {} ({} failed)",
        grid.cells.len(),
        args.out_dir.display(),
        failures.len()
    );
    if !failures.is_empty() {
        return Err(CliError::Other(format!(
            "{} sweep cells failed; see {}",
            failures.len(),
            grid_path.display()
        )));
    }
    Ok(grid_path)
}

fn clone_cell(c: &Cell) -> Cell {
    Cell {
        steps: c.steps,
        scale: c.scale,
        file: c.file.clone(),
        error: c.error.clone(),
    }
}
