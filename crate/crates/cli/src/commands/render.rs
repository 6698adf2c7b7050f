//! `render-dataset`: procedural multi-view dataset generation.

use super::{CliError, CliResult};
use crate::config::RunConfig;
use posediff_core::scenes::make_dataset;

pub fn run(config: &RunConfig) -> CliResult<()> {
    let d = &config.dataset;
    let manifest = make_dataset(
        &d.root,
        d.n_scenes,
        d.views_per_scene,
        d.resolution,
        d.seed,
    )
    .map_err(|e| match e {
        posediff_core::scenes::ScenesError::BadResolution(r) => {
            CliError::config(format!("resolution {r} unsupported"))
        }
        other => CliError::Data(other.to_string()),
    })?;
    println!(
        "rendered {} scenes x {} views at {}x{} into {} ({} images)",
        manifest.n_scenes,
        manifest.views_per_scene,
        manifest.resolution,
        manifest.resolution,
        d.root.display(),
        manifest.entries.len()
    );
    Ok(())
}
