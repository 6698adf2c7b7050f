//! `train`: run the DDPM objective over the dataset, logging a loss CSV and
//! writing periodic checkpoints.

use super::{require_checkpoint, require_dataset, CliResult};
use crate::config::RunConfig;
use posediff_core::diffusion::{
    init_model_params, save_checkpoint, train_steps, EpochSampler, TrainState,
};
use posediff_core::rng;
use std::io::Write;
use std::path::{Path, PathBuf};

pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
}

pub fn run(config: &RunConfig, resume: Option<&Path>) -> CliResult<TrainOutputs> {
    let dataset = require_dataset(config)?;
    let setup = config.train_setup();
    let schedule = config
        .noise_schedule()
        .map_err(crate::commands::CliError::Config)?;

    let mut state = match resume {
        Some(path) => require_checkpoint(path, config)?,
        None => {
            let mut init_rng = rng::seeded_stream(config.train.seed, 1);
            TrainState::new(
                init_model_params(&setup.dims, &mut init_rng),
                config.train.seed,
            )
        }
    };
    let start_step = state.step;

    let out_dir = &config.train.out_dir;
    std::fs::create_dir_all(out_dir)?;
    let loss_csv = out_dir.join("loss.csv");
    let mut csv: Box<dyn Write> = if start_step == 0 {
        let mut f = std::fs::File::create(&loss_csv)?;
        writeln!(f, "step,loss")?;
        Box::new(f)
    } else {
        Box::new(
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&loss_csv)?,
        )
    };

    let checkpoint = out_dir.join("model.vfd");
    let meta = config.to_meta();
    let every = config.train.checkpoint_every;
    let mut sampler = EpochSampler::new();
    let mut pending: Vec<(u64, f32)> = Vec::new();

    let total = config.train.steps;
    let mut remaining = total;
    while remaining > 0 {
        let chunk = remaining.min(every - state.step % every);
        train_steps(
            &mut state,
            &setup,
            &dataset,
            &schedule,
            &mut sampler,
            chunk,
            config.train.batch_size,
            |step, loss| pending.push((step, loss)),
        )?;
        for (step, loss) in pending.drain(..) {
            writeln!(csv, "{step},{loss}")?;
        }
        csv.flush()?;
        if state.step % every == 0 || remaining == chunk {
            save_checkpoint(&checkpoint, &state, &meta)?;
        }
        remaining -= chunk;
    }
    save_checkpoint(&checkpoint, &state, &meta)?;

    println!(
        "trained mode {} from step {start_step} to {} ({} steps, batch {}); checkpoint {}",
        config.model.mode.letter(),
        state.step,
        total,
        config.train.batch_size,
        checkpoint.display()
    );
    Ok(TrainOutputs {
        checkpoint,
        loss_csv,
    })
}
