//! Deterministic DDIM sampling (eta = 0) with classifier-free guidance.

use super::train::{from_latent, ModelParams};
use super::unet::{predict_eps, ModelDims};
use super::{cfg_combine, DiffusionError, DiffusionResult, NoiseSchedule};
use crate::conditioning::{null_context, ContextSequence, PerViewMode};
use crate::tensor::Tensor;
use rand::Rng;

/// One sampling job: inference step count and guidance scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSpec {
    pub steps: usize,
    pub scale: f64,
}

/// Descending timestep subsequence for `steps` inference steps out of a
/// `t_total`-step schedule, evenly spaced. `steps == t_total` yields the
/// full trajectory.
pub fn ddim_timesteps(t_total: usize, steps: usize) -> DiffusionResult<Vec<usize>> {
    if steps == 0 || steps > t_total {
        return Err(DiffusionError::BadSteps {
            steps,
            t: t_total,
        });
    }
    let mut ts: Vec<usize> = (0..steps)
        .map(|i| i * t_total / steps)
        .collect();
    ts.dedup();
    ts.reverse();
    Ok(ts)
}

/// Runs the reverse process from pure noise under `ctx`, guiding each step
/// with the mode's learned null context. Deterministic given the RNG state
/// handed in (the only draw is the initial noise).
pub fn sample_ddim(
    params: &ModelParams<Tensor<f32>>,
    dims: &ModelDims,
    per_view: PerViewMode,
    schedule: &NoiseSchedule,
    ctx: &ContextSequence<f32>,
    spec: SampleSpec,
    rng: &mut impl Rng,
) -> DiffusionResult<Tensor<f32>> {
    let timesteps = ddim_timesteps(schedule.steps(), spec.steps)?;
    let n_views = ctx.provenance.len().max(1);
    let null = null_context::<f32>(ctx.mode, per_view, n_views, &params.proj, &dims.cond)?;

    let r = dims.cond.resolution;
    let mut z = Tensor::<f32>::randn(&[3, r, r], rng);
    let mut x0 = Tensor::<f32>::zeros(&[3, r, r]);
    for (k, &t) in timesteps.iter().enumerate() {
        let eps_c = predict_eps(&z, t, ctx, &params.unet, dims)?;
        let eps_u = predict_eps(&z, t, &null, &params.unet, dims)?;
        let eps_hat = cfg_combine(&eps_c, &eps_u, spec.scale)?;

        let ab_t = schedule.alpha_bar()[t];
        let ab_prev = if k + 1 < timesteps.len() {
            schedule.alpha_bar()[timesteps[k + 1]]
        } else {
            1.0
        };
        let (sa, s1) = (ab_t.sqrt() as f32, (1.0 - ab_t).sqrt() as f32);
        let (pa, p1) = (ab_prev.sqrt() as f32, (1.0 - ab_prev).sqrt() as f32);
        // Predicted clean latent, clamped to the pixel-latent range to keep
        // high-guidance trajectories bounded.
        let x0_data: Vec<f32> = z
            .data()
            .iter()
            .zip(eps_hat.data())
            .map(|(&zt, &e)| ((zt - s1 * e) / sa).clamp(-1.0, 1.0))
            .collect();
        x0 = Tensor::from_vec(vec![3, r, r], x0_data)?;
        let z_data: Vec<f32> = x0
            .data()
            .iter()
            .zip(eps_hat.data())
            .map(|(&x, &e)| pa * x + p1 * e)
            .collect();
        z = Tensor::from_vec(vec![3, r, r], z_data)?;
    }
    Ok(from_latent(&x0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{CondDims, Mode};
    use crate::diffusion::train::init_model_params;
    use crate::diffusion::unet::raw_context;
    use crate::rng;

    fn dims16() -> ModelDims {
        ModelDims {
            c1: 8,
            c2: 16,
            d_time: 16,
            groups: 4,
            cond: CondDims {
                d_ctx: 12,
                d_embed: 10,
                n_tok: 4,
                resolution: 16,
            },
        }
    }

    #[test]
    fn timestep_subsequences() {
        // Paper sweep step counts are all valid for the default schedule.
        for steps in [20, 50, 100, 150, 200] {
            let ts = ddim_timesteps(200, steps).unwrap();
            assert_eq!(ts.len(), steps);
            assert!(ts.windows(2).all(|w| w[0] > w[1]));
            assert!(*ts.last().unwrap() == 0);
        }
        // steps == T is the full deterministic trajectory.
        let full = ddim_timesteps(200, 200).unwrap();
        assert_eq!(full, (0..200).rev().collect::<Vec<_>>());
        assert!(ddim_timesteps(200, 0).is_err());
        assert!(ddim_timesteps(200, 201).is_err());
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let dims = dims16();
        let mut r = rng::seeded(1);
        let params = init_model_params::<f32>(&dims, &mut r);
        let schedule = NoiseSchedule::linear(40, 1e-4, 0.02).unwrap();
        let ctx = raw_context(Tensor::randn(&[5, dims.cond.d_ctx], &mut r), Mode::Revamped);
        let spec = SampleSpec {
            steps: 10,
            scale: 4.0,
        };
        let img1 = sample_ddim(
            &params,
            &dims,
            PerViewMode::Revamped,
            &schedule,
            &ctx,
            spec,
            &mut rng::seeded_stream(77, 1),
        )
        .unwrap();
        let img2 = sample_ddim(
            &params,
            &dims,
            PerViewMode::Revamped,
            &schedule,
            &ctx,
            spec,
            &mut rng::seeded_stream(77, 1),
        )
        .unwrap();
        assert_eq!(img1.data(), img2.data());
        assert!(img1.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn guidance_zero_matches_unconditional_context() {
        // scale = 0 discards the conditional branch entirely: sampling under
        // any context equals sampling under the null context.
        let dims = dims16();
        let mut r = rng::seeded(2);
        let params = init_model_params::<f32>(&dims, &mut r);
        let schedule = NoiseSchedule::linear(40, 1e-4, 0.02).unwrap();
        let ctx = raw_context(Tensor::randn(&[1, dims.cond.d_ctx], &mut r), Mode::Legacy);
        let null = null_context::<f32>(
            Mode::Legacy,
            PerViewMode::Revamped,
            1,
            &params.proj,
            &dims.cond,
        )
        .unwrap();
        let spec = SampleSpec {
            steps: 8,
            scale: 0.0,
        };
        let a = sample_ddim(
            &params,
            &dims,
            PerViewMode::Revamped,
            &schedule,
            &ctx,
            spec,
            &mut rng::seeded_stream(5, 9),
        )
        .unwrap();
        let b = sample_ddim(
            &params,
            &dims,
            PerViewMode::Revamped,
            &schedule,
            &null,
            spec,
            &mut rng::seeded_stream(5, 9),
        )
        .unwrap();
        assert_eq!(a.data(), b.data());
    }
}
