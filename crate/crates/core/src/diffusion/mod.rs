//! Conditional denoising diffusion: schedule, forward noising, the UNet
//! epsilon predictor, training loop and DDIM sampling.

mod checkpoint;
mod sampler;
mod train;
mod unet;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CHECKPOINT_MAGIC};
pub use sampler::{ddim_timesteps, sample_ddim, SampleSpec};
pub use train::{
    init_model_params, loss_forward, loss_step, to_latent, train_steps, AdamParams, AdamState,
    BatchDraw, EpochSampler, ModelParams, TrainSetup, TrainState,
};
pub use train::from_latent;
pub use unet::{
    cross_attention, cross_attention_vars, init_unet, predict_eps, predict_eps_traced, raw_context,
    unet_forward, AttentionWeights, AttnTrace, CrossAttnParams, ModelDims, ResBlockParams,
    TransformerParams, UNetParams,
};

use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum DiffusionError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Conditioning(#[from] crate::conditioning::CondError),
    #[error("invalid beta range [{start}, {end}]: need 0 < start <= end < 1")]
    BadRange { start: f64, end: f64 },
    #[error("timestep {t} out of range for a {steps}-step schedule")]
    TOutOfRange { t: usize, steps: usize },
    #[error("{steps} sampling steps invalid for a {t}-step schedule")]
    BadSteps { steps: usize, t: usize },
}

pub type DiffusionResult<T> = Result<T, DiffusionError>;

/// Per-step noise levels: `beta[t]`, `alpha[t] = 1 - beta[t]` and the
/// running product `alpha_bar[t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta ramp over `steps` timesteps. `alpha_bar` is accumulated
    /// incrementally, so it equals the running product by construction.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> DiffusionResult<Self> {
        if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DiffusionError::BadRange {
                start: beta_start,
                end: beta_end,
            });
        }
        let mut beta = Vec::with_capacity(steps);
        let mut alpha = Vec::with_capacity(steps);
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut running = 1.0f64;
        for t in 0..steps {
            let frac = if steps == 1 {
                0.0
            } else {
                t as f64 / (steps - 1) as f64
            };
            let b = beta_start + (beta_end - beta_start) * frac;
            let a = 1.0 - b;
            running *= a;
            beta.push(b);
            alpha.push(a);
            alpha_bar.push(running);
        }
        Ok(NoiseSchedule {
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check_t(&self, t: usize) -> DiffusionResult<()> {
        if t >= self.steps() {
            return Err(DiffusionError::TOutOfRange {
                t,
                steps: self.steps(),
            });
        }
        Ok(())
    }
}

/// Forward marginal `z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
pub fn q_sample<S: Scalar>(
    z0: &Tensor<S>,
    t: usize,
    eps: &Tensor<S>,
    schedule: &NoiseSchedule,
) -> DiffusionResult<Tensor<S>> {
    schedule.check_t(t)?;
    if z0.shape() != eps.shape() {
        return Err(TensorError::shape(
            "q_sample",
            format!("{:?} vs {:?}", z0.shape(), eps.shape()),
        )
        .into());
    }
    let ab = schedule.alpha_bar()[t];
    let c0 = S::from_f64(ab.sqrt());
    let c1 = S::from_f64((1.0 - ab).sqrt());
    let data: Vec<S> = z0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&z, &e)| c0 * z + c1 * e)
        .collect();
    Ok(Tensor::from_vec(z0.shape().to_vec(), data)?)
}

/// Classifier-free guidance blend `eps_u + s (eps_c - eps_u)`.
///
/// `s = 0` and `s = 1` return the unconditional and conditional inputs
/// bitwise, which the general formula cannot promise in float arithmetic.
pub fn cfg_combine<S: Scalar>(
    eps_cond: &Tensor<S>,
    eps_uncond: &Tensor<S>,
    scale: f64,
) -> DiffusionResult<Tensor<S>> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(TensorError::shape(
            "cfg_combine",
            format!("{:?} vs {:?}", eps_cond.shape(), eps_uncond.shape()),
        )
        .into());
    }
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    if scale == 0.0 {
        return Ok(eps_uncond.clone());
    }
    let s = S::from_f64(scale);
    let data: Vec<S> = eps_cond
        .data()
        .iter()
        .zip(eps_uncond.data())
        .map(|(&c, &u)| u + s * (c - u))
        .collect();
    Ok(Tensor::from_vec(eps_cond.shape().to_vec(), data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.3, 0.3).unwrap();
        assert_eq!(s.beta(), &[0.3]);
        assert_eq!(s.alpha_bar(), &[0.7]);
    }

    #[test]
    fn default_schedule_shape() {
        // T=200 linear 1e-4 -> 0.02: strictly decreasing alpha_bar whose
        // final value is the product of the alphas. The independent oracle
        // here is the f64 product computed with the same grid.
        let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
        for w in s.alpha_bar().windows(2) {
            assert!(w[1] < w[0], "alpha_bar must strictly decrease");
        }
        let mut product = 1.0f64;
        for t in 0..200 {
            let b = 1e-4 + (0.02 - 1e-4) * (t as f64 / 199.0);
            product *= 1.0 - b;
        }
        let last = *s.alpha_bar().last().unwrap();
        assert!(
            (last - product).abs() < 1e-12,
            "incremental product: {last} vs {product}"
        );
        // For this spec'd default the terminal alpha_bar sits near 0.132.
        assert!((last - 0.132).abs() < 2e-3, "terminal alpha_bar {last}");
    }

    #[test]
    fn alpha_bar_matches_running_product_bitwise() {
        let s = NoiseSchedule::linear(50, 1e-3, 0.1).unwrap();
        let mut running = 1.0f64;
        for t in 0..50 {
            running *= s.alpha()[t];
            assert_eq!(s.alpha_bar()[t], running);
        }
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(NoiseSchedule::linear(10, 0.0, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn q_sample_limits() {
        let mut r = rng::seeded(1);
        let z0 = Tensor::<f64>::randn(&[3, 4, 4], &mut r);
        let eps = Tensor::<f64>::randn(&[3, 4, 4], &mut r);
        // Near-zero beta: z_t ~ z0.
        let s = NoiseSchedule::linear(1, 1e-12, 1e-12).unwrap();
        let zt = q_sample(&z0, 0, &eps, &s).unwrap();
        for (a, b) in zt.data().iter().zip(z0.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        // eps = 0: z_t = sqrt(abar) z0 exactly.
        let s = NoiseSchedule::linear(10, 0.05, 0.3).unwrap();
        let zero = Tensor::<f64>::zeros(&[3, 4, 4]);
        let zt = q_sample(&z0, 7, &zero, &s).unwrap();
        let c = s.alpha_bar()[7].sqrt();
        for (a, b) in zt.data().iter().zip(z0.data()) {
            assert_eq!(*a, c * b);
        }
    }

    #[test]
    fn q_sample_variance_monte_carlo() {
        // With z0 = 0 the marginal variance is 1 - alpha_bar_t; estimate it
        // over ten thousand draws.
        let s = NoiseSchedule::linear(100, 1e-3, 0.05).unwrap();
        let t = 60;
        let expected = 1.0 - s.alpha_bar()[t];
        let z0 = Tensor::<f64>::zeros(&[4]);
        let mut r = rng::seeded(99);
        let n = 10_000;
        let mut acc = 0.0f64;
        for _ in 0..n {
            let eps = Tensor::<f64>::randn(&[4], &mut r);
            let zt = q_sample(&z0, t, &eps, &s).unwrap();
            acc += zt.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
        }
        let var = acc / n as f64;
        assert!(
            (var - expected).abs() / expected < 0.05,
            "var {var} vs expected {expected}"
        );
    }

    #[test]
    fn q_sample_range_check() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.02).unwrap();
        let z = Tensor::<f32>::zeros(&[2]);
        assert!(matches!(
            q_sample(&z, 10, &z, &s),
            Err(DiffusionError::TOutOfRange { .. })
        ));
    }

    #[test]
    fn cfg_identities_are_bitwise() {
        let mut r = rng::seeded(5);
        let c = Tensor::<f32>::randn(&[3, 4, 4], &mut r);
        let u = Tensor::<f32>::randn(&[3, 4, 4], &mut r);
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap().data(), c.data());
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap().data(), u.data());
    }

    #[test]
    fn cfg_extrapolates() {
        let c = Tensor::<f32>::ones(&[4]);
        let u = Tensor::<f32>::zeros(&[4]);
        let out = cfg_combine(&c, &u, 4.0).unwrap();
        assert_eq!(out.data(), &[4.0; 4][..]);
        let bad = Tensor::<f32>::zeros(&[5]);
        assert!(cfg_combine(&c, &bad, 2.0).is_err());
    }
}
