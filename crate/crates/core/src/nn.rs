//! Parameter bundles shared by the encoder and the UNet.
//!
//! Bundles are generic over their payload: `Linear<Tensor<S>>` stores
//! weights, `Linear<Var>` is the same structure lifted onto a tape. `map`
//! converts between the two; `visit`/`visit_mut` walk leaves in a fixed
//! declaration order under stable dotted names, which is what the optimizer
//! and the checkpoint format key on.

use crate::rng;
use crate::tensor::{Scalar, Tape, Tensor, TensorResult, Var};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Linear<P> {
    pub w: P,
    pub b: P,
}

impl<P> Linear<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Linear<Q> {
        Linear {
            w: f(&self.w),
            b: f(&self.b),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

#[derive(Debug, Clone)]
pub struct Conv<P> {
    pub w: P,
    pub b: P,
}

impl<P> Conv<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Conv<Q> {
        Conv {
            w: f(&self.w),
            b: f(&self.b),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

/// Per-channel scale and shift for group normalization.
#[derive(Debug, Clone)]
pub struct Affine<P> {
    pub gamma: P,
    pub beta: P,
}

impl<P> Affine<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> Affine<Q> {
        Affine {
            gamma: f(&self.gamma),
            beta: f(&self.beta),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }
}

// ── Initializers (biases start at zero) ─────────────────────────────

pub fn randn_scaled<S: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n)
        .map(|_| S::from_f64(rng::normal(rng) * std))
        .collect();
    Tensor::from_vec(shape.to_vec(), data)
        .expect("consistent shape")
        .requires_grad()
}

/// `x [n, d_in] -> [n, d_out]`, Xavier-style scale.
pub fn linear_init<S: Scalar>(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Linear<Tensor<S>> {
    Linear {
        w: randn_scaled(&[d_in, d_out], (1.0 / d_in as f64).sqrt(), rng),
        b: Tensor::zeros(&[d_out]).requires_grad(),
    }
}

pub fn linear_zero<S: Scalar>(d_in: usize, d_out: usize) -> Linear<Tensor<S>> {
    Linear {
        w: Tensor::zeros(&[d_in, d_out]).requires_grad(),
        b: Tensor::zeros(&[d_out]).requires_grad(),
    }
}

/// He-style scale for a `k x k` kernel.
pub fn conv_init<S: Scalar>(
    c_out: usize,
    c_in: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Conv<Tensor<S>> {
    let fan_in = (c_in * k * k) as f64;
    Conv {
        w: randn_scaled(&[c_out, c_in, k, k], (2.0 / fan_in).sqrt(), rng),
        b: Tensor::zeros(&[c_out]).requires_grad(),
    }
}

pub fn conv_zero<S: Scalar>(c_out: usize, c_in: usize, k: usize) -> Conv<Tensor<S>> {
    Conv {
        w: Tensor::zeros(&[c_out, c_in, k, k]).requires_grad(),
        b: Tensor::zeros(&[c_out]).requires_grad(),
    }
}

pub fn affine_init<S: Scalar>(channels: usize) -> Affine<Tensor<S>> {
    Affine {
        gamma: Tensor::ones(&[channels]).requires_grad(),
        beta: Tensor::zeros(&[channels]).requires_grad(),
    }
}

// ── Tape application ────────────────────────────────────────────────

pub fn apply_linear<S: Scalar>(tape: &mut Tape<S>, x: Var, lin: &Linear<Var>) -> TensorResult<Var> {
    let y = tape.matmul(x, lin.w)?;
    tape.add(y, lin.b)
}

pub fn apply_conv<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    conv: &Conv<Var>,
    stride: usize,
    pad: usize,
) -> TensorResult<Var> {
    tape.conv2d(x, conv.w, conv.b, stride, pad)
}

pub fn apply_group_norm<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    affine: &Affine<Var>,
    groups: usize,
) -> TensorResult<Var> {
    tape.group_norm(x, affine.gamma, affine.beta, groups, 1e-5)
}
