//! Conditioning context construction.
//!
//! Three layouts of the context sequence the UNet cross-attends over:
//!
//! - [`Mode::Legacy`] (A): the pooled image embedding and the relative pose
//!   are concatenated horizontally and projected to a single token, so the
//!   context has length 1.
//! - [`Mode::Revamped`] (B): the encoder's patch tokens and a separately
//!   projected pose token are stacked vertically into `n_tok + 1` rows.
//! - [`Mode::MultiView`] (C): per-view contexts for several condition views
//!   concatenated along the sequence axis, provenance tracked per view.
//!
//! The image encoder is a small conv stack trained jointly with the rest of
//! the pipeline; it exposes a pooled vector (used by mode A and the
//! embedding-similarity metric) and a patch-token grid (used by mode B).

use crate::nn::{self, Conv, Linear};
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Encoder stage widths; the third stage emits `d_ctx` channels.
const ENC_C1: usize = 8;
const ENC_C2: usize = 16;
/// Encoder downsampling factor: three stride-2 convolutions.
const ENC_DOWN: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum CondError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("empty view list")]
    EmptyViewList,
    #[error("encoder configured for {expected:?} input, got {got:?}")]
    WrongResolution { expected: Vec<usize>, got: Vec<usize> },
    #[error("n_tok {n_tok} inconsistent with resolution {resolution} (expected {expected})")]
    TokenCount {
        n_tok: usize,
        resolution: usize,
        expected: usize,
    },
}

pub type CondResult<T> = Result<T, CondError>;

/// Context layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Single projected token (mode A).
    #[serde(rename = "a")]
    Legacy,
    /// Image tokens + pose token sequence (mode B).
    #[serde(rename = "b")]
    Revamped,
    /// Concatenated per-view contexts (mode C).
    #[serde(rename = "c")]
    MultiView,
}

impl Mode {
    pub fn letter(self) -> char {
        match self {
            Mode::Legacy => 'a',
            Mode::Revamped => 'b',
            Mode::MultiView => 'c',
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "a" | "legacy" => Ok(Mode::Legacy),
            "b" | "revamped" => Ok(Mode::Revamped),
            "c" | "multiview" => Ok(Mode::MultiView),
            other => Err(format!("unknown mode '{other}' (expected a, b or c)")),
        }
    }
}

/// Per-view layout inside a multi-view context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerViewMode {
    #[serde(rename = "a")]
    Legacy,
    #[serde(rename = "b")]
    Revamped,
}

/// Context dimensions, fixed by configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CondDims {
    pub d_ctx: usize,
    pub d_embed: usize,
    pub n_tok: usize,
    pub resolution: usize,
}

impl CondDims {
    /// Token count is tied to the encoder geometry: three stride-2 stages
    /// leave a `(resolution/8)^2` grid.
    pub fn expected_n_tok(resolution: usize) -> usize {
        let g = resolution / ENC_DOWN;
        g * g
    }

    pub fn validate(&self) -> CondResult<()> {
        let expected = Self::expected_n_tok(self.resolution);
        if self.n_tok != expected {
            return Err(CondError::TokenCount {
                n_tok: self.n_tok,
                resolution: self.resolution,
                expected,
            });
        }
        Ok(())
    }

    /// Context length of a single-view context in the given per-view layout.
    pub fn view_len(&self, per_view: PerViewMode) -> usize {
        match per_view {
            PerViewMode::Legacy => 1,
            PerViewMode::Revamped => self.n_tok + 1,
        }
    }
}

/// Which token rows came from which condition view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewSpan {
    pub view: usize,
    pub start: usize,
    pub end: usize,
}

/// The `L x d_ctx` token matrix the UNet cross-attends over.
#[derive(Debug, Clone)]
pub struct ContextSequence<S: Scalar = f32> {
    pub tokens: Tensor<S>,
    pub mode: Mode,
    pub provenance: Vec<ViewSpan>,
}

impl<S: Scalar> ContextSequence<S> {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false // invariant: L >= 1
    }
}

/// Same structure while under construction on a tape.
#[derive(Debug, Clone)]
pub struct CtxVars {
    pub tokens: Var,
    pub mode: Mode,
    pub provenance: Vec<ViewSpan>,
}

// ── Parameters ──────────────────────────────────────────────────────

/// Conv stack producing a pooled embedding and a patch-token grid.
#[derive(Debug, Clone)]
pub struct ImageEncoderParams<P> {
    pub conv1: Conv<P>,
    pub conv2: Conv<P>,
    pub conv3: Conv<P>,
    pub pool: Linear<P>,
}

impl<P> ImageEncoderParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> ImageEncoderParams<Q> {
        ImageEncoderParams {
            conv1: self.conv1.map(f),
            conv2: self.conv2.map(f),
            conv3: self.conv3.map(f),
            pool: self.pool.map(f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        self.conv3.visit(&format!("{prefix}.conv3"), f);
        self.pool.visit(&format!("{prefix}.pool"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        self.conv1.visit_mut(&format!("{prefix}.conv1"), f);
        self.conv2.visit_mut(&format!("{prefix}.conv2"), f);
        self.conv3.visit_mut(&format!("{prefix}.conv3"), f);
        self.pool.visit_mut(&format!("{prefix}.pool"), f);
    }
}

pub fn init_encoder<S: Scalar>(dims: &CondDims, rng: &mut impl Rng) -> ImageEncoderParams<Tensor<S>> {
    ImageEncoderParams {
        conv1: nn::conv_init(ENC_C1, 3, 3, rng),
        conv2: nn::conv_init(ENC_C2, ENC_C1, 3, rng),
        conv3: nn::conv_init(dims.d_ctx, ENC_C2, 3, rng),
        pool: nn::linear_init(dims.d_ctx, dims.d_embed, rng),
    }
}

/// Projections that turn encoder outputs and pose features into context
/// tokens, plus the learned null tokens used for classifier-free guidance.
#[derive(Debug, Clone)]
pub struct ProjectionParams<P> {
    /// `(d_embed + 4) -> d_ctx`, the legacy combined projection.
    pub legacy: Linear<P>,
    /// `4 -> d_ctx`, the pose token projection of the revamped layout.
    pub pose: Linear<P>,
    /// Learned unconditional token for mode A, `[1, d_ctx]`.
    pub null_legacy: P,
    /// Learned unconditional rows for mode B, `[n_tok + 1, d_ctx]`.
    pub null_revamped: P,
}

impl<P> ProjectionParams<P> {
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> ProjectionParams<Q> {
        ProjectionParams {
            legacy: self.legacy.map(f),
            pose: self.pose.map(f),
            null_legacy: f(&self.null_legacy),
            null_revamped: f(&self.null_revamped),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a P)) {
        self.legacy.visit(&format!("{prefix}.legacy"), f);
        self.pose.visit(&format!("{prefix}.pose"), f);
        f(format!("{prefix}.null_legacy"), &self.null_legacy);
        f(format!("{prefix}.null_revamped"), &self.null_revamped);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        self.legacy.visit_mut(&format!("{prefix}.legacy"), f);
        self.pose.visit_mut(&format!("{prefix}.pose"), f);
        f(format!("{prefix}.null_legacy"), &mut self.null_legacy);
        f(format!("{prefix}.null_revamped"), &mut self.null_revamped);
    }
}

/// Rank of the 4-row pose block of the legacy projection, via the Gram
/// determinant. Distinct poses map to distinct tokens iff this is full.
pub fn pose_block_full_rank<S: Scalar>(legacy_w: &Tensor<S>, d_embed: usize) -> bool {
    let (rows, d_ctx) = match legacy_w.shape() {
        [r, c] => (*r, *c),
        _ => return false,
    };
    if rows != d_embed + 4 {
        return false;
    }
    let block: Vec<f64> = legacy_w.data()[d_embed * d_ctx..]
        .iter()
        .map(|&v| v.to_f64())
        .collect();
    let mut gram = [[0.0f64; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            gram[i][j] = (0..d_ctx)
                .map(|k| block[i * d_ctx + k] * block[j * d_ctx + k])
                .sum();
        }
    }
    // Gaussian elimination determinant of the 4x4 Gram matrix.
    let mut det = 1.0f64;
    for col in 0..4 {
        let pivot = (col..4)
            .max_by(|&a, &b| gram[a][col].abs().total_cmp(&gram[b][col].abs()))
            .unwrap();
        if gram[pivot][col].abs() < 1e-12 {
            return false;
        }
        if pivot != col {
            gram.swap(pivot, col);
            det = -det;
        }
        det *= gram[col][col];
        for row in col + 1..4 {
            let f = gram[row][col] / gram[col][col];
            for k in col..4 {
                gram[row][k] -= f * gram[col][k];
            }
        }
    }
    det.abs() > 1e-12
}

pub fn init_projections<S: Scalar>(dims: &CondDims, rng: &mut impl Rng) -> ProjectionParams<Tensor<S>> {
    let legacy = nn::linear_init(dims.d_embed + 4, dims.d_ctx, rng);
    assert!(
        pose_block_full_rank(&legacy.w, dims.d_embed),
        "legacy projection initialized with a rank-deficient pose block"
    );
    ProjectionParams {
        legacy,
        pose: nn::linear_init(4, dims.d_ctx, rng),
        null_legacy: nn::randn_scaled(&[1, dims.d_ctx], 0.02, rng),
        null_revamped: nn::randn_scaled(&[dims.n_tok + 1, dims.d_ctx], 0.02, rng),
    }
}

// ── Tape-level builders ─────────────────────────────────────────────

/// Encoder activations on a tape: pooled `[1, d_embed]`, patch tokens
/// `[n_tok, d_ctx]`, and the three post-activation feature maps.
pub struct EncodedImage {
    pub pooled: Var,
    pub tokens: Var,
    pub layers: [Var; 3],
}

pub fn encode_image_vars<S: Scalar>(
    tape: &mut Tape<S>,
    img: Var,
    enc: &ImageEncoderParams<Var>,
    dims: &CondDims,
) -> CondResult<EncodedImage> {
    let r = dims.resolution;
    let got = tape.value(img).shape().to_vec();
    if got != [3, r, r] {
        return Err(CondError::WrongResolution {
            expected: vec![3, r, r],
            got,
        });
    }
    let x = tape.reshape(img, vec![1, 3, r, r])?;
    let c1 = nn::apply_conv(tape, x, &enc.conv1, 2, 1)?;
    let a1 = tape.silu(c1);
    let c2 = nn::apply_conv(tape, a1, &enc.conv2, 2, 1)?;
    let a2 = tape.silu(c2);
    let c3 = nn::apply_conv(tape, a2, &enc.conv3, 2, 1)?;
    let a3 = tape.silu(c3);
    let g = r / ENC_DOWN;
    let flat = tape.reshape(a3, vec![dims.d_ctx, g * g])?;
    let tokens = tape.transpose(flat)?; // [n_tok, d_ctx]
    let mean = tape.mean_rows(tokens)?;
    let mean_row = tape.reshape(mean, vec![1, dims.d_ctx])?;
    let pooled = nn::apply_linear(tape, mean_row, &enc.pool)?;
    Ok(EncodedImage {
        pooled,
        tokens,
        layers: [a1, a2, a3],
    })
}

fn pose_leaf<S: Scalar>(tape: &mut Tape<S>, rel_pose: &[f64; 4]) -> Var {
    let data: Vec<S> = rel_pose.iter().map(|&v| S::from_f64(v)).collect();
    tape.constant(Tensor::from_vec(vec![1, 4], data).expect("pose feature shape"))
}

/// Mode A: `token = legacy(concat_h(pooled, pose))`, context length 1.
pub fn build_context_legacy_vars<S: Scalar>(
    tape: &mut Tape<S>,
    img: Var,
    rel_pose: &[f64; 4],
    enc: &ImageEncoderParams<Var>,
    proj: &ProjectionParams<Var>,
    dims: &CondDims,
) -> CondResult<CtxVars> {
    let encoded = encode_image_vars(tape, img, enc, dims)?;
    let pose = pose_leaf(tape, rel_pose);
    // Horizontal concatenation via the row axis of the transposed pieces.
    let pooled_col = tape.transpose(encoded.pooled)?; // [d_embed, 1]
    let pose_col = tape.transpose(pose)?; // [4, 1]
    let cat_col = tape.concat_rows(&[pooled_col, pose_col])?; // [d_embed+4, 1]
    let cat = tape.transpose(cat_col)?; // [1, d_embed+4]
    let token = nn::apply_linear(tape, cat, &proj.legacy)?; // [1, d_ctx]
    Ok(CtxVars {
        tokens: token,
        mode: Mode::Legacy,
        provenance: vec![ViewSpan {
            view: 0,
            start: 0,
            end: 1,
        }],
    })
}

/// Mode B: image patch tokens with a projected pose token appended.
pub fn build_context_revamped_vars<S: Scalar>(
    tape: &mut Tape<S>,
    img: Var,
    rel_pose: &[f64; 4],
    enc: &ImageEncoderParams<Var>,
    proj: &ProjectionParams<Var>,
    dims: &CondDims,
) -> CondResult<CtxVars> {
    let encoded = encode_image_vars(tape, img, enc, dims)?;
    let pose = pose_leaf(tape, rel_pose);
    let pose_token = nn::apply_linear(tape, pose, &proj.pose)?; // [1, d_ctx]
    let tokens = tape.concat_rows(&[encoded.tokens, pose_token])?;
    Ok(CtxVars {
        tokens,
        mode: Mode::Revamped,
        provenance: vec![ViewSpan {
            view: 0,
            start: 0,
            end: dims.n_tok + 1,
        }],
    })
}

/// Mode C: per-view contexts concatenated in input order.
pub fn build_context_multiview_vars<S: Scalar>(
    tape: &mut Tape<S>,
    views: &[(Var, [f64; 4])],
    per_view: PerViewMode,
    enc: &ImageEncoderParams<Var>,
    proj: &ProjectionParams<Var>,
    dims: &CondDims,
) -> CondResult<CtxVars> {
    if views.is_empty() {
        return Err(CondError::EmptyViewList);
    }
    let mut parts = Vec::with_capacity(views.len());
    let mut provenance = Vec::with_capacity(views.len());
    let mut offset = 0usize;
    for (i, (img, pose)) in views.iter().enumerate() {
        let part = match per_view {
            PerViewMode::Legacy => build_context_legacy_vars(tape, *img, pose, enc, proj, dims)?,
            PerViewMode::Revamped => {
                build_context_revamped_vars(tape, *img, pose, enc, proj, dims)?
            }
        };
        let len = dims.view_len(per_view);
        provenance.push(ViewSpan {
            view: i,
            start: offset,
            end: offset + len,
        });
        offset += len;
        parts.push(part.tokens);
    }
    let tokens = tape.concat_rows(&parts)?;
    Ok(CtxVars {
        tokens,
        mode: Mode::MultiView,
        provenance,
    })
}

/// The learned all-purpose unconditional context for a mode. `n_views` is
/// only meaningful for mode C, where the per-view null block is repeated.
pub fn null_context_vars<S: Scalar>(
    tape: &mut Tape<S>,
    mode: Mode,
    per_view: PerViewMode,
    n_views: usize,
    proj: &ProjectionParams<Var>,
    dims: &CondDims,
) -> CondResult<CtxVars> {
    let per_view_null = |pv: PerViewMode| match pv {
        PerViewMode::Legacy => proj.null_legacy,
        PerViewMode::Revamped => proj.null_revamped,
    };
    match mode {
        Mode::Legacy => Ok(CtxVars {
            tokens: proj.null_legacy,
            mode,
            provenance: vec![ViewSpan {
                view: 0,
                start: 0,
                end: 1,
            }],
        }),
        Mode::Revamped => Ok(CtxVars {
            tokens: proj.null_revamped,
            mode,
            provenance: vec![ViewSpan {
                view: 0,
                start: 0,
                end: dims.n_tok + 1,
            }],
        }),
        Mode::MultiView => {
            let block = per_view_null(per_view);
            let len = dims.view_len(per_view);
            let parts = vec![block; n_views.max(1)];
            let tokens = tape.concat_rows(&parts)?;
            let provenance = (0..n_views.max(1))
                .map(|i| ViewSpan {
                    view: i,
                    start: i * len,
                    end: (i + 1) * len,
                })
                .collect();
            Ok(CtxVars {
                tokens,
                mode,
                provenance,
            })
        }
    }
}

// ── Plain-tensor wrappers ───────────────────────────────────────────
//
// The wrappers run the same tape builders on a throwaway tape, so there is
// exactly one implementation of each layout.

pub fn lift_encoder<S: Scalar>(
    tape: &mut Tape<S>,
    enc: &ImageEncoderParams<Tensor<S>>,
    trainable: bool,
) -> ImageEncoderParams<Var> {
    enc.map(&mut |t| {
        if trainable {
            tape.leaf(t.clone())
        } else {
            tape.constant(t.clone())
        }
    })
}

pub fn lift_projections<S: Scalar>(
    tape: &mut Tape<S>,
    proj: &ProjectionParams<Tensor<S>>,
    trainable: bool,
) -> ProjectionParams<Var> {
    proj.map(&mut |t| {
        if trainable {
            tape.leaf(t.clone())
        } else {
            tape.constant(t.clone())
        }
    })
}

fn extract_ctx<S: Scalar>(tape: &Tape<S>, ctx: CtxVars) -> ContextSequence<S> {
    ContextSequence {
        tokens: tape.value(ctx.tokens).clone(),
        mode: ctx.mode,
        provenance: ctx.provenance,
    }
}

/// Pooled embedding `[d_embed]` and patch tokens `[n_tok, d_ctx]` of one
/// image. Deterministic given the parameters.
pub fn encode_image<S: Scalar>(
    img: &Tensor<S>,
    enc: &ImageEncoderParams<Tensor<S>>,
    dims: &CondDims,
) -> CondResult<(Tensor<S>, Tensor<S>)> {
    let mut tape = Tape::new();
    let iv = tape.constant(img.clone());
    let lifted = lift_encoder(&mut tape, enc, false);
    let encoded = encode_image_vars(&mut tape, iv, &lifted, dims)?;
    let pooled = tape
        .value(encoded.pooled)
        .clone()
        .reshaped(vec![dims.d_embed])?;
    Ok((pooled, tape.value(encoded.tokens).clone()))
}

/// Per-stage feature maps of the encoder, for the perceptual metric.
pub fn encode_image_layers<S: Scalar>(
    img: &Tensor<S>,
    enc: &ImageEncoderParams<Tensor<S>>,
    dims: &CondDims,
) -> CondResult<Vec<Tensor<S>>> {
    let mut tape = Tape::new();
    let iv = tape.constant(img.clone());
    let lifted = lift_encoder(&mut tape, enc, false);
    let encoded = encode_image_vars(&mut tape, iv, &lifted, dims)?;
    Ok(encoded
        .layers
        .iter()
        .map(|&v| tape.value(v).clone())
        .collect())
}

pub fn build_context_legacy<S: Scalar>(
    img: &Tensor<S>,
    rel_pose: &[f64; 4],
    enc: &ImageEncoderParams<Tensor<S>>,
    proj: &ProjectionParams<Tensor<S>>,
    dims: &CondDims,
) -> CondResult<ContextSequence<S>> {
    let mut tape = Tape::new();
    let iv = tape.constant(img.clone());
    let (e, p) = (
        lift_encoder(&mut tape, enc, false),
        lift_projections(&mut tape, proj, false),
    );
    let ctx = build_context_legacy_vars(&mut tape, iv, rel_pose, &e, &p, dims)?;
    Ok(extract_ctx(&tape, ctx))
}

pub fn build_context_revamped<S: Scalar>(
    img: &Tensor<S>,
    rel_pose: &[f64; 4],
    enc: &ImageEncoderParams<Tensor<S>>,
    proj: &ProjectionParams<Tensor<S>>,
    dims: &CondDims,
) -> CondResult<ContextSequence<S>> {
    let mut tape = Tape::new();
    let iv = tape.constant(img.clone());
    let (e, p) = (
        lift_encoder(&mut tape, enc, false),
        lift_projections(&mut tape, proj, false),
    );
    let ctx = build_context_revamped_vars(&mut tape, iv, rel_pose, &e, &p, dims)?;
    Ok(extract_ctx(&tape, ctx))
}

pub fn build_context_multiview<S: Scalar>(
    views: &[(&Tensor<S>, [f64; 4])],
    per_view: PerViewMode,
    enc: &ImageEncoderParams<Tensor<S>>,
    proj: &ProjectionParams<Tensor<S>>,
    dims: &CondDims,
) -> CondResult<ContextSequence<S>> {
    let mut tape = Tape::new();
    let vars: Vec<(Var, [f64; 4])> = views
        .iter()
        .map(|(img, pose)| (tape.constant((*img).clone()), *pose))
        .collect();
    let (e, p) = (
        lift_encoder(&mut tape, enc, false),
        lift_projections(&mut tape, proj, false),
    );
    let ctx = build_context_multiview_vars(&mut tape, &vars, per_view, &e, &p, dims)?;
    Ok(extract_ctx(&tape, ctx))
}

pub fn null_context<S: Scalar>(
    mode: Mode,
    per_view: PerViewMode,
    n_views: usize,
    proj: &ProjectionParams<Tensor<S>>,
    dims: &CondDims,
) -> CondResult<ContextSequence<S>> {
    let mut tape = Tape::new();
    let p = lift_projections(&mut tape, proj, false);
    let ctx = null_context_vars(&mut tape, mode, per_view, n_views, &p, dims)?;
    Ok(extract_ctx(&tape, ctx))
}
