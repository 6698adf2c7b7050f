//! Intrinsic evaluation metrics: PSNR, embedding cosine similarity, a
//! perceptual distance over encoder feature maps, and a Fréchet distance
//! over pooled embeddings.
//!
//! The perceptual and Fréchet metrics use the pipeline's own trained image
//! encoder rather than a pretrained backbone, so reports label them
//! "-analog"; they are comparable within a run, not against published
//! numbers.

use crate::conditioning::{encode_image, encode_image_layers, CondDims, ImageEncoderParams};
use crate::tensor::{Scalar, Tensor, TensorError};
use serde::de::Visitor;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Cond(#[from] crate::conditioning::CondError),
    #[error("need at least {need} samples for {dim}-dim features, got {got}")]
    TooFewSamples { need: usize, got: usize, dim: usize },
}

pub type MetricsResult<T> = Result<T, MetricsError>;

/// Peak signal-to-noise ratio; identical images flag as infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Infinite,
    Db(f64),
}

impl Psnr {
    pub fn db_or(&self, cap: f64) -> f64 {
        match self {
            Psnr::Infinite => cap,
            Psnr::Db(v) => *v,
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Psnr::Infinite)
    }
}

impl Serialize for Psnr {
    fn serialize<Se: Serializer>(&self, s: Se) -> Result<Se::Ok, Se::Error> {
        match self {
            Psnr::Infinite => s.serialize_str("inf"),
            Psnr::Db(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Psnr;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a number of dB or the string \"inf\"")
            }

            fn visit_f64<E: serde::de::Error>(self, v: f64) -> Result<Psnr, E> {
                Ok(Psnr::Db(v))
            }

            fn visit_i64<E: serde::de::Error>(self, v: i64) -> Result<Psnr, E> {
                Ok(Psnr::Db(v as f64))
            }

            fn visit_u64<E: serde::de::Error>(self, v: u64) -> Result<Psnr, E> {
                Ok(Psnr::Db(v as f64))
            }

            fn visit_str<E: serde::de::Error>(self, v: &str) -> Result<Psnr, E> {
                if v == "inf" {
                    Ok(Psnr::Infinite)
                } else {
                    Err(E::custom(format!("unexpected psnr string '{v}'")))
                }
            }
        }
        d.deserialize_any(V)
    }
}

/// `10 log10(max_val^2 / MSE)`, accumulated in f64.
pub fn psnr<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, max_val: f64) -> MetricsResult<Psnr> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(
            "psnr",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        )
        .into());
    }
    let mut acc = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x.to_f64() - y.to_f64();
        acc += d * d;
    }
    let mse = acc / a.numel() as f64;
    if mse == 0.0 {
        return Ok(Psnr::Infinite);
    }
    Ok(Psnr::Db(10.0 * (max_val * max_val / mse).log10()))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Pooled embedding of one image, as f64 features.
pub fn embed<S: Scalar>(
    img: &Tensor<S>,
    enc: &ImageEncoderParams<Tensor<S>>,
    dims: &CondDims,
) -> MetricsResult<Vec<f64>> {
    let (pooled, _) = encode_image(img, enc, dims)?;
    Ok(pooled.data().iter().map(|&v| v.to_f64()).collect())
}

/// Cosine similarity of the pooled embeddings of two images.
pub fn embed_similarity<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    enc: &ImageEncoderParams<Tensor<S>>,
    dims: &CondDims,
) -> MetricsResult<f64> {
    Ok(cosine(&embed(a, enc, dims)?, &embed(b, enc, dims)?))
}

/// Perceptual distance: per encoder stage, channel-unit-normalize the
/// feature vector at every spatial location, take the squared difference,
/// average over space, then average over stages.
pub fn perceptual_distance<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    enc: &ImageEncoderParams<Tensor<S>>,
    dims: &CondDims,
) -> MetricsResult<f64> {
    let la = encode_image_layers(a, enc, dims)?;
    let lb = encode_image_layers(b, enc, dims)?;
    let mut total = 0.0f64;
    for (fa, fb) in la.iter().zip(&lb) {
        let (_, c, h, w) = fa.dims4()?;
        let hw = h * w;
        let mut layer = 0.0f64;
        for pos in 0..hw {
            let va: Vec<f64> = (0..c).map(|ch| fa.data()[ch * hw + pos].to_f64()).collect();
            let vb: Vec<f64> = (0..c).map(|ch| fb.data()[ch * hw + pos].to_f64()).collect();
            let na = va.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-10);
            let nb = vb.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-10);
            layer += va
                .iter()
                .zip(&vb)
                .map(|(x, y)| {
                    let d = x / na - y / nb;
                    d * d
                })
                .sum::<f64>();
        }
        total += layer / hw as f64;
    }
    Ok(total / la.len() as f64)
}

// ── Fréchet distance over pooled features ───────────────────────────

fn mat_mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues and row-major eigenvectors (columns of `v`).
fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    (eig, v)
}

/// `v diag(f(eig)) v^T` for a symmetric eigendecomposition.
fn rebuild(eig: &[f64], v: &[f64], n: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += v[i * n + k] * f(eig[k]) * v[j * n + k];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

fn mean_and_cov(features: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = features.len();
    let d = features[0].len();
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, &x) in mean.iter_mut().zip(f) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    // Unbiased covariance.
    let mut cov = vec![0.0; d * d];
    for f in features {
        for i in 0..d {
            let di = f[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += di * (f[j] - mean[j]);
            }
        }
    }
    for c in cov.iter_mut() {
        *c /= (n - 1) as f64;
    }
    (mean, cov)
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// `||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a^{1/2} S_b S_a^{1/2})^{1/2})`,
/// the symmetric stable form of the covariance cross term. Eigenvalues are
/// clamped at zero; a tiny negative result clamps to zero.
pub fn fid_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> MetricsResult<f64> {
    let d = a.first().map_or(0, |f| f.len());
    for (set, name) in [(a, "a"), (b, "b")] {
        if set.len() < d + 1 {
            let _ = name;
            return Err(MetricsError::TooFewSamples {
                need: d + 1,
                got: set.len(),
                dim: d,
            });
        }
    }
    let (mu_a, cov_a) = mean_and_cov(a);
    let (mu_b, cov_b) = mean_and_cov(b);

    let mean_term: f64 = mu_a
        .iter()
        .zip(&mu_b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let tr_a: f64 = (0..d).map(|i| cov_a[i * d + i]).sum();
    let tr_b: f64 = (0..d).map(|i| cov_b[i * d + i]).sum();

    let (eig_a, v_a) = symmetric_eigen(&cov_a, d);
    let sqrt_a = rebuild(&eig_a, &v_a, d, |l| l.max(0.0).sqrt());
    let inner = mat_mul(&sqrt_a, &mat_mul(&cov_b, &sqrt_a, d), d);
    let (eig_m, _) = symmetric_eigen(&inner, d);
    let tr_sqrt: f64 = eig_m.iter().map(|&l| l.max(0.0).sqrt()).sum();

    let fid = mean_term + tr_a + tr_b - 2.0 * tr_sqrt;
    debug_assert!(fid > -1e-6, "fid fell below the numerical floor: {fid}");
    Ok(fid.max(0.0))
}

/// Fréchet distance between two image sets under the pipeline encoder.
pub fn fid<S: Scalar>(
    set_a: &[Tensor<S>],
    set_b: &[Tensor<S>],
    enc: &ImageEncoderParams<Tensor<S>>,
    dims: &CondDims,
) -> MetricsResult<f64> {
    let fa: MetricsResult<Vec<Vec<f64>>> = set_a.iter().map(|i| embed(i, enc, dims)).collect();
    let fb: MetricsResult<Vec<Vec<f64>>> = set_b.iter().map(|i| embed(i, enc, dims)).collect();
    fid_from_features(&fa?, &fb?)
}

// ── Report schema ───────────────────────────────────────────────────

/// One evaluated target view. `mode` is the conditioning mode letter, or
/// "copy" for the copy-condition baseline rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub scene_id: String,
    pub target_view: usize,
    pub mode: String,
    pub steps: usize,
    pub scale: f64,
    pub psnr: Psnr,
    pub perceptual: f64,
    pub embed_sim: f64,
}

/// Aggregate statistics over the whole evaluated split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: f64,
    pub n_real: usize,
    pub n_generated: usize,
    pub mean_psnr_db: f64,
    pub mean_perceptual: f64,
    pub mean_embed_sim: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub steps: usize,
    pub scale: f64,
    /// One row per held-out target view.
    pub rows: Vec<EvalRow>,
    /// Copy-condition baseline: the condition image scored against each
    /// target, the floor a useful view-synthesis model should beat.
    pub baseline_rows: Vec<EvalRow>,
    pub aggregate: MetricReport,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::init_encoder;
    use crate::rng;
    use crate::scenes::{render_view, CameraPose, Primitive, SceneSpec, Vec3};

    fn dims16() -> CondDims {
        CondDims {
            d_ctx: 12,
            d_embed: 8,
            n_tok: 4,
            resolution: 16,
        }
    }

    fn cube_view(azimuth: f64) -> Tensor<f32> {
        let scene = SceneSpec {
            primitives: vec![Primitive::Cube {
                center: Vec3::new(0.0, 0.0, 0.0),
                half: 0.5,
                albedo: [
                    [0.9, 0.1, 0.1],
                    [0.1, 0.9, 0.1],
                    [0.1, 0.1, 0.9],
                    [0.9, 0.9, 0.1],
                    [0.1, 0.9, 0.9],
                    [0.9, 0.1, 0.9],
                ],
            }],
            light_dir: Vec3::new(0.2, 0.4, 0.9).normalized(),
            background: [0.05, 0.05, 0.05],
        };
        render_view(&scene, &CameraPose::new(2.0, azimuth, 0.2), 16, "t", 0)
            .unwrap()
            .image
    }

    #[test]
    fn psnr_analytic_values() {
        let a = Tensor::<f64>::full(&[3, 4, 4], 0.3);
        assert!(psnr(&a, &a, 1.0).unwrap().is_infinite());

        // MSE exactly-ish 0.01: constant difference of 0.1.
        let b = a.map(|v| v + 0.1);
        match psnr(&a, &b, 1.0).unwrap() {
            Psnr::Db(v) => assert!((v - 20.0).abs() < 1e-9, "psnr {v}"),
            Psnr::Infinite => panic!("finite expected"),
        }

        // MSE = 1 -> 0 dB.
        let zero = Tensor::<f64>::zeros(&[8]);
        let one = Tensor::<f64>::ones(&[8]);
        match psnr(&zero, &one, 1.0).unwrap() {
            Psnr::Db(v) => assert_eq!(v, 0.0),
            Psnr::Infinite => panic!("finite expected"),
        }
    }

    #[test]
    fn psnr_is_symmetric_and_shape_checked() {
        let mut r = rng::seeded(1);
        let a = Tensor::<f32>::randn(&[3, 5, 5], &mut r);
        let b = Tensor::<f32>::randn(&[3, 5, 5], &mut r);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        let c = Tensor::<f32>::randn(&[3, 4, 4], &mut r);
        assert!(psnr(&a, &c, 1.0).is_err());
    }

    #[test]
    fn embedding_similarity_properties() {
        let dims = dims16();
        let mut r = rng::seeded(2);
        let enc = init_encoder::<f32>(&dims, &mut r);
        let front = cube_view(0.0);
        let back = cube_view(std::f64::consts::PI);
        let self_sim = embed_similarity(&front, &front, &enc, &dims).unwrap();
        assert!((self_sim - 1.0).abs() < 1e-6);
        let ab = embed_similarity(&front, &back, &enc, &dims).unwrap();
        let ba = embed_similarity(&back, &front, &enc, &dims).unwrap();
        assert_eq!(ab, ba);
        assert!((-1.0..1.0).contains(&ab), "strictly below 1: {ab}");
    }

    #[test]
    fn perceptual_distance_properties() {
        let dims = dims16();
        let mut r = rng::seeded(3);
        let enc = init_encoder::<f32>(&dims, &mut r);
        let a = cube_view(0.3);
        let b = cube_view(2.5);
        assert_eq!(perceptual_distance(&a, &a, &enc, &dims).unwrap(), 0.0);
        let d_ab = perceptual_distance(&a, &b, &enc, &dims).unwrap();
        let d_ba = perceptual_distance(&b, &a, &enc, &dims).unwrap();
        assert_eq!(d_ab, d_ba);
        assert!(d_ab >= 0.0);
        assert!(d_ab > 0.0, "distinct views should be apart");
    }

    #[test]
    fn jacobi_eigen_reconstructs() {
        let mut r = rng::seeded(4);
        use rand::Rng;
        let n = 6;
        let mut a = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = r.gen_range(-1.0..1.0);
                a[i * n + j] = v;
                a[j * n + i] = v;
            }
        }
        let (eig, v) = symmetric_eigen(&a, n);
        let back = rebuild(&eig, &v, n, |l| l);
        for (x, y) in a.iter().zip(&back) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    /// Feature set with exact sample mean `mu` and exact unbiased
    /// covariance `s * I` in d dims: scaled axis pairs around the mean.
    fn exact_gaussian_fit(d: usize, mu: f64, s: f64) -> Vec<Vec<f64>> {
        // 2d points: mu +- a e_i with a^2 * 2 / (2d - 1) = s.
        let a = (s * (2.0 * d as f64 - 1.0) / 2.0).sqrt();
        let mut out = Vec::new();
        for i in 0..d {
            for sign in [1.0, -1.0] {
                let mut p = vec![mu; d];
                p[i] += sign * a;
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn fid_of_set_with_itself_vanishes() {
        let feats = exact_gaussian_fit(4, 0.3, 1.7);
        let fid = fid_from_features(&feats, &feats).unwrap();
        assert!(fid <= 1e-6, "fid {fid}");
    }

    #[test]
    fn fid_closed_form_mean_shift() {
        // mu_a = 0, mu_b = 1 in both dims, S_a = S_b = I: FID = ||mu||^2 = 2.
        let a = exact_gaussian_fit(2, 0.0, 1.0);
        let b = exact_gaussian_fit(2, 1.0, 1.0);
        let fid = fid_from_features(&a, &b).unwrap();
        assert!((fid - 2.0).abs() < 1e-9, "fid {fid}");
    }

    #[test]
    fn fid_closed_form_covariance_scale() {
        // S_a = 4I, S_b = I, equal means: tr(5I - 2*2I) = 2.
        let a = exact_gaussian_fit(2, 0.0, 4.0);
        let b = exact_gaussian_fit(2, 0.0, 1.0);
        let fid = fid_from_features(&a, &b).unwrap();
        assert!((fid - 2.0).abs() < 1e-9, "fid {fid}");
    }

    #[test]
    fn fid_is_permutation_invariant_and_sample_checked() {
        let mut a = exact_gaussian_fit(3, 0.1, 1.3);
        let b = exact_gaussian_fit(3, 0.4, 0.8);
        let f1 = fid_from_features(&a, &b).unwrap();
        a.reverse();
        let f2 = fid_from_features(&a, &b).unwrap();
        assert!((f1 - f2).abs() < 1e-12);

        let tiny: Vec<Vec<f64>> = a[..2].to_vec();
        assert!(matches!(
            fid_from_features(&tiny, &b),
            Err(MetricsError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn psnr_json_roundtrip() {
        let inf = serde_json::to_string(&Psnr::Infinite).unwrap();
        assert_eq!(inf, "\"inf\"");
        let back: Psnr = serde_json::from_str(&inf).unwrap();
        assert!(back.is_infinite());
        let db = serde_json::to_string(&Psnr::Db(20.0)).unwrap();
        let back: Psnr = serde_json::from_str(&db).unwrap();
        assert_eq!(back, Psnr::Db(20.0));
    }
}
