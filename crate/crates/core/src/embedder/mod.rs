//! Segment embedders: map a `frames x dim` feature matrix to a unit-norm
//! embedding with exact analytic gradients.
//!
//! Two reference architectures are provided behind one interface:
//! a mean-pooling MLP and a single-head self-attention layer with sinusoidal
//! positional encoding. Both are small enough to verify end-to-end against
//! central finite differences.

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::attention_weights;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::mat::{dot, l2_norm, Mat};

/// Embedder architecture selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Temporal mean of frames through an MLP.
    MeanpoolMlp,
    /// Single-head scaled dot-product self-attention with positional encoding.
    Attn1,
}

/// Embedder hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub arch: Arch,
    pub input_dim: usize,
    /// Hidden layer widths (meanpool_mlp only).
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    /// Query/key/value projection width (attn1 only).
    #[serde(default = "default_key_dim")]
    pub key_dim: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_hidden() -> Vec<usize> {
    vec![64]
}

fn default_embed_dim() -> usize {
    32
}

fn default_key_dim() -> usize {
    16
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            arch: Arch::MeanpoolMlp,
            input_dim: crate::features::DEFAULT_DIM,
            hidden: default_hidden(),
            embed_dim: default_embed_dim(),
            key_dim: default_key_dim(),
            seed: 0,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 {
            return Err(Error::Argument(format!(
                "embed_dim must be >= 2, got {}",
                self.embed_dim
            )));
        }
        if self.input_dim == 0 {
            return Err(Error::Argument("input_dim must be >= 1".into()));
        }
        match self.arch {
            Arch::MeanpoolMlp => {
                if self.hidden.is_empty() {
                    return Err(Error::Argument(
                        "meanpool_mlp needs at least one hidden layer".into(),
                    ));
                }
                if self.hidden.contains(&0) {
                    return Err(Error::Argument("hidden widths must be positive".into()));
                }
            }
            Arch::Attn1 => {
                if !self.input_dim.is_multiple_of(2) || self.input_dim < 2 {
                    return Err(Error::Argument(format!(
                        "attn1 needs an even input_dim >= 2 for positional encoding, got {}",
                        self.input_dim
                    )));
                }
                if self.key_dim == 0 {
                    return Err(Error::Argument("key_dim must be >= 1".into()));
                }
            }
        }
        Ok(())
    }
}

/// Fully-connected layer `y = W h + b`, weights stored (out, in).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub w: Mat,
    pub b: Vec<f64>,
}

/// Parameter tensors of a model. Gradients reuse the same structure.
#[derive(Debug, Clone, PartialEq)]
pub enum Params {
    MeanPool {
        /// Hidden layers (rectified) followed by the final linear layer.
        layers: Vec<DenseLayer>,
    },
    Attn {
        query: Mat,
        key: Mat,
        value: Mat,
        output: Mat,
    },
}

impl Params {
    /// Tensors in declared (checkpoint) order as (name, rows, cols, data).
    pub fn tensors(&self) -> Vec<(String, usize, usize, &[f64])> {
        match self {
            Params::MeanPool { layers } => layers
                .iter()
                .enumerate()
                .flat_map(|(i, l)| {
                    [
                        (format!("layer{i}.w"), l.w.rows(), l.w.cols(), l.w.data()),
                        (format!("layer{i}.b"), l.b.len(), 1, l.b.as_slice()),
                    ]
                })
                .collect(),
            Params::Attn {
                query,
                key,
                value,
                output,
            } => vec![
                ("query".to_string(), query.rows(), query.cols(), query.data()),
                ("key".to_string(), key.rows(), key.cols(), key.data()),
                ("value".to_string(), value.rows(), value.cols(), value.data()),
                (
                    "output".to_string(),
                    output.rows(),
                    output.cols(),
                    output.data(),
                ),
            ],
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Params::MeanPool { layers } => layers
                .iter_mut()
                .flat_map(|l| [l.w.data_mut(), l.b.as_mut_slice()])
                .collect(),
            Params::Attn {
                query,
                key,
                value,
                output,
            } => vec![
                query.data_mut(),
                key.data_mut(),
                value.data_mut(),
                output.data_mut(),
            ],
        }
    }

    /// Total scalar parameter count.
    pub fn len(&self) -> usize {
        self.tensors().iter().map(|(_, r, c, _)| r * c).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattened view in declared tensor order.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|(_, _, _, d)| d.iter().copied())
            .collect()
    }

    pub fn get_flat(&self, idx: usize) -> f64 {
        let mut i = idx;
        for (_, r, c, d) in self.tensors() {
            if i < r * c {
                return d[i];
            }
            i -= r * c;
        }
        panic!("flat index {idx} out of range");
    }

    pub fn set_flat(&mut self, idx: usize, v: f64) {
        let mut i = idx;
        for t in self.tensors_mut() {
            if i < t.len() {
                t[i] = v;
                return;
            }
            i -= t.len();
        }
        panic!("flat index {idx} out of range");
    }

    /// `self += scale * other`, tensor-wise.
    pub fn axpy(&mut self, scale: f64, other: &Params) {
        let other_flat: Vec<&[f64]> = other.tensors().iter().map(|(_, _, _, d)| *d).collect();
        for (mine, theirs) in self.tensors_mut().into_iter().zip(other_flat) {
            for (m, t) in mine.iter_mut().zip(theirs) {
                *m += scale * t;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            for v in t {
                *v *= s;
            }
        }
    }

    pub fn zeros_like(&self) -> Params {
        let mut out = self.clone();
        out.scale(0.0);
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, _, d)| d.iter().all(|v| v.is_finite()))
    }
}

/// An embedder with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderModel {
    pub config: EmbedderConfig,
    pub params: Params,
}

/// A unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Wraps a vector, checking the unit-norm invariant (within 1e-6).
    pub fn new(v: Vec<f64>) -> Result<Self> {
        let n = l2_norm(&v);
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!(
                "embedding norm {n} is not 1 within 1e-6"
            )));
        }
        Ok(Embedding(v))
    }

    /// Normalizes an arbitrary non-zero vector onto the unit sphere.
    pub fn normalized(v: Vec<f64>) -> Result<Self> {
        let n = l2_norm(&v);
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::Numeric(format!(
                "cannot normalize vector with norm {n}"
            )));
        }
        Ok(Embedding(v.into_iter().map(|x| x / n).collect()))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.clone()
    }
}

impl std::ops::Deref for Embedding {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

fn scaled_uniform(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    fan_in: usize,
    fan_out: usize,
) -> Mat {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
    Mat::from_vec(rows, cols, data)
}

/// Initializes a model with scaled-uniform parameters, deterministically
/// from `cfg.seed`. Biases share the layer's scale, which keeps the final
/// pre-normalization vector nonzero even when a rectified layer saturates.
pub fn init_model(cfg: &EmbedderConfig) -> Result<EmbedderModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = match cfg.arch {
        Arch::MeanpoolMlp => {
            let mut layers = Vec::new();
            let mut in_dim = cfg.input_dim;
            for &h in &cfg.hidden {
                let w = scaled_uniform(&mut rng, h, in_dim, in_dim, h);
                let b = scaled_uniform(&mut rng, h, 1, in_dim, h);
                layers.push(DenseLayer {
                    w,
                    b: b.data().to_vec(),
                });
                in_dim = h;
            }
            let w = scaled_uniform(&mut rng, cfg.embed_dim, in_dim, in_dim, cfg.embed_dim);
            let b = scaled_uniform(&mut rng, cfg.embed_dim, 1, in_dim, cfg.embed_dim);
            layers.push(DenseLayer {
                w,
                b: b.data().to_vec(),
            });
            Params::MeanPool { layers }
        }
        Arch::Attn1 => {
            let d = cfg.input_dim;
            let dk = cfg.key_dim;
            let e = cfg.embed_dim;
            Params::Attn {
                query: scaled_uniform(&mut rng, d, dk, d, dk),
                key: scaled_uniform(&mut rng, d, dk, d, dk),
                value: scaled_uniform(&mut rng, d, dk, d, dk),
                output: scaled_uniform(&mut rng, dk, e, dk, e),
            }
        }
    };
    Ok(EmbedderModel {
        config: cfg.clone(),
        params,
    })
}

/// Sinusoidal positional encoding: `pe[t, 2i] = sin(t / 10000^(2i/d))`,
/// `pe[t, 2i+1] = cos(t / 10000^(2i/d))`. Requires even `d >= 2`.
pub fn positional_encoding(frames: usize, dim: usize) -> Result<Mat> {
    if frames == 0 {
        return Err(Error::Argument("positional encoding needs frames >= 1".into()));
    }
    if dim < 2 || !dim.is_multiple_of(2) {
        return Err(Error::Argument(format!(
            "positional encoding needs an even dim >= 2, got {dim}"
        )));
    }
    let mut pe = Mat::zeros(frames, dim);
    for t in 0..frames {
        for i in 0..dim / 2 {
            let rate = (-(2.0 * i as f64 / dim as f64) * 10000f64.ln()).exp();
            let angle = t as f64 * rate;
            pe.set(t, 2 * i, angle.sin());
            pe.set(t, 2 * i + 1, angle.cos());
        }
    }
    Ok(pe)
}

/// Embeds one segment. The output has unit L2 norm (within 1e-6).
pub fn forward(model: &EmbedderModel, x: &FeatureMatrix) -> Result<Embedding> {
    forward::run_forward(model, x)
}

/// Gradient of `upstream . forward(model, x)` with respect to every
/// parameter, including through the L2 normalization (and the softmax
/// attention for attn1).
pub fn backward(model: &EmbedderModel, x: &FeatureMatrix, upstream: &[f64]) -> Result<Params> {
    forward::run_backward(model, x, upstream)
}

/// Finite-difference step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-4;

/// Max relative error between `analytic` and central finite differences of
/// `probe . forward` over all parameters.
pub fn max_relative_error(
    model: &EmbedderModel,
    x: &FeatureMatrix,
    probe: &[f64],
    analytic: &Params,
) -> Result<f64> {
    let mut work = model.clone();
    let mut worst = 0.0f64;
    for i in 0..work.params.len() {
        let orig = work.params.get_flat(i);
        work.params.set_flat(i, orig + GRAD_CHECK_STEP);
        let up = dot(probe, &forward(&work, x)?);
        work.params.set_flat(i, orig - GRAD_CHECK_STEP);
        let down = dot(probe, &forward(&work, x)?);
        work.params.set_flat(i, orig);
        let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
        let a = analytic.get_flat(i);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Compares analytic gradients against central finite differences and
/// returns the max relative error over all parameters.
pub fn grad_check(model: &EmbedderModel, x: &FeatureMatrix, probe: &[f64]) -> Result<f64> {
    let analytic = backward(model, x, probe)?;
    max_relative_error(model, x, probe, &analytic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_input(rng: &mut ChaCha8Rng, frames: usize, dim: usize) -> FeatureMatrix {
        let data: Vec<f32> = (0..frames * dim).map(|_| rng.gen_range(-1.5..1.5)).collect();
        FeatureMatrix::new(frames, dim, data).unwrap()
    }

    fn small_mlp_cfg(seed: u64) -> EmbedderConfig {
        EmbedderConfig {
            arch: Arch::MeanpoolMlp,
            input_dim: 6,
            hidden: vec![5],
            embed_dim: 4,
            key_dim: 3,
            seed,
        }
    }

    fn small_attn_cfg(seed: u64) -> EmbedderConfig {
        EmbedderConfig {
            arch: Arch::Attn1,
            input_dim: 6,
            hidden: vec![],
            embed_dim: 4,
            key_dim: 3,
            seed,
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_model(&small_mlp_cfg(9)).unwrap();
        let b = init_model(&small_mlp_cfg(9)).unwrap();
        assert_eq!(a.params.flat(), b.params.flat());

        let c = init_model(&small_mlp_cfg(10)).unwrap();
        assert_ne!(a.params.flat(), c.params.flat());
    }

    #[test]
    fn embed_dim_one_is_rejected() {
        let mut cfg = small_mlp_cfg(0);
        cfg.embed_dim = 1;
        assert!(matches!(init_model(&cfg), Err(Error::Argument(_))));
    }

    #[test]
    fn meanpool_needs_hidden_layers() {
        let mut cfg = small_mlp_cfg(0);
        cfg.hidden.clear();
        assert!(matches!(init_model(&cfg), Err(Error::Argument(_))));
    }

    #[test]
    fn attn_rejects_odd_input_dim() {
        let mut cfg = small_attn_cfg(0);
        cfg.input_dim = 5;
        assert!(matches!(init_model(&cfg), Err(Error::Argument(_))));
    }

    #[test]
    fn positional_encoding_first_row_and_sin1() {
        let pe = positional_encoding(3, 4).unwrap();
        assert_eq!(pe.get(0, 0), 0.0);
        assert_eq!(pe.get(0, 1), 1.0);
        assert!((pe.get(1, 0) - 1f64.sin()).abs() < 1e-12);
        assert!((pe.get(1, 0) - 0.841471).abs() < 1e-6);
    }

    #[test]
    fn positional_encoding_bounded() {
        let pe = positional_encoding(40, 8).unwrap();
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn positional_encoding_rejects_odd_dim() {
        assert!(matches!(
            positional_encoding(4, 5),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn forward_outputs_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for seed in 0..5 {
            for cfg in [small_mlp_cfg(seed), small_attn_cfg(seed)] {
                let model = init_model(&cfg).unwrap();
                let x = random_input(&mut rng, 7, 6);
                let z = forward(&model, &x).unwrap();
                assert!((l2_norm(&z) - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = init_model(&small_attn_cfg(3)).unwrap();
        let x = random_input(&mut rng, 5, 6);
        assert_eq!(
            forward(&model, &x).unwrap().to_vec(),
            forward(&model, &x).unwrap().to_vec()
        );
    }

    #[test]
    fn forward_rejects_dim_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = init_model(&small_mlp_cfg(3)).unwrap();
        let x = random_input(&mut rng, 5, 4);
        assert!(matches!(forward(&model, &x), Err(Error::Argument(_))));
    }

    #[test]
    fn meanpool_is_permutation_invariant_attn_is_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_input(&mut rng, 6, 6);
        // reversed frame order
        let mut rev = Vec::new();
        for t in (0..6).rev() {
            rev.extend_from_slice(x.frame(t));
        }
        let xr = FeatureMatrix::new(6, 6, rev).unwrap();

        let mlp = init_model(&small_mlp_cfg(4)).unwrap();
        let (z, zr) = (forward(&mlp, &x).unwrap(), forward(&mlp, &xr).unwrap());
        let diff: f64 = z.iter().zip(zr.iter()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff < 1e-6, "meanpool diff {diff}");

        let attn = init_model(&small_attn_cfg(4)).unwrap();
        let (z, zr) = (forward(&attn, &x).unwrap(), forward(&attn, &xr).unwrap());
        let diff: f64 = z.iter().zip(zr.iter()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-6, "attn should be order-sensitive, diff {diff}");
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for cfg in [small_mlp_cfg(1), small_attn_cfg(1)] {
            let model = init_model(&cfg).unwrap();
            let x = random_input(&mut rng, 4, 6);
            let grads = backward(&model, &x, &[0.0; 4]).unwrap();
            assert!(grads.flat().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn grad_check_passes_for_both_architectures() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for seed in 0..5 {
            for cfg in [small_mlp_cfg(seed), small_attn_cfg(seed)] {
                let model = init_model(&cfg).unwrap();
                let x = random_input(&mut rng, 5, 6);
                let probe: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let err = grad_check(&model, &x, &probe).unwrap();
                assert!(err <= 1e-4, "arch {:?} seed {seed}: err {err}", cfg.arch);
            }
        }
    }

    #[test]
    fn corrupted_gradients_are_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = init_model(&small_mlp_cfg(6)).unwrap();
        let x = random_input(&mut rng, 5, 6);
        let probe: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut grads = backward(&model, &x, &probe).unwrap();
        // corrupt the whole gradient path by rescaling
        grads.scale(1.5);
        let err = max_relative_error(&model, &x, &probe, &grads).unwrap();
        assert!(err > 1e-2, "corruption not detected, err {err}");
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model = init_model(&small_attn_cfg(2)).unwrap();
        let x = random_input(&mut rng, 6, 6);
        let a = attention_weights(&model, &x).unwrap();
        for t in 0..a.rows() {
            let s: f64 = a.row(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_frame_attention_collapses_to_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let model = init_model(&small_attn_cfg(7)).unwrap();
        let x = random_input(&mut rng, 1, 6);
        let a = attention_weights(&model, &x).unwrap();
        assert_eq!(a.rows(), 1);
        assert!((a.get(0, 0) - 1.0).abs() < 1e-12);
    }
}
