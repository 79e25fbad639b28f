//! Forward and backward passes for the two embedder architectures.

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::mat::{dot, l2_norm, Mat};

use super::{positional_encoding, Arch, DenseLayer, EmbedderModel, Embedding, Params};

fn check_input(model: &EmbedderModel, x: &FeatureMatrix) -> Result<()> {
    if x.dim() != model.config.input_dim {
        return Err(Error::Argument(format!(
            "input dim {} does not match model input_dim {}",
            x.dim(),
            model.config.input_dim
        )));
    }
    Ok(())
}

fn ensure_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite {what}")));
    }
    Ok(())
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect()
}

fn input_as_f64(x: &FeatureMatrix) -> Mat {
    Mat::from_vec(
        x.frames(),
        x.dim(),
        x.data().iter().map(|&v| v as f64).collect(),
    )
}

fn normalize(v: Vec<f64>) -> Result<(Embedding, Vec<f64>, f64)> {
    ensure_finite(&v, "pre-normalization embedding")?;
    let norm = l2_norm(&v);
    if norm < 1e-12 {
        return Err(Error::Numeric(
            "embedding collapsed to zero before normalization".into(),
        ));
    }
    let z: Vec<f64> = v.iter().map(|x| x / norm).collect();
    Ok((Embedding(z), v, norm))
}

pub(super) fn run_forward(model: &EmbedderModel, x: &FeatureMatrix) -> Result<Embedding> {
    match model.config.arch {
        Arch::MeanpoolMlp => Ok(meanpool_forward(model, x)?.embedding),
        Arch::Attn1 => Ok(attn_forward(model, x)?.embedding),
    }
}

pub(super) fn run_backward(
    model: &EmbedderModel,
    x: &FeatureMatrix,
    upstream: &[f64],
) -> Result<Params> {
    if upstream.len() != model.config.embed_dim {
        return Err(Error::Argument(format!(
            "upstream gradient has dim {}, model embeds to {}",
            upstream.len(),
            model.config.embed_dim
        )));
    }
    match model.config.arch {
        Arch::MeanpoolMlp => meanpool_backward(model, x, upstream),
        Arch::Attn1 => attn_backward(model, x, upstream),
    }
}

/// Gradient of `upstream . (v / |v|)` with respect to `v`.
fn normalization_backward(upstream: &[f64], z: &[f64], norm: f64) -> Vec<f64> {
    let g_dot_z = dot(upstream, z);
    upstream
        .iter()
        .zip(z)
        .map(|(g, zi)| (g - g_dot_z * zi) / norm)
        .collect()
}

// ---------------------------------------------------------------------------
// Mean-pool MLP
// ---------------------------------------------------------------------------

struct MeanPoolTrace {
    embedding: Embedding,
    /// Input to each layer: pooled features, then each rectified activation.
    layer_inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre_activations: Vec<Vec<f64>>,
    norm: f64,
}

fn meanpool_layers(model: &EmbedderModel) -> &[DenseLayer] {
    match &model.params {
        Params::MeanPool { layers } => layers,
        Params::Attn { .. } => unreachable!("meanpool pass on attention params"),
    }
}

fn meanpool_forward(model: &EmbedderModel, x: &FeatureMatrix) -> Result<MeanPoolTrace> {
    check_input(model, x)?;
    let layers = meanpool_layers(model);
    let pooled = input_as_f64(x).row_mean();

    let mut layer_inputs = vec![pooled];
    let mut pre_activations = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let h = layer_inputs.last().unwrap();
        let mut a = layer.w.matvec(h);
        for (ai, bi) in a.iter_mut().zip(&layer.b) {
            *ai += bi;
        }
        ensure_finite(&a, "layer activation")?;
        let is_last = i + 1 == layers.len();
        pre_activations.push(a.clone());
        if !is_last {
            layer_inputs.push(relu(&a));
        }
    }
    let (embedding, _, norm) = normalize(pre_activations.last().unwrap().clone())?;
    Ok(MeanPoolTrace {
        embedding,
        layer_inputs,
        pre_activations,
        norm,
    })
}

fn meanpool_backward(
    model: &EmbedderModel,
    x: &FeatureMatrix,
    upstream: &[f64],
) -> Result<Params> {
    let trace = meanpool_forward(model, x)?;
    let layers = meanpool_layers(model);

    let mut grad_layers: Vec<DenseLayer> = layers
        .iter()
        .map(|l| DenseLayer {
            w: Mat::zeros(l.w.rows(), l.w.cols()),
            b: vec![0.0; l.b.len()],
        })
        .collect();

    // through the L2 normalization
    let mut g = normalization_backward(upstream, &trace.embedding, trace.norm);

    for i in (0..layers.len()).rev() {
        let is_last = i + 1 == layers.len();
        if !is_last {
            // rectifier: pass gradient only where the pre-activation was positive
            for (gi, &a) in g.iter_mut().zip(&trace.pre_activations[i]) {
                if a <= 0.0 {
                    *gi = 0.0;
                }
            }
        }
        let input = &trace.layer_inputs[i];
        let gl = &mut grad_layers[i];
        for (r, &gr) in g.iter().enumerate() {
            gl.b[r] = gr;
            let row = gl.w.row_mut(r);
            for (wc, &inp) in row.iter_mut().zip(input) {
                *wc = gr * inp;
            }
        }
        if i > 0 {
            g = layers[i].w.transposed_matvec(&g);
        }
    }
    Ok(Params::MeanPool {
        layers: grad_layers,
    })
}

// ---------------------------------------------------------------------------
// Single-head self-attention
// ---------------------------------------------------------------------------

struct AttnTrace {
    embedding: Embedding,
    /// Input plus positional encoding.
    encoded: Mat,
    queries: Mat,
    keys: Mat,
    values: Mat,
    /// Row-stochastic attention matrix.
    attention: Mat,
    /// Attention output (pre output-projection).
    context: Mat,
    norm: f64,
}

struct AttnWeights<'a> {
    query: &'a Mat,
    key: &'a Mat,
    value: &'a Mat,
    output: &'a Mat,
}

fn attn_weights(model: &EmbedderModel) -> AttnWeights<'_> {
    match &model.params {
        Params::Attn {
            query,
            key,
            value,
            output,
        } => AttnWeights {
            query,
            key,
            value,
            output,
        },
        Params::MeanPool { .. } => unreachable!("attention pass on meanpool params"),
    }
}

fn row_softmax(scores: &Mat) -> Result<Mat> {
    let mut out = Mat::zeros(scores.rows(), scores.cols());
    for t in 0..scores.rows() {
        let row = scores.row(t);
        ensure_finite(row, "attention scores")?;
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&s| (s - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let orow = out.row_mut(t);
        for (o, e) in orow.iter_mut().zip(exps) {
            *o = e / sum;
        }
    }
    Ok(out)
}

fn attn_forward(model: &EmbedderModel, x: &FeatureMatrix) -> Result<AttnTrace> {
    check_input(model, x)?;
    let w = attn_weights(model);
    let pe = positional_encoding(x.frames(), x.dim())?;
    let mut encoded = input_as_f64(x);
    for (e, p) in encoded.data_mut().iter_mut().zip(pe.data()) {
        *e += p;
    }

    let queries = encoded.matmul(w.query);
    let keys = encoded.matmul(w.key);
    let values = encoded.matmul(w.value);

    let scale = 1.0 / (model.config.key_dim as f64).sqrt();
    let mut scores = queries.matmul_transposed(&keys);
    for s in scores.data_mut() {
        *s *= scale;
    }
    let attention = row_softmax(&scores)?;
    let context = attention.matmul(&values);
    let projected = context.matmul(w.output);
    let (embedding, _, norm) = normalize(projected.row_mean())?;
    Ok(AttnTrace {
        embedding,
        encoded,
        queries,
        keys,
        values,
        attention,
        context,
        norm,
    })
}

fn attn_backward(model: &EmbedderModel, x: &FeatureMatrix, upstream: &[f64]) -> Result<Params> {
    let trace = attn_forward(model, x)?;
    let w = attn_weights(model);
    let frames = trace.encoded.rows();
    let scale = 1.0 / (model.config.key_dim as f64).sqrt();

    // through normalization, then the temporal mean: every row of the
    // projected output receives g_v / T
    let g_v = normalization_backward(upstream, &trace.embedding, trace.norm);
    let per_row: Vec<f64> = g_v.iter().map(|g| g / frames as f64).collect();

    // output projection: projected = context @ output
    let mut grad_output = Mat::zeros(w.output.rows(), w.output.cols());
    let mut context_sum = vec![0.0; trace.context.cols()];
    for t in 0..frames {
        for (s, &c) in context_sum.iter_mut().zip(trace.context.row(t)) {
            *s += c;
        }
    }
    for (i, &cs) in context_sum.iter().enumerate() {
        let row = grad_output.row_mut(i);
        for (g, &p) in row.iter_mut().zip(&per_row) {
            *g = cs * p;
        }
    }
    // every context row gets the same gradient output @ per_row
    let g_context_row = w.output.matvec(&per_row);
    let mut g_context = Mat::zeros(frames, trace.context.cols());
    for t in 0..frames {
        g_context.row_mut(t).copy_from_slice(&g_context_row);
    }

    // context = attention @ values
    let g_attention = g_context.matmul_transposed(&trace.values);
    let grad_values_ctx = trace.attention.transposed_matmul(&g_context);

    // softmax backward per row: ds = a .* (da - (da . a))
    let mut g_scores = Mat::zeros(frames, frames);
    for t in 0..frames {
        let a_row = trace.attention.row(t);
        let da_row = g_attention.row(t);
        let inner = dot(da_row, a_row);
        let out = g_scores.row_mut(t);
        for ((o, &a), &da) in out.iter_mut().zip(a_row).zip(da_row) {
            *o = a * (da - inner);
        }
    }
    for s in g_scores.data_mut() {
        *s *= scale;
    }

    // scores = queries @ keys^T (already rescaled above)
    let g_queries = g_scores.matmul(&trace.keys);
    let g_keys = g_scores.transposed_matmul(&trace.queries);

    let grad_query = trace.encoded.transposed_matmul(&g_queries);
    let grad_key = trace.encoded.transposed_matmul(&g_keys);
    let grad_value = trace.encoded.transposed_matmul(&grad_values_ctx);

    Ok(Params::Attn {
        query: grad_query,
        key: grad_key,
        value: grad_value,
        output: grad_output,
    })
}

/// The row-stochastic attention matrix for an attn1 model on `x`.
/// Errors for mean-pool models, which have no attention stage.
pub fn attention_weights(model: &EmbedderModel, x: &FeatureMatrix) -> Result<Mat> {
    match model.config.arch {
        Arch::Attn1 => Ok(attn_forward(model, x)?.attention),
        Arch::MeanpoolMlp => Err(Error::Argument(
            "attention weights are only defined for the attn1 architecture".into(),
        )),
    }
}
