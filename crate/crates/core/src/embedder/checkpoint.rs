//! Model checkpoint format: a single-line JSON header describing the config
//! and tensor shapes, followed by one FMAT block per parameter tensor in
//! declared order. Tensor values are stored as f32, so loading rounds
//! parameters to f32 precision.

use std::fs;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{encode_fmat_bytes, read_fmat_block};
use crate::mat::Mat;

use super::{init_model, EmbedderConfig, EmbedderModel, Params};

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: EmbedderConfig,
    tensors: Vec<TensorSpec>,
}

#[derive(Serialize, Deserialize)]
struct TensorSpec {
    name: String,
    rows: usize,
    cols: usize,
}

/// Writes a model checkpoint. Parameters are quantized to f32.
pub fn save_checkpoint(model: &EmbedderModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tensors = model.params.tensors();
    let header = CheckpointHeader {
        config: model.config.clone(),
        tensors: tensors
            .iter()
            .map(|(name, rows, cols, _)| TensorSpec {
                name: name.clone(),
                rows: *rows,
                cols: *cols,
            })
            .collect(),
    };
    let mut out = serde_json::to_string(&header)?.into_bytes();
    out.push(b'\n');
    for (_, rows, cols, data) in &tensors {
        let as_f32: Vec<f32> = data.iter().map(|&v| v as f32).collect();
        out.extend_from_slice(&encode_fmat_bytes(*rows, *cols, &as_f32));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Loads a model checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EmbedderModel> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(f);

    let mut header_line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        match reader.read_exact(&mut byte) {
            Ok(()) if byte[0] == b'\n' => break,
            Ok(()) => header_line.push(byte[0]),
            Err(e) => return Err(Error::Truncated(format!("checkpoint header: {e}"))),
        }
    }
    let header: CheckpointHeader = serde_json::from_slice(&header_line)?;

    // template model fixes the expected tensor layout for this config
    let mut model = init_model(&header.config)?;
    let expected = model.params.tensors();
    if expected.len() != header.tensors.len() {
        return Err(Error::Format(format!(
            "checkpoint declares {} tensors, config implies {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    let shapes: Vec<(String, usize, usize)> = expected
        .iter()
        .map(|(n, r, c, _)| (n.clone(), *r, *c))
        .collect();

    let mut loaded: Vec<Mat> = Vec::with_capacity(shapes.len());
    for ((name, rows, cols), spec) in shapes.iter().zip(&header.tensors) {
        if name != &spec.name || *rows != spec.rows || *cols != spec.cols {
            return Err(Error::Format(format!(
                "tensor {name} ({rows}x{cols}) does not match checkpoint {} ({}x{})",
                spec.name, spec.rows, spec.cols
            )));
        }
        let block = read_fmat_block(&mut reader)?;
        if block.frames() != *rows || block.dim() != *cols {
            return Err(Error::Format(format!(
                "tensor {name}: block shape {}x{} mismatches header",
                block.frames(),
                block.dim()
            )));
        }
        loaded.push(Mat::from_vec(
            *rows,
            *cols,
            block.data().iter().map(|&v| v as f64).collect(),
        ));
    }

    set_tensors(&mut model.params, loaded);
    Ok(model)
}

fn set_tensors(params: &mut Params, mats: Vec<Mat>) {
    let mut it = mats.into_iter();
    match params {
        Params::MeanPool { layers } => {
            for layer in layers {
                layer.w = it.next().expect("weight tensor");
                let b = it.next().expect("bias tensor");
                layer.b = b.data().to_vec();
            }
        }
        Params::Attn {
            query,
            key,
            value,
            output,
        } => {
            *query = it.next().expect("query tensor");
            *key = it.next().expect("key tensor");
            *value = it.next().expect("value tensor");
            *output = it.next().expect("output tensor");
        }
    }
}
