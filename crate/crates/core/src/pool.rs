//! 2×2, stride-2 max pooling with argmax routing for the backward pass.
//!
//! Odd trailing rows and columns are dropped.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const POOL_WINDOW: usize = 2;

/// Flat input offset of the maximum picked for every output element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArgmaxMap {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    indices: Vec<usize>,
}

impl ArgmaxMap {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

pub fn pooled_extent(input: usize) -> Result<usize> {
    if input < POOL_WINDOW {
        return Err(Error::config(format!(
            "extent {input} is smaller than the {POOL_WINDOW}x{POOL_WINDOW} pooling window"
        )));
    }
    Ok(input / POOL_WINDOW)
}

pub fn maxpool2d_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, ArgmaxMap)> {
    let [h, w, c] = *input.shape() else {
        return Err(Error::config(format!(
            "pooling input must be H×W×C, got {:?}",
            input.shape()
        )));
    };
    let (oh, ow) = (pooled_extent(h)?, pooled_extent(w)?);
    input.ensure_finite("pooling input")?;
    let x = input.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut indices = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best_idx = ((2 * oy) * w + 2 * ox) * c + ch;
                let mut best = x[best_idx];
                // scan order: row-major within the window, first maximum wins
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                indices.push(best_idx);
            }
        }
    }
    let output_shape = vec![oh, ow, c];
    Ok((
        Tensor::new(output_shape.clone(), out)?,
        ArgmaxMap {
            input_shape: input.shape().to_vec(),
            output_shape,
            indices,
        },
    ))
}

pub fn maxpool2d_backward<T: Scalar>(
    argmax: &ArgmaxMap,
    upstream: &Tensor<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if argmax.input_shape != input_shape {
        return Err(Error::config(format!(
            "argmax map was recorded for input {:?}, not {input_shape:?}",
            argmax.input_shape
        )));
    }
    if upstream.shape() != argmax.output_shape.as_slice() {
        return Err(Error::config(format!(
            "upstream gradient shape {:?} does not match pooled output {:?}",
            upstream.shape(),
            argmax.output_shape
        )));
    }
    let mut grad = Tensor::zeros(input_shape);
    let g = grad.data_mut();
    for (&idx, &u) in argmax.indices.iter().zip(upstream.data()) {
        g[idx] = g[idx] + u;
    }
    Ok(grad)
}
