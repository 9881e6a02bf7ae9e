//! In-repo neural network core: tensors, reverse-mode tape, optimizer, and
//! weight initialization helpers.

pub mod adam;
pub mod tape;
pub mod tensor;

pub use adam::{clip_grad_norm, Adam};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;

use rand::Rng;

/// Glorot-uniform init for a [rows, cols] weight matrix.
pub fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Tensor::from_vec(rows, cols, data)
}

/// Flattens a list of tensors into one parameter vector.
pub fn flatten(tensors: &[&Tensor]) -> Vec<f64> {
    let mut out = Vec::with_capacity(tensors.iter().map(|t| t.len()).sum());
    for t in tensors {
        out.extend_from_slice(&t.data);
    }
    out
}

/// Writes a flat parameter vector back into tensors of fixed shapes.
pub fn unflatten(flat: &[f64], tensors: &mut [&mut Tensor]) {
    let mut at = 0;
    for t in tensors.iter_mut() {
        let n = t.len();
        t.data.copy_from_slice(&flat[at..at + n]);
        at += n;
    }
    assert_eq!(at, flat.len(), "flat parameter length mismatch");
}
