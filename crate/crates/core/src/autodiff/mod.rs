//! Dense reverse-mode differentiation over `f64` matrices.
//!
//! The operator set is small on purpose: it is what the pre-training and
//! fine-tuning objectives are written in, plus row gather/scatter for message
//! passing over edge lists.

mod optim;
mod tape;
mod tensor;

pub use optim::{AdamState, Parameterized};
pub use tape::{Axis, Gradients, Tape, Var};
pub use tensor::Tensor;

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// `rows×cols` tensor with i.i.d. `N(0, std²)` entries.
pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    let values = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::matrix(rows, cols, values).expect("shape matches")
}
