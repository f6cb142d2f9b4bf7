//! Dense tensors, a reverse-mode tape and the Adam optimizer.

mod adam;
pub mod linalg;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Matrix product of two tensors, with no gradient tracking.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(a), tape.leaf(b));
    let out = tape.matmul(va, vb)?;
    Ok(tape.to_tensor(out))
}

/// Solve `a · x = b` for `x`, with no gradient tracking.
pub fn gauss_solve(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(a), tape.leaf(b));
    let out = tape.solve(va, vb)?;
    Ok(tape.to_tensor(out))
}

/// Determinant of a square matrix via partial-pivot LU.
pub fn determinant(a: &Tensor) -> Result<f64> {
    let n = a.rows();
    Ok(linalg::lu_factor(a.data(), n)?.determinant())
}
