use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::linalg;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{dim_err, Result};

/// Orthogonal linear map `z = Q h` with `Q` the Cayley transform of the
/// skew matrix built from the strictly lower triangle of `A`:
/// `S = tril(A) − tril(A)ᵀ`, `Q = (I + S)⁻¹ (I − S)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalMap {
    a: Tensor,
}

impl OrthogonalMap {
    /// `A = 0`, so `Q = I`.
    pub fn new(dim: usize) -> Self {
        Self {
            a: Tensor::zeros(vec![dim, dim]),
        }
    }

    pub fn from_param(a: Tensor) -> Result<Self> {
        if a.shape().len() != 2 || a.shape()[0] != a.shape()[1] {
            return Err(dim_err("orthogonal map", format!("parameter of shape {:?} is not square", a.shape())));
        }
        Ok(Self { a })
    }

    pub fn dim(&self) -> usize {
        self.a.rows()
    }

    pub fn param(&self) -> &Tensor {
        &self.a
    }

    pub fn param_mut(&mut self) -> &mut Tensor {
        &mut self.a
    }

    /// `Q` as a plain matrix.
    pub fn materialize(&self) -> Result<Tensor> {
        let n = self.dim();
        let av = self.a.data();
        let mut plus = vec![0.0; n * n];
        let mut minus = vec![0.0; n * n];
        for i in 0..n {
            plus[i * n + i] = 1.0;
            minus[i * n + i] = 1.0;
            for j in 0..i {
                let s = av[i * n + j];
                plus[i * n + j] = s;
                plus[j * n + i] = -s;
                minus[i * n + j] = -s;
                minus[j * n + i] = s;
            }
        }
        let q = linalg::lu_factor(&plus, n)?.solve(&minus, n);
        Tensor::new(vec![n, n], q)
    }

    /// `Q` on the tape as a differentiable function of `a`.
    pub fn tape_q(&self, tape: &mut Tape, a: Var) -> Result<Var> {
        let n = self.dim();
        let eye = tape.constant(n, n, Tensor::identity(n).into_data())?;
        let s = tape.skew_from_lower(a)?;
        let plus = tape.add(eye, s)?;
        let minus = tape.sub(eye, s)?;
        tape.solve(plus, minus)
    }
}

/// Rows of `h` mapped by `Q`: `h · Qᵀ`.
pub(crate) fn rows_times_qt(h: &[f64], q: &Tensor, rows: usize) -> Vec<f64> {
    let n = q.rows();
    linalg::matmul_bt(h, q.data(), rows, n, n)
}

/// Rows of `z` mapped by `Qᵀ`: `z · Q`.
pub(crate) fn rows_times_q(z: &[f64], q: &Tensor, rows: usize) -> Vec<f64> {
    let n = q.rows();
    linalg::matmul(z, q.data(), rows, n, n)
}
