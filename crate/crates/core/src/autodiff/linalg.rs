//! Plain dense kernels on row-major slices. The tape builds on these, and
//! inference paths that need no gradients call them directly.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Smallest pivot magnitude accepted by [`lu_factor`].
pub const PIVOT_EPS: f64 = 1e-12;

/// `out = a (m×k) · b (k×n)`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out = a (m×n) · bᵀ` where `b` is `k×n`; result is `m×k`.
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let ar = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let br = &b[j * n..(j + 1) * n];
            let mut s = 0.0;
            for (x, y) in ar.iter().zip(br) {
                s += x * y;
            }
            out[i * k + j] = s;
        }
    }
    out
}

/// `out = aᵀ · g` where `a` is `m×k` and `g` is `m×n`; result is `k×n`.
pub fn matmul_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let gr = &g[i * n..(i + 1) * n];
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(gr) {
                *o += av * gv;
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// In-place `x += bias` per row.
pub fn add_bias_rows(x: &mut [f64], bias: &[f64]) {
    let n = bias.len();
    for row in x.chunks_exact_mut(n) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub fn relu_in_place(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Partial-pivot LU factorisation of an `n×n` matrix.
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
}

pub fn lu_factor(a: &[f64], n: usize) -> Result<Lu> {
    let mut lu = a.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut sign = 1.0;
    for col in 0..n {
        let mut piv = col;
        let mut best = libm::fabs(lu[col * n + col]);
        for r in col + 1..n {
            let v = libm::fabs(lu[r * n + col]);
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best < PIVOT_EPS {
            return Err(Error::SingularMatrix { pivot: best });
        }
        if piv != col {
            for c in 0..n {
                lu.swap(col * n + c, piv * n + c);
            }
            perm.swap(col, piv);
            sign = -sign;
        }
        let d = lu[col * n + col];
        for r in col + 1..n {
            let f = lu[r * n + col] / d;
            lu[r * n + col] = f;
            if f != 0.0 {
                for c in col + 1..n {
                    lu[r * n + c] -= f * lu[col * n + c];
                }
            }
        }
    }
    Ok(Lu { n, lu, perm, sign })
}

impl Lu {
    /// Solve `A x = b` for an `n×m` right-hand side.
    pub fn solve(&self, b: &[f64], m: usize) -> Vec<f64> {
        let n = self.n;
        let mut x = vec![0.0; n * m];
        for (i, &p) in self.perm.iter().enumerate() {
            x[i * m..(i + 1) * m].copy_from_slice(&b[p * m..(p + 1) * m]);
        }
        // forward substitution, unit lower
        for i in 0..n {
            for k in 0..i {
                let f = self.lu[i * n + k];
                if f != 0.0 {
                    for c in 0..m {
                        x[i * m + c] -= f * x[k * m + c];
                    }
                }
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let f = self.lu[i * n + k];
                if f != 0.0 {
                    for c in 0..m {
                        x[i * m + c] -= f * x[k * m + c];
                    }
                }
            }
            let d = self.lu[i * n + i];
            for c in 0..m {
                x[i * m + c] /= d;
            }
        }
        x
    }

    /// Solve `Aᵀ x = b` for an `n×m` right-hand side.
    pub fn solve_transposed(&self, b: &[f64], m: usize) -> Vec<f64> {
        let n = self.n;
        // Aᵀ = Uᵀ Lᵀ P, so solve Uᵀ w = b, Lᵀ u = w, x = Pᵀ u.
        let mut w = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                let f = self.lu[k * n + i];
                if f != 0.0 {
                    for c in 0..m {
                        w[i * m + c] -= f * w[k * m + c];
                    }
                }
            }
            let d = self.lu[i * n + i];
            for c in 0..m {
                w[i * m + c] /= d;
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let f = self.lu[k * n + i];
                if f != 0.0 {
                    for c in 0..m {
                        w[i * m + c] -= f * w[k * m + c];
                    }
                }
            }
        }
        let mut x = vec![0.0; n * m];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p * m..(p + 1) * m].copy_from_slice(&w[i * m..(i + 1) * m]);
        }
        x
    }

    pub fn determinant(&self) -> f64 {
        let n = self.n;
        (0..n).fold(self.sign, |acc, i| acc * self.lu[i * n + i])
    }
}
