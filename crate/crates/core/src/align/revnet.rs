use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::linalg;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// `linear → relu → linear` on one half of the channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subnet {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Subnet {
    /// Random first layer; the output layer starts at zero so the subnet
    /// initially outputs zero.
    fn new(half: usize, hidden: usize, r: &mut Rng) -> Result<Self> {
        let bound = 1.0 / libm::sqrt(half as f64);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| r.random_range(-bound..bound)).collect() };
        Ok(Self {
            w1: Tensor::new(vec![half, hidden], draw(half * hidden))?,
            b1: Tensor::new(vec![hidden], draw(hidden))?,
            w2: Tensor::zeros(vec![hidden, half]),
            b2: Tensor::zeros(vec![half]),
        })
    }

    fn half(&self) -> usize {
        self.w1.rows()
    }

    fn hidden(&self) -> usize {
        self.w1.cols()
    }

    fn eval(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let (h, k) = (self.half(), self.hidden());
        let mut a = linalg::matmul(x, self.w1.data(), rows, h, k);
        linalg::add_bias_rows(&mut a, self.b1.data());
        linalg::relu_in_place(&mut a);
        let mut out = linalg::matmul(&a, self.w2.data(), rows, k, h);
        linalg::add_bias_rows(&mut out, self.b2.data());
        out
    }

    fn tape_eval(tape: &mut Tape, vars: &[Var; 4], x: Var) -> Result<Var> {
        let a = tape.matmul(x, vars[0])?;
        let a = tape.add_bias(a, vars[1])?;
        let a = tape.relu(a);
        let o = tape.matmul(a, vars[2])?;
        tape.add_bias(o, vars[3])
    }

    fn params(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Additive coupling block: `y1 = x1 + F(x2)`, `y2 = x2 + G(y1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RevBlock {
    pub f: Subnet,
    pub g: Subnet,
}

/// Stack of coupling blocks on a channel vector split into two halves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RevNetMap {
    dim: usize,
    hidden: usize,
    blocks: Vec<RevBlock>,
}

fn split(x: &[f64], rows: usize, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let h = dim / 2;
    let mut a = Vec::with_capacity(rows * h);
    let mut b = Vec::with_capacity(rows * h);
    for r in x.chunks_exact(dim) {
        a.extend_from_slice(&r[..h]);
        b.extend_from_slice(&r[h..]);
    }
    (a, b)
}

fn join(a: &[f64], b: &[f64], rows: usize, half: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * half * 2);
    for i in 0..rows {
        out.extend_from_slice(&a[i * half..(i + 1) * half]);
        out.extend_from_slice(&b[i * half..(i + 1) * half]);
    }
    out
}

fn add_into(x: &mut [f64], y: &[f64]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

fn sub_into(x: &mut [f64], y: &[f64]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a -= b;
    }
}

impl RevNetMap {
    pub fn new(dim: usize, layers: usize, hidden: usize, r: &mut Rng) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::Config(format!("RevNet needs an even width, got {}", dim)));
        }
        if layers == 0 || hidden == 0 {
            return Err(Error::Config("RevNet needs at least one block and a positive hidden width".into()));
        }
        let half = dim / 2;
        let mut blocks = Vec::with_capacity(layers);
        for _ in 0..layers {
            let f = Subnet::new(half, hidden, r)?;
            let g = Subnet::new(half, hidden, r)?;
            blocks.push(RevBlock { f, g });
        }
        Ok(Self { dim, hidden, blocks })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[RevBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [RevBlock] {
        &mut self.blocks
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.blocks.iter().flat_map(|b| b.f.params().into_iter().chain(b.g.params())).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.blocks
            .iter_mut()
            .flat_map(|b| {
                let RevBlock { f, g } = b;
                f.params_mut().into_iter().chain(g.params_mut())
            })
            .collect()
    }

    pub fn apply_rows(&self, h: &[f64], rows: usize) -> Vec<f64> {
        let (mut x1, mut x2) = split(h, rows, self.dim);
        for b in &self.blocks {
            add_into(&mut x1, &b.f.eval(&x2, rows));
            add_into(&mut x2, &b.g.eval(&x1, rows));
        }
        join(&x1, &x2, rows, self.dim / 2)
    }

    pub fn invert_rows(&self, z: &[f64], rows: usize) -> Vec<f64> {
        let (mut y1, mut y2) = split(z, rows, self.dim);
        for b in self.blocks.iter().rev() {
            sub_into(&mut y2, &b.g.eval(&y1, rows));
            sub_into(&mut y1, &b.f.eval(&y2, rows));
        }
        join(&y1, &y2, rows, self.dim / 2)
    }

    /// Parameter handles per block, `[F.w1, F.b1, F.w2, F.b2, G.w1, …]`.
    pub(crate) fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<[Var; 8]> {
        self.blocks
            .iter()
            .map(|b| {
                let mut out = [Var::default(); 8];
                for (slot, t) in out.iter_mut().zip(b.f.params().into_iter().chain(b.g.params())) {
                    *slot = if trainable { tape.param(t) } else { tape.frozen(t) };
                }
                out
            })
            .collect()
    }

    pub(crate) fn tape_apply(&self, tape: &mut Tape, vars: &[[Var; 8]], h: Var) -> Result<Var> {
        let half = self.dim / 2;
        let mut x1 = tape.slice_cols(h, 0, half)?;
        let mut x2 = tape.slice_cols(h, half, half)?;
        for v in vars {
            let f = Subnet::tape_eval(tape, &[v[0], v[1], v[2], v[3]], x2)?;
            x1 = tape.add(x1, f)?;
            let g = Subnet::tape_eval(tape, &[v[4], v[5], v[6], v[7]], x1)?;
            x2 = tape.add(x2, g)?;
        }
        tape.concat_cols(x1, x2)
    }

    pub(crate) fn tape_invert(&self, tape: &mut Tape, vars: &[[Var; 8]], z: Var) -> Result<Var> {
        let half = self.dim / 2;
        let mut y1 = tape.slice_cols(z, 0, half)?;
        let mut y2 = tape.slice_cols(z, half, half)?;
        for v in vars.iter().rev() {
            let g = Subnet::tape_eval(tape, &[v[4], v[5], v[6], v[7]], y1)?;
            y2 = tape.sub(y2, g)?;
            let f = Subnet::tape_eval(tape, &[v[0], v[1], v[2], v[3]], y2)?;
            y1 = tape.sub(y1, f)?;
        }
        tape.concat_cols(y1, y2)
    }
}
