//! Define-by-run reverse-mode tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Each op appends one node
//! holding its value and enough context to run its backward rule; calling
//! [`Tape::backward`] walks the nodes in reverse once.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::linalg::{self, Lu};
use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Transpose(Var),
    SkewFromLower(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Var, Var),
    Overwrite { base: Var, src: Var, rows: Vec<usize>, cols: Vec<usize> },
    Solve { a: Var, b: Var, lu: Lu },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Margin { logits: Var, picks: Vec<(usize, usize)> },
    Sum(Var),
    Scale(Var, f64),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Store the gradient of `v` on `t` (zeros when `v` received none).
    pub fn write_to(&self, v: Var, t: &mut Tensor) -> Result<()> {
        let g = match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; t.len()],
        };
        t.set_grad(g)
    }
}

fn matrix_dims(t: &Tensor) -> (usize, usize) {
    match t.shape().len() {
        2 => (t.shape()[0], t.shape()[1]),
        0 => (1, 1),
        _ => (1, t.len()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { rows, cols, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Register a tensor; it participates in gradients iff `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let (r, c) = matrix_dims(t);
        self.push(r, c, t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Register a tensor as a trainable leaf regardless of its flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let (r, c) = matrix_dims(t);
        self.push(r, c, t.data().to_vec(), Op::Leaf, true)
    }

    /// Register a tensor that never receives a gradient, whatever its flag.
    pub fn frozen(&mut self, t: &Tensor) -> Var {
        let (r, c) = matrix_dims(t);
        self.push(r, c, t.data().to_vec(), Op::Leaf, false)
    }

    /// Constant `rows×cols` matrix.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(dim_err("constant", format!("{}x{} from {} values", rows, cols, data.len())));
        }
        Ok(self.push(rows, cols, data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// `(rows, cols)` of a node.
    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(vec![n.rows, n.cols], n.value.clone()).expect("node dims are consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(dim_err("matmul", format!("{}x{} times {}x{}", m, k, k2, n)));
        }
        let out = linalg::matmul(self.value(a), self.value(b), m, k, n);
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(m, n, out, Op::MatMul(a, b), ng))
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let da = self.dims(a);
        let db = self.dims(b);
        if da != db {
            return Err(dim_err(op, format!("{:?} vs {:?}", da, db)));
        }
        Ok(da)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(r, c, out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(r, c, out, Op::Sub(a, b), ng))
    }

    /// Add a length-`cols` bias vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let (br, bc) = self.dims(bias);
        if br * bc != c {
            return Err(dim_err("add_bias", format!("bias of {} values for {} columns", br * bc, c)));
        }
        let mut out = self.value(x).to_vec();
        linalg::add_bias_rows(&mut out, self.value(bias));
        let ng = self.needs_grad(x) || self.needs_grad(bias);
        Ok(self.push(r, c, out, Op::AddBias(x, bias), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = self.value(x).to_vec();
        linalg::relu_in_place(&mut out);
        let ng = self.needs_grad(x);
        self.push(r, c, out, Op::Relu(x), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let out = linalg::transpose(self.value(x), r, c);
        let ng = self.needs_grad(x);
        self.push(c, r, out, Op::Transpose(x), ng)
    }

    /// Skew-symmetric `S = tril(A) − tril(A)ᵀ` using only the strictly lower
    /// triangle of a square `A`.
    pub fn skew_from_lower(&mut self, a: Var) -> Result<Var> {
        let (n, n2) = self.dims(a);
        if n != n2 {
            return Err(dim_err("skew_from_lower", format!("{}x{} is not square", n, n2)));
        }
        let av = self.value(a);
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..i {
                out[i * n + j] = av[i * n + j];
                out[j * n + i] = -av[i * n + j];
            }
        }
        let ng = self.needs_grad(a);
        Ok(self.push(n, n, out, Op::SkewFromLower(a), ng))
    }

    /// Columns `start..start + width` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + width > c {
            return Err(dim_err("slice_cols", format!("{}..{} of {} columns", start, start + width, c)));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + width]);
        }
        let ng = self.needs_grad(x);
        Ok(self.push(r, width, out, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if ra != rb {
            return Err(dim_err("concat_cols", format!("{} rows vs {} rows", ra, rb)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(ra, ca + cb, out, Op::ConcatCols(a, b), ng))
    }

    /// Copy of `base` where, for the `j`-th entry of `rows`, the columns
    /// `cols` of row `rows[j]` are taken from row `j` of `src`.
    pub fn overwrite(&mut self, base: Var, src: Var, rows: Vec<usize>, cols: Vec<usize>) -> Result<Var> {
        let (r, c) = self.dims(base);
        let (sr, sc) = self.dims(src);
        if sr != rows.len() || sc != c {
            return Err(dim_err(
                "overwrite",
                format!("source {}x{} for {} rows of width {}", sr, sc, rows.len(), c),
            ));
        }
        if rows.iter().any(|&i| i >= r) || cols.iter().any(|&j| j >= c) {
            return Err(Error::Index(format!("overwrite target outside {}x{}", r, c)));
        }
        let mut out = self.value(base).to_vec();
        let sv = self.value(src);
        for (j, &i) in rows.iter().enumerate() {
            for &col in &cols {
                out[i * c + col] = sv[j * c + col];
            }
        }
        let ng = self.needs_grad(base) || self.needs_grad(src);
        Ok(self.push(r, c, out, Op::Overwrite { base, src, rows, cols }, ng))
    }

    /// Solve `a · x = b` by partial-pivot elimination.
    pub fn solve(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, n2) = self.dims(a);
        let (bn, m) = self.dims(b);
        if n != n2 || bn != n {
            return Err(dim_err("solve", format!("a is {}x{}, b is {}x{}", n, n2, bn, m)));
        }
        let lu = linalg::lu_factor(self.value(a), n)?;
        let x = lu.solve(self.value(b), m);
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(n, m, x, Op::Solve { a, b, lu }, ng))
    }

    /// Mean negative log-softmax probability of `labels` under row-wise `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.dims(logits);
        if labels.len() != b {
            return Err(dim_err("softmax_cross_entropy", format!("{} labels for {} rows", labels.len(), b)));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("label {} with {} classes", bad, c)));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &lv[i * c..(i + 1) * c];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, &v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = libm::exp(v - mx);
                z += *p;
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= z;
            }
            loss += -(row[labels[i]] - mx - libm::log(z));
        }
        loss /= b as f64;
        let ng = self.needs_grad(logits);
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            ng,
        ))
    }

    /// Sum over rows of `logit[target] − max_{j ≠ target} logit[j]`.
    pub fn class_margin(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, c) = self.dims(logits);
        if targets.len() != b || c < 2 {
            return Err(dim_err("class_margin", format!("{} targets for {}x{} logits", targets.len(), b, c)));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index(format!("target {} with {} classes", bad, c)));
        }
        let lv = self.value(logits);
        let mut picks = Vec::with_capacity(b);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &lv[i * c..(i + 1) * c];
            let rival = (0..c)
                .filter(|&j| j != t)
                .fold(None, |best: Option<usize>, j| match best {
                    Some(k) if row[k] >= row[j] => Some(k),
                    _ => Some(j),
                })
                .expect("at least two classes");
            total += row[t] - row[rival];
            picks.push((t, rival));
        }
        let ng = self.needs_grad(logits);
        Ok(self.push(1, 1, vec![total], Op::Margin { logits, picks }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.needs_grad(x);
        self.push(1, 1, vec![s], Op::Sum(x), ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let (r, cols) = self.dims(x);
        let out = self.value(x).iter().map(|v| v * c).collect();
        let ng = self.needs_grad(x);
        self.push(r, cols, out, Op::Scale(x, c), ng)
    }

    /// Reverse pass from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rn = &self.nodes[root.0];
        if rn.value.len() != 1 {
            return Err(dim_err("backward", format!("root has {} values, expected a scalar", rn.value.len())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = node.cols;
                if wants(*a) {
                    accumulate(grads, *a, linalg::matmul_bt(g, self.value(*b), m, n, k));
                }
                if wants(*b) {
                    accumulate(grads, *b, linalg::matmul_at(self.value(*a), g, m, k, n));
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.iter().map(|v| -v).collect());
                }
            }
            Op::AddBias(x, bias) => {
                if wants(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if wants(*bias) {
                    let c = node.cols;
                    let mut gb = vec![0.0; c];
                    for row in g.chunks_exact(c) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *bias, gb);
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let xv = self.value(*x);
                    let gx = g.iter().zip(xv).map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 }).collect();
                    accumulate(grads, *x, gx);
                }
            }
            Op::Transpose(x) => {
                if wants(*x) {
                    accumulate(grads, *x, linalg::transpose(g, node.rows, node.cols));
                }
            }
            Op::SkewFromLower(a) => {
                if wants(*a) {
                    let n = node.rows;
                    let mut ga = vec![0.0; n * n];
                    for i in 0..n {
                        for j in 0..i {
                            ga[i * n + j] = g[i * n + j] - g[j * n + i];
                        }
                    }
                    accumulate(grads, *a, ga);
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let (r, c) = self.dims(*x);
                    let w = node.cols;
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        gx[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::ConcatCols(a, b) => {
                let (r, ca) = self.dims(*a);
                let cb = node.cols - ca;
                if wants(*a) {
                    let mut ga = Vec::with_capacity(r * ca);
                    for i in 0..r {
                        ga.extend_from_slice(&g[i * node.cols..i * node.cols + ca]);
                    }
                    accumulate(grads, *a, ga);
                }
                if wants(*b) {
                    let mut gb = Vec::with_capacity(r * cb);
                    for i in 0..r {
                        gb.extend_from_slice(&g[i * node.cols + ca..(i + 1) * node.cols]);
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Overwrite { base, src, rows, cols } => {
                let c = node.cols;
                if wants(*base) {
                    let mut gb = g.to_vec();
                    for &i in rows {
                        for &col in cols {
                            gb[i * c + col] = 0.0;
                        }
                    }
                    accumulate(grads, *base, gb);
                }
                if wants(*src) {
                    let mut gs = vec![0.0; rows.len() * c];
                    for (j, &i) in rows.iter().enumerate() {
                        for &col in cols {
                            gs[j * c + col] = g[i * c + col];
                        }
                    }
                    accumulate(grads, *src, gs);
                }
            }
            Op::Solve { a, b, lu } => {
                let n = node.rows;
                let m = node.cols;
                // dB = A⁻ᵀ G, dA = −dB xᵀ
                let gb = lu.solve_transposed(g, m);
                if wants(*a) {
                    let mut ga = linalg::matmul_bt(&gb, &node.value, n, m, n);
                    for v in &mut ga {
                        *v = -*v;
                    }
                    accumulate(grads, *a, ga);
                }
                if wants(*b) {
                    accumulate(grads, *b, gb);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if wants(*logits) {
                    let (b, c) = self.dims(*logits);
                    let scale = g[0] / b as f64;
                    let mut gl = probs.clone();
                    for (i, &l) in labels.iter().enumerate() {
                        gl[i * c + l] -= 1.0;
                    }
                    for v in &mut gl {
                        *v *= scale;
                    }
                    accumulate(grads, *logits, gl);
                }
            }
            Op::Margin { logits, picks } => {
                if wants(*logits) {
                    let (b, c) = self.dims(*logits);
                    let mut gl = vec![0.0; b * c];
                    for (i, &(t, r)) in picks.iter().enumerate() {
                        gl[i * c + t] += g[0];
                        gl[i * c + r] -= g[0];
                    }
                    accumulate(grads, *logits, gl);
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let n = self.nodes[x.0].value.len();
                    accumulate(grads, *x, vec![g[0]; n]);
                }
            }
            Op::Scale(x, c) => {
                if wants(*x) {
                    accumulate(grads, *x, g.iter().map(|v| v * c).collect());
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(&g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
