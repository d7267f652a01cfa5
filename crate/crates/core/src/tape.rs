//! Reverse-mode differentiation over a fixed set of matrix operations.
//!
//! A [`Graph`] records every operation as a node holding its forward
//! value. [`Graph::backward`] walks the nodes in reverse creation order and
//! accumulates adjoints. Parameters enter as borrowed leaves tagged with an
//! index so their gradients can be gathered into a flat parameter layout.
//!
//! Binary elementwise operations broadcast: each operand dimension must
//! equal the output dimension or be 1.

use std::borrow::Cow;

use crate::tensor::{matmul_t, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary {
    Exp,
    Ln,
    Sqrt,
    Square,
    Gelu,
    Silu,
    Relu,
    Sin,
    Cos,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Atan2,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Transpose(Var),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    AddScalar(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var, f64),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    GroupMax { src: Var, argmax: Vec<usize> },
    Mat3Mul { a: Var, b: Var, ta: bool, tb: bool },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn broadcast_shape(a: &Tensor, b: &Tensor) -> (usize, usize) {
    let dim = |x: usize, y: usize, what: &str| -> usize {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("cannot broadcast {what}: {}x{} with {}x{}", a.rows, a.cols, b.rows, b.cols)
        }
    };
    (dim(a.rows, b.rows, "rows"), dim(a.cols, b.cols, "cols"))
}

#[inline]
fn bidx(t: &Tensor, r: usize, c: usize) -> usize {
    let r = if t.rows == 1 { 0 } else { r };
    let c = if t.cols == 1 { 0 } else { c };
    r * t.cols + c
}

/// Sums `g` (shaped like the broadcast output) down to `shape`.
fn reduce_to(g: &Tensor, shape: (usize, usize)) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Tensor::zeros(shape.0, shape.1);
    for r in 0..g.rows {
        for c in 0..g.cols {
            let i = bidx(&out, r, c);
            out.data[i] += g.data[r * g.cols + c];
        }
    }
    out
}

fn mat3(d: &[f64], t: bool) -> [[f64; 3]; 3] {
    // Column-major storage: element (i, j) at j*3 + i.
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = if t { d[i * 3 + j] } else { d[j * 3 + i] };
        }
    }
    m
}

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    c
}

fn transpose3(a: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

fn store3(m: &[[f64; 3]; 3], out: &mut [f64]) {
    for i in 0..3 {
        for j in 0..3 {
            out[j * 3 + i] = m[i][j];
        }
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// A constant leaf (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(t), op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// A differentiable leaf identified by `id` in the parameter layout.
    pub fn param(&mut self, id: usize, t: &'a Tensor) -> Var {
        self.nodes.push(Node { value: Cow::Borrowed(t), op: Op::Param(id), needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul_t(self.value(a), false, self.value(b), false);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (rows, cols) = broadcast_shape(ta, tb);
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let x = ta.data[bidx(ta, r, c)];
                let y = tb.data[bidx(tb, r, c)];
                out.data[r * cols + c] = match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                    Binary::Atan2 => x.atan2(y),
                };
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Binary(kind, a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Div, a, b)
    }

    /// Elementwise `atan2(y, x)`.
    pub fn atan2(&mut self, y: Var, x: Var) -> Var {
        self.binary(Binary::Atan2, y, x)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Exp => f64::exp,
            Unary::Ln => f64::ln,
            Unary::Sqrt => f64::sqrt,
            Unary::Square => |x| x * x,
            Unary::Gelu => gelu,
            Unary::Silu => |x| x * sigmoid(x),
            Unary::Relu => |x| x.max(0.0),
            Unary::Sin => f64::sin,
            Unary::Cos => f64::cos,
        };
        let v = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(v, Op::Unary(kind, a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(Unary::Ln, a)
    }
    /// Square root; the derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }
    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(Unary::Gelu, a)
    }
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(Unary::Silu, a)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }
    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(Unary::Sin, a)
    }
    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(Unary::Cos, a)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, k), ng)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums, `r×c → 1×c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(1, t.cols);
        for r in 0..t.rows {
            for (o, x) in out.data.iter_mut().zip(t.row_slice(r)) {
                *o += x;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SumRows(a), ng)
    }

    /// Row sums, `r×c → r×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::from_vec(t.rows, 1, (0..t.rows).map(|r| t.row_slice(r).iter().sum()).collect());
        let ng = self.ng(a);
        self.push(out, Op::SumCols(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(t.rows, t.cols);
        for r in 0..t.rows {
            let row = t.row_slice(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out.data[r * t.cols..(r + 1) * t.cols];
            let mut z = 0.0;
            for (oi, &x) in o.iter_mut().zip(row) {
                *oi = (x - m).exp();
                z += *oi;
            }
            for oi in o.iter_mut() {
                *oi /= z;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// Per-row normalization to zero mean and unit variance (no affine).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(t.rows, t.cols);
        let n = t.cols as f64;
        for r in 0..t.rows {
            let row = t.row_slice(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, x) in out.data[r * t.cols..(r + 1) * t.cols].iter_mut().zip(row) {
                *o = (x - mean) * inv;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNormRows(a, eps), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.rows, "row slice out of range");
        let out = Tensor::from_vec(len, t.cols, t.data[start * t.cols..(start + len) * t.cols].to_vec());
        let ng = self.ng(a);
        self.push(out, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.cols, "column slice out of range");
        let mut out = Tensor::zeros(t.rows, len);
        for r in 0..t.rows {
            out.data[r * len..(r + 1) * len].copy_from_slice(&t.row_slice(r)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + t.cols].copy_from_slice(t.row_slice(r));
            }
            off += t.cols;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(idx.len(), t.cols);
        for (i, &j) in idx.iter().enumerate() {
            out.data[i * t.cols..(i + 1) * t.cols].copy_from_slice(t.row_slice(j));
        }
        let ng = self.ng(a);
        self.push(out, Op::GatherRows(a, idx.to_vec()), ng)
    }

    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(t.rows, idx.len());
        for r in 0..t.rows {
            for (i, &j) in idx.iter().enumerate() {
                out.data[r * idx.len() + i] = t.at(r, j);
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::GatherCols(a, idx.to_vec()), ng)
    }

    /// For each output row `i`, the channel-wise maximum over source rows
    /// `groups[i*k..(i+1)*k]`. Ties resolve to the first occurrence.
    pub fn group_max(&mut self, src: Var, groups: &[usize], k: usize) -> Var {
        assert!(k > 0 && groups.len() % k == 0, "group_max needs a whole number of groups");
        let t = self.value(src);
        let n = groups.len() / k;
        let mut out = Tensor::zeros(n, t.cols);
        let mut argmax = vec![0usize; n * t.cols];
        for i in 0..n {
            let g = &groups[i * k..(i + 1) * k];
            for c in 0..t.cols {
                let mut best = g[0];
                let mut bv = t.at(g[0], c);
                for &j in &g[1..] {
                    let v = t.at(j, c);
                    if v > bv {
                        bv = v;
                        best = j;
                    }
                }
                out.data[i * t.cols + c] = bv;
                argmax[i * t.cols + c] = best;
            }
        }
        let ng = self.ng(src);
        self.push(out, Op::GroupMax { src, argmax }, ng)
    }

    /// Row-wise 3×3 products `op(A_r)·op(B_r)` on `r×9` tensors whose rows
    /// hold column-major matrices. `ta`/`tb` transpose the operand.
    pub fn mat3_mul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.cols == 9 && vb.cols == 9 && va.rows == vb.rows, "mat3_mul expects matching r×9 inputs");
        let mut out = Tensor::zeros(va.rows, 9);
        for r in 0..va.rows {
            let c = mat3_mul(&mat3(va.row_slice(r), ta), &mat3(vb.row_slice(r), tb));
            store3(&c, &mut out.data[r * 9..(r + 1) * 9]);
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mat3Mul { a, b, ta, tb }, ng)
    }

    /// `x·W + b` with `W: in×out` and `b: 1×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add(y, b)
    }

    /// Hash of every discrete choice in the recorded forward pass: max
    /// pooling winners and ReLU activity. Two passes with equal
    /// fingerprints lie on the same smooth piece of the function.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::GroupMax { argmax, .. } => argmax.iter().for_each(|&a| mix(a as u64)),
                Op::Unary(Unary::Relu, a) => self.value(*a).data.iter().for_each(|&x| mix(u64::from(x > 0.0))),
                _ => {}
            }
        }
        h
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::scalar(1.0));
        let mut params = Vec::new();

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let send = |v: Var, d: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&d),
                    slot => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => params.push((*id, g)),
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        send(*a, matmul_t(&g, false, self.value(*b), true), &mut grads);
                    }
                    if self.ng(*b) {
                        send(*b, matmul_t(self.value(*a), true, &g, false), &mut grads);
                    }
                }
                Op::Transpose(a) => send(*a, g.transpose(), &mut grads),
                Op::Binary(kind, a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let mut ga = Tensor::zeros(g.rows, g.cols);
                    let mut gb = Tensor::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            let k = r * g.cols + c;
                            let x = ta.data[bidx(ta, r, c)];
                            let y = tb.data[bidx(tb, r, c)];
                            let (da, db) = match kind {
                                Binary::Add => (1.0, 1.0),
                                Binary::Sub => (1.0, -1.0),
                                Binary::Mul => (y, x),
                                Binary::Div => (1.0 / y, -x / (y * y)),
                                Binary::Atan2 => {
                                    let r2 = x * x + y * y;
                                    if r2 > 0.0 {
                                        (y / r2, -x / r2)
                                    } else {
                                        (0.0, 0.0)
                                    }
                                }
                            };
                            ga.data[k] = g.data[k] * da;
                            gb.data[k] = g.data[k] * db;
                        }
                    }
                    if self.ng(*a) {
                        send(*a, reduce_to(&ga, ta.shape()), &mut grads);
                    }
                    if self.ng(*b) {
                        send(*b, reduce_to(&gb, tb.shape()), &mut grads);
                    }
                }
                Op::Unary(kind, a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut d = Tensor::zeros(g.rows, g.cols);
                    for k in 0..g.len() {
                        let (xi, yi) = (x.data[k], y.data[k]);
                        let dd = match kind {
                            Unary::Exp => yi,
                            Unary::Ln => 1.0 / xi,
                            Unary::Sqrt => {
                                if yi > 0.0 {
                                    0.5 / yi
                                } else {
                                    0.0
                                }
                            }
                            Unary::Square => 2.0 * xi,
                            Unary::Gelu => gelu_grad(xi),
                            Unary::Silu => {
                                let s = sigmoid(xi);
                                s * (1.0 + xi * (1.0 - s))
                            }
                            Unary::Relu => {
                                if xi > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Sin => xi.cos(),
                            Unary::Cos => -xi.sin(),
                        };
                        d.data[k] = g.data[k] * dd;
                    }
                    send(*a, d, &mut grads);
                }
                Op::Scale(a, k) => send(*a, g.map(|x| x * k), &mut grads),
                Op::AddScalar(a) => send(*a, g, &mut grads),
                Op::SumAll(a) => {
                    let (r, c) = self.shape(*a);
                    send(*a, Tensor::filled(r, c, g.item()), &mut grads);
                }
                Op::SumRows(a) => {
                    let (r, c) = self.shape(*a);
                    let mut d = Tensor::zeros(r, c);
                    for row in 0..r {
                        d.data[row * c..(row + 1) * c].copy_from_slice(&g.data);
                    }
                    send(*a, d, &mut grads);
                }
                Op::SumCols(a) => {
                    let (r, c) = self.shape(*a);
                    let mut d = Tensor::zeros(r, c);
                    for row in 0..r {
                        d.data[row * c..(row + 1) * c].fill(g.data[row]);
                    }
                    send(*a, d, &mut grads);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = Tensor::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let yr = y.row_slice(r);
                        let gr = g.row_slice(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..y.cols {
                            d.data[r * y.cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    send(*a, d, &mut grads);
                }
                Op::LayerNormRows(a, eps) => {
                    let x = self.value(*a);
                    let xh = &node.value;
                    let n = x.cols as f64;
                    let mut d = Tensor::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        let row = x.row_slice(r);
                        let mean = row.iter().sum::<f64>() / n;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gr = g.row_slice(r);
                        let xr = xh.row_slice(r);
                        let mg = gr.iter().sum::<f64>() / n;
                        let mgx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for c in 0..x.cols {
                            d.data[r * x.cols + c] = inv * (gr[c] - mg - xr[c] * mgx);
                        }
                    }
                    send(*a, d, &mut grads);
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut d = Tensor::zeros(r, c);
                    d.data[start * c..start * c + g.len()].copy_from_slice(&g.data);
                    send(*a, d, &mut grads);
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut d = Tensor::zeros(r, c);
                    for row in 0..r {
                        d.data[row * c + start..row * c + start + g.cols].copy_from_slice(g.row_slice(row));
                    }
                    send(*a, d, &mut grads);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        if self.ng(p) {
                            send(p, Tensor::from_vec(r, c, g.data[off * c..(off + r) * c].to_vec()), &mut grads);
                        }
                        off += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        if self.ng(p) {
                            let mut d = Tensor::zeros(r, c);
                            for row in 0..r {
                                d.data[row * c..(row + 1) * c]
                                    .copy_from_slice(&g.row_slice(row)[off..off + c]);
                            }
                            send(p, d, &mut grads);
                        }
                        off += c;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let (r, c) = self.shape(*a);
                    let mut d = Tensor::zeros(r, c);
                    for (i, &j) in idx.iter().enumerate() {
                        for col in 0..c {
                            d.data[j * c + col] += g.data[i * c + col];
                        }
                    }
                    send(*a, d, &mut grads);
                }
                Op::GatherCols(a, idx) => {
                    let (r, c) = self.shape(*a);
                    let mut d = Tensor::zeros(r, c);
                    for row in 0..r {
                        for (i, &j) in idx.iter().enumerate() {
                            d.data[row * c + j] += g.data[row * idx.len() + i];
                        }
                    }
                    send(*a, d, &mut grads);
                }
                Op::GroupMax { src, argmax } => {
                    let (r, c) = self.shape(*src);
                    let mut d = Tensor::zeros(r, c);
                    for (k, &j) in argmax.iter().enumerate() {
                        d.data[j * c + k % c] += g.data[k];
                    }
                    send(*src, d, &mut grads);
                }
                Op::Mat3Mul { a, b, ta, tb } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let mut da = Tensor::zeros(va.rows, 9);
                    let mut db = Tensor::zeros(vb.rows, 9);
                    for r in 0..va.rows {
                        let oa = mat3(va.row_slice(r), *ta);
                        let ob = mat3(vb.row_slice(r), *tb);
                        let gc = mat3(g.row_slice(r), false);
                        // d op(A) = dC·op(B)ᵀ, d op(B) = op(A)ᵀ·dC
                        let d_oa = mat3_mul(&gc, &transpose3(&ob));
                        let d_ob = mat3_mul(&transpose3(&oa), &gc);
                        let d_a = if *ta { transpose3(&d_oa) } else { d_oa };
                        let d_b = if *tb { transpose3(&d_ob) } else { d_ob };
                        store3(&d_a, &mut da.data[r * 9..(r + 1) * 9]);
                        store3(&d_b, &mut db.data[r * 9..(r + 1) * 9]);
                    }
                    if self.ng(*a) {
                        send(*a, da, &mut grads);
                    }
                    if self.ng(*b) {
                        send(*b, db, &mut grads);
                    }
                }
            }
        }
        Gradients { params }
    }
}

/// Parameter gradients produced by one backward sweep.
pub struct Gradients {
    params: Vec<(usize, Tensor)>,
}

impl Gradients {
    pub fn empty() -> Self {
        Self { params: Vec::new() }
    }

    /// Adds every parameter gradient into `acc[id]`.
    pub fn accumulate_into(&self, acc: &mut [Tensor]) {
        for (id, g) in &self.params {
            acc[*id].add_assign(g);
        }
    }

    pub fn get(&self, id: usize) -> Option<Tensor> {
        let mut out: Option<Tensor> = None;
        for (i, g) in &self.params {
            if *i == id {
                match &mut out {
                    Some(acc) => acc.add_assign(g),
                    None => out = Some(g.clone()),
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences of `f` around every entry of `inputs`.
    fn numeric_grad(inputs: &[Tensor], f: &dyn Fn(&[Tensor]) -> f64) -> Vec<Tensor> {
        let h = 1e-6;
        inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut g = Tensor::zeros(t.rows, t.cols);
                for k in 0..t.len() {
                    let mut plus = inputs.to_vec();
                    plus[i].data[k] += h;
                    let mut minus = inputs.to_vec();
                    minus[i].data[k] -= h;
                    g.data[k] = (f(&plus) - f(&minus)) / (2.0 * h);
                }
                g
            })
            .collect()
    }

    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let eval = |ts: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<_> = ts.iter().enumerate().map(|(i, t)| g.param(i, t)).collect();
            let out = build(&mut g, &vars);
            g.value(out).item()
        };
        let mut g = Graph::new();
        let vars: Vec<_> = inputs.iter().enumerate().map(|(i, t)| g.param(i, t)).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out);
        let numeric = numeric_grad(&inputs, &eval);
        for (i, n) in numeric.iter().enumerate() {
            let a = grads.get(i).unwrap_or_else(|| Tensor::zeros(n.rows, n.cols));
            for k in 0..n.len() {
                let (x, y) = (a.data[k], n.data[k]);
                let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-6);
                assert!(rel < 1e-5, "input {i} entry {k}: analytic {x} numeric {y}");
            }
        }
    }

    fn t(rows: usize, cols: usize, seed: f64) -> Tensor {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|k| ((k as f64 + 1.0) * seed).sin()).collect())
    }

    #[test]
    fn matmul_transpose_and_broadcast() {
        check(vec![t(3, 4, 0.7), t(4, 2, 1.3), t(1, 2, 0.4)], |g, v| {
            let y = g.linear(v[0], v[1], v[2]);
            let yt = g.transpose(y);
            let s = g.square(yt);
            g.sum_all(s)
        });
    }

    #[test]
    fn elementwise_ops() {
        check(vec![t(2, 3, 0.9), t(2, 1, 1.1), t(1, 3, 0.3)], |g, v| {
            let e = g.exp(v[0]);
            let p = g.add_scalar(e, 1.0);
            let l = g.ln(p);
            let d = g.div(l, v[2]);
            let m = g.mul(d, v[1]);
            let s = g.sub(m, v[2]);
            let ge = g.gelu(s);
            let si = g.silu(ge);
            let sn = g.sin(si);
            let c = g.cos(v[0]);
            let q = g.square(c);
            let r = g.add_scalar(q, 0.5);
            let sq = g.sqrt(r);
            let both = g.add(sn, sq);
            g.mean_all(both)
        });
    }

    #[test]
    fn atan2_relu_and_reductions() {
        check(vec![t(3, 2, 0.5), t(3, 2, 1.7)], |g, v| {
            let a = g.atan2(v[0], v[1]);
            let r = g.relu(a);
            let sr = g.sum_rows(r);
            let sc = g.sum_cols(v[0]);
            let sc2 = g.square(sc);
            let x = g.sum_all(sr);
            let y = g.sum_all(sc2);
            g.add(x, y)
        });
    }

    #[test]
    fn softmax_and_layernorm() {
        check(vec![t(3, 5, 0.37), t(3, 5, 0.11)], |g, v| {
            let s = g.softmax_rows(v[0]);
            let ln = g.layer_norm_rows(v[0], 1e-6);
            let m = g.mul(s, v[1]);
            let n = g.mul(ln, v[1]);
            let a = g.sum_all(m);
            let b = g.sum_all(n);
            let b2 = g.square(b);
            g.add(a, b2)
        });
    }

    #[test]
    fn slicing_concat_gather() {
        check(vec![t(4, 3, 0.21), t(2, 3, 0.8)], |g, v| {
            let a = g.slice_rows(v[0], 1, 2);
            let b = g.slice_cols(v[0], 1, 2);
            let c = g.concat_rows(&[a, v[1]]);
            let d = g.concat_cols(&[b, v[0]]);
            let e = g.gather_rows(c, &[3, 0, 0, 2]);
            let f = g.gather_cols(d, &[4, 0, 0]);
            let e2 = g.square(e);
            let f2 = g.square(f);
            let x = g.sum_all(e2);
            let y = g.sum_all(f2);
            g.add(x, y)
        });
    }

    #[test]
    fn group_max_routes_to_argmax() {
        check(vec![t(5, 3, 0.93)], |g, v| {
            let m = g.group_max(v[0], &[0, 1, 2, 2, 3, 4, 4, 0, 1], 3);
            let s = g.square(m);
            g.sum_all(s)
        });
    }

    #[test]
    fn mat3_products() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            check(vec![t(2, 9, 0.61), t(2, 9, 0.29)], move |g, v| {
                let m = g.mat3_mul(v[0], v[1], ta, tb);
                let w = g.gather_cols(m, &[0, 4, 8, 5, 7]);
                let s = g.sin(w);
                g.sum_all(s)
            });
        }
    }

    #[test]
    fn mat3_mul_matches_matrix_product() {
        let a = t(1, 9, 0.4);
        let b = t(1, 9, 0.9);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.mat3_mul(va, vb, true, false);
        let ma = nalgebra::Matrix3::from_column_slice(&a.data);
        let mb = nalgebra::Matrix3::from_column_slice(&b.data);
        let want = ma.transpose() * mb;
        for (x, y) in g.value(c).data.iter().zip(want.as_slice()) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}
