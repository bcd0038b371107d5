//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Graph`] records every operation as a node. Values are computed eagerly
//! on construction; [`Graph::backward`] walks the nodes in reverse creation
//! order. Only nodes that (transitively) depend on a leaf created with
//! `requires_grad = true` receive gradients.

use std::fmt;

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}x{})", self.rows, self.cols)
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Self {
        Tensor { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape does not match data length");
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` with optional transposes.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_trans: bool, b: &[f64], b_trans: bool, c: &mut [f64], beta: f64) {
    // Row-major strides; a transposed operand swaps its strides.
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    LogSigmoid(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Max(Var, Var),
    SumAll(Var),
    SumCols(Var),
    MeanRows(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Custom(Vec<Var>, BackwardFn),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v`'s value with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[a.0].value;
        let value = Tensor { rows: src.rows, cols: src.cols, data: src.data.iter().map(|&x| f(x)).collect() };
        self.push(value, op, &[a])
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "elementwise op on mismatched shapes");
        let value = Tensor { rows: ta.rows, cols: ta.cols, data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect() };
        self.push(value, op, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.cols, tb.rows, "matmul inner dimension mismatch");
        let (m, k, n) = (ta.rows, ta.cols, tb.cols);
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, &ta.data, false, &tb.data, false, &mut out.data, 0.0);
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a (r×c) + b (1×c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((1, ta.cols), tb.shape(), "add_row expects a 1×c row vector");
        let mut out = ta.clone();
        for r in 0..out.rows {
            for (o, &bv) in out.data[r * out.cols..(r + 1) * out.cols].iter_mut().zip(&tb.data) {
                *o += bv;
            }
        }
        self.push(out, Op::AddRow(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Max(a, b), f64::max)
    }

    /// `a (r×c) * b (r×1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((ta.rows, 1), tb.shape(), "mul_col expects an r×1 column");
        let mut out = ta.clone();
        for r in 0..out.rows {
            let s = tb.data[r];
            for o in &mut out.data[r * out.cols..(r + 1) * out.cols] {
                *o *= s;
            }
        }
        self.push(out, Op::MulCol(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, Op::Softplus(a), softplus)
    }

    /// Numerically stable `ln σ(a)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::LogSigmoid(a), log_sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, Op::Ln(a), f64::ln)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, Op::Abs(a), f64::abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a), |x| x * x)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    /// Row sums: `r×c -> r×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let data = (0..t.rows).map(|r| t.row(r).iter().sum()).collect();
        self.push(Tensor::from_vec(t.rows, 1, data), Op::SumCols(a), &[a])
    }

    /// Column means: `r×c -> 1×c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let mut data = vec![0.0; t.cols];
        for r in 0..t.rows {
            for (d, v) in data.iter_mut().zip(t.row(r)) {
                *d += v;
            }
        }
        let n = t.rows.max(1) as f64;
        for d in &mut data {
            *d /= n;
        }
        self.push(Tensor::from_vec(1, t.cols, data), Op::MeanRows(a), &[a])
    }

    /// Mean of all entries as a 1×1 tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.data.len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Concatenate along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.nodes[parts[0].0].value.rows;
        let cols: usize = parts
            .iter()
            .map(|p| {
                let t = &self.nodes[p.0].value;
                assert_eq!(t.rows, rows, "concat row mismatch");
                t.cols
            })
            .sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let t = &self.nodes[p.0].value;
                out.data[r * cols + off..r * cols + off + t.cols].copy_from_slice(t.row(r));
                off += t.cols;
            }
        }
        self.push(out, Op::Concat(parts.to_vec()), parts)
    }

    /// Columns `start..start+len`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = &self.nodes[a.0].value;
        assert!(start + len <= t.cols, "slice out of range");
        let mut out = Tensor::zeros(t.rows, len);
        for r in 0..t.rows {
            out.data[r * len..(r + 1) * len].copy_from_slice(&t.row(r)[start..start + len]);
        }
        self.push(out, Op::Slice(a, start), &[a])
    }

    /// Register an operation with a hand-written backward pass.
    ///
    /// `backward(out_grad, parent_values, out_value)` returns one optional
    /// gradient per parent.
    pub fn custom(
        &mut self,
        parents: &[Var],
        value: Tensor,
        backward: impl Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Var {
        self.push(value, Op::Custom(parents.to_vec(), Box::new(backward)), parents)
    }

    /// Gradients of the scalar `root` with respect to every node that requires them.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).data.len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn elementwise(&self, grads: &mut [Option<Tensor>], a: Var, g: &Tensor, f: impl Fn(f64, f64, f64) -> f64, out: &Tensor) {
        if !self.nodes[a.0].requires_grad {
            return;
        }
        let x = &self.nodes[a.0].value;
        let data = g.data.iter().zip(&x.data).zip(&out.data).map(|((&gv, &xv), &ov)| f(gv, xv, ov)).collect();
        self.accumulate(grads, a, Tensor { rows: x.rows, cols: x.cols, data });
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows, ta.cols, tb.cols);
                if self.requires_grad(*a) {
                    let mut ga = Tensor::zeros(m, k);
                    gemm(m, n, k, &g.data, false, &tb.data, true, &mut ga.data, 0.0);
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = Tensor::zeros(k, n);
                    gemm(k, m, n, &ta.data, true, &g.data, false, &mut gb.data, 0.0);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    let mut gb = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (d, v) in gb.data.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    let neg = Tensor { rows: g.rows, cols: g.cols, data: g.data.iter().map(|v| -v).collect() };
                    self.accumulate(grads, *b, neg);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let data = g.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor { rows: g.rows, cols: g.cols, data });
                }
                if self.requires_grad(*b) {
                    let data = g.data.iter().zip(&ta.data).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor { rows: g.rows, cols: g.cols, data });
                }
            }
            Op::Max(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let pick_a: Vec<bool> = ta.data.iter().zip(&tb.data).map(|(x, y)| x >= y).collect();
                if self.requires_grad(*a) {
                    let data = g.data.iter().zip(&pick_a).map(|(&v, &p)| if p { v } else { 0.0 }).collect();
                    self.accumulate(grads, *a, Tensor { rows: g.rows, cols: g.cols, data });
                }
                if self.requires_grad(*b) {
                    let data = g.data.iter().zip(&pick_a).map(|(&v, &p)| if p { 0.0 } else { v }).collect();
                    self.accumulate(grads, *b, Tensor { rows: g.rows, cols: g.cols, data });
                }
            }
            Op::MulCol(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows {
                        let s = tb.data[r];
                        for v in &mut ga.data[r * ga.cols..(r + 1) * ga.cols] {
                            *v *= s;
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let data = (0..g.rows).map(|r| g.row(r).iter().zip(ta.row(r)).map(|(x, y)| x * y).sum()).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(g.rows, 1, data));
                }
            }
            Op::Scale(a, s) => self.elementwise(grads, *a, g, |gv, _, _| gv * s, out),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Sigmoid(a) => self.elementwise(grads, *a, g, |gv, _, o| gv * o * (1.0 - o), out),
            Op::Tanh(a) => self.elementwise(grads, *a, g, |gv, _, o| gv * (1.0 - o * o), out),
            Op::Relu(a) => self.elementwise(grads, *a, g, |gv, x, _| if x > 0.0 { gv } else { 0.0 }, out),
            Op::Softplus(a) => self.elementwise(grads, *a, g, |gv, x, _| gv * sigmoid(x), out),
            Op::LogSigmoid(a) => self.elementwise(grads, *a, g, |gv, x, _| gv * sigmoid(-x), out),
            Op::Exp(a) => self.elementwise(grads, *a, g, |gv, _, o| gv * o, out),
            Op::Ln(a) => self.elementwise(grads, *a, g, |gv, x, _| gv / x, out),
            Op::Abs(a) => self.elementwise(grads, *a, g, |gv, x, _| gv * x.signum() * (x != 0.0) as u8 as f64, out),
            Op::Square(a) => self.elementwise(grads, *a, g, |gv, x, _| 2.0 * gv * x, out),
            Op::Clamp(a, lo, hi) => self.elementwise(grads, *a, g, |gv, x, _| if x >= *lo && x <= *hi { gv } else { 0.0 }, out),
            Op::SumAll(a) => {
                let t = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(t.rows, t.cols, g.item()));
            }
            Op::SumCols(a) => {
                let t = self.value(*a);
                let mut ga = Tensor::zeros(t.rows, t.cols);
                for r in 0..t.rows {
                    let gv = g.data[r];
                    for v in &mut ga.data[r * t.cols..(r + 1) * t.cols] {
                        *v = gv;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::MeanRows(a) => {
                let t = self.value(*a);
                let n = t.rows.max(1) as f64;
                let mut ga = Tensor::zeros(t.rows, t.cols);
                for r in 0..t.rows {
                    for (v, gv) in ga.data[r * t.cols..(r + 1) * t.cols].iter_mut().zip(&g.data) {
                        *v = gv / n;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let t = self.value(*p);
                    if self.requires_grad(*p) {
                        let mut gp = Tensor::zeros(t.rows, t.cols);
                        for r in 0..t.rows {
                            gp.data[r * t.cols..(r + 1) * t.cols].copy_from_slice(&g.row(r)[off..off + t.cols]);
                        }
                        self.accumulate(grads, *p, gp);
                    }
                    off += t.cols;
                }
            }
            Op::Slice(a, start) => {
                let t = self.value(*a);
                let mut ga = Tensor::zeros(t.rows, t.cols);
                for r in 0..t.rows {
                    ga.data[r * t.cols + start..r * t.cols + start + g.cols].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Custom(parents, backward) => {
                let values: Vec<&Tensor> = parents.iter().map(|p| self.value(*p)).collect();
                let pg = backward(g, &values, out);
                for (p, gp) in parents.iter().zip(pg) {
                    if let Some(gp) = gp {
                        self.accumulate(grads, *p, gp);
                    }
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        // small LCG so the tape tests stay independent of the rand crates
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::from_vec(rows, cols, data)
    }

    /// Central differences of `f` with respect to every entry of `x0`.
    fn numeric_grad(x0: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-6;
        let mut g = Tensor::zeros(x0.rows, x0.cols);
        for i in 0..x0.data.len() {
            let mut xp = x0.clone();
            xp.data[i] += h;
            let mut xm = x0.clone();
            xm.data[i] -= h;
            g.data[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn check(x0: Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
        let f = |x: &Tensor| {
            let mut g = Graph::new();
            let v = g.param(x.clone());
            let out = build(&mut g, v);
            g.value(out).item()
        };
        let mut g = Graph::new();
        let v = g.param(x0.clone());
        let out = build(&mut g, v);
        let grads = g.backward(out);
        let analytic = grads.get(v).expect("gradient present").clone();
        let numeric = numeric_grad(&x0, &f);
        for (a, n) in analytic.data.iter().zip(&numeric.data) {
            assert!((a - n).abs() <= 1e-6 * (1.0 + n.abs()), "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn matmul_and_bias_gradients() {
        let w = rand_tensor(4, 3, 1);
        let b = rand_tensor(1, 3, 2);
        check(rand_tensor(5, 4, 3), move |g, x| {
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            let y = g.matmul(x, wv);
            let y = g.add_row(y, bv);
            let y = g.tanh(y);
            g.sum(y)
        });
        let x = rand_tensor(5, 4, 4);
        check(rand_tensor(4, 3, 5), move |g, w| {
            let xv = g.constant(x.clone());
            let y = g.matmul(xv, w);
            let y = g.square(y);
            g.sum(y)
        });
    }

    #[test]
    fn elementwise_gradients() {
        check(rand_tensor(3, 4, 7), |g, x| {
            let a = g.sigmoid(x);
            let b = g.softplus(x);
            let c = g.mul(a, b);
            let d = g.log_sigmoid(c);
            let e = g.exp(d);
            let f = g.add_scalar(e, 2.0);
            let h = g.ln(f);
            let i = g.scale(h, 3.0);
            let j = g.abs(x);
            let k = g.sub(i, j);
            let r = g.relu(x);
            let k = g.add(k, r);
            g.sum(k)
        });
    }

    #[test]
    fn structural_gradients() {
        check(rand_tensor(3, 6, 11), |g, x| {
            let a = g.slice(x, 1, 3);
            let b = g.slice(x, 0, 2);
            let c = g.concat(&[a, b, x]);
            let s = g.sum_cols(c);
            let m = g.mul_col(c, s);
            let mr = g.mean_rows(m);
            let q = g.square(mr);
            let t = g.sum(q);
            let u = g.mean(x);
            g.add(t, u)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(2.0));
        let p = g.param(Tensor::scalar(3.0));
        let y = g.mul(c, p);
        let grads = g.backward(y);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().item(), 2.0);
    }

    #[test]
    fn stable_log_sigmoid_extremes() {
        assert_eq!(log_sigmoid(1000.0), 0.0);
        assert_eq!(log_sigmoid(-1000.0), -1000.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(0.0), 0.5);
    }
}
