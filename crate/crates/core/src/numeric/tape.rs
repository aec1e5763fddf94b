//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node to the [`Tape`]; node ids are therefore a
//! topological order. [`Tape::backward`] walks the nodes once in reverse and
//! accumulates adjoints into the gradient buffers of leaves that require
//! gradients. The tape is not consumed, so a second backward pass from the
//! same scalar adds the same gradients again.

use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `a (n×c) + row (1×c)` broadcast over rows.
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Square(Var),
    Clamp(Var, f64, f64),
    SumAll(Var),
    /// `n×c -> n×1`
    SumCols(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sigmoid(..) => "sigmoid",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Square(..) => "square",
            Op::Clamp(..) => "clamp",
            Op::SumAll(..) => "sum",
            Op::SumCols(..) => "sum_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sigmoid(a)
            | Op::LeakyRelu(a, _)
            | Op::Square(a)
            | Op::Clamp(a, _, _)
            | Op::SumAll(a)
            | Op::SumCols(a)
            | Op::SliceCols(a, _, _) => vec![*a],
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// One recorded operation, as exposed for inspection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub op: &'static str,
    pub inputs: Vec<Var>,
    pub output: Var,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient requirement follows the tensor's own flag.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(true), Op::Leaf, true)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    /// A constant copy of `v`: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn records(&self) -> Vec<Record> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| Record {
                op: n.op.name(),
                inputs: n.op.inputs(),
                output: Var(i),
            })
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(a);
        let values = src.values().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(src.shape().to_vec(), values).expect("shape preserved");
        let rg = self.any_rg(&[a]);
        self.push(out, op, rg)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        }
        let values = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), values)?;
        let rg = self.any_rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.any_rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (p, q) = ta.dims2()?;
        let (r, q2) = tb.dims2()?;
        if q != q2 {
            return Err(Error::dim("matmul_nt", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; p * r];
        matmul_nt_into(ta.values(), tb.values(), &mut out, p, q, r);
        let out = Tensor::matrix(p, r, out)?;
        let rg = self.any_rg(&[a, b]);
        Ok(self.push(out, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (n, c) = ta.dims2()?;
        let (rr, rc) = tr.dims2()?;
        if rr != 1 || rc != c {
            return Err(Error::dim("add_row", ta.shape(), tr.shape()));
        }
        let bias = tr.values();
        let mut values = ta.values().to_vec();
        for i in 0..n {
            for (v, b) in values[i * c..(i + 1) * c].iter_mut().zip(bias) {
                *v += b;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), values)?;
        let rg = self.any_rg(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| k * x)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + k)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Elementwise clamp; the gradient is passed through strictly inside the range.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).values().iter().sum();
        let rg = self.any_rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums: `n×c -> n×1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (n, c) = ta.dims2()?;
        let values = (0..n)
            .map(|i| ta.values()[i * c..(i + 1) * c].iter().sum())
            .collect();
        let out = Tensor::matrix(n, 1, values)?;
        let rg = self.any_rg(&[a]);
        Ok(self.push(out, Op::SumCols(a), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Empty("concat_cols parts"));
        };
        let n = self.value(first).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != n {
                return Err(Error::dim("concat_cols", &[n], &[r]));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut values = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                values.extend_from_slice(&self.value(p).values()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::matrix(n, total, values)?;
        let rg = self.any_rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Empty("concat_rows parts"));
        };
        let c = self.value(first).dims2()?.1;
        let mut n = 0;
        let mut values = Vec::new();
        for &p in parts {
            let (r, w) = self.value(p).dims2()?;
            if w != c {
                return Err(Error::dim("concat_rows", &[c], &[w]));
            }
            n += r;
            values.extend_from_slice(self.value(p).values());
        }
        let out = Tensor::matrix(n, c, values)?;
        let rg = self.any_rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(a).slice_cols(start, end)?;
        let rg = self.any_rg(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start, end), rg))
    }

    /// Reverse pass from a scalar node. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n_loss = self.value(loss).len();
        if n_loss != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                adj[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut adj)?;
        }

        for (idx, g) in adj.into_iter().enumerate() {
            if let Some(g) = g {
                let node = &mut self.nodes[idx];
                if matches!(node.op, Op::Leaf) && node.requires_grad {
                    match &mut node.grad {
                        Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, v)| *b += v),
                        None => node.grad = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = node.value.values();
        let val = |v: Var| self.nodes[v.0].value.values();
        let wants = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (p, q) = self.value(*a).dims2()?;
                let r = self.value(*b).dims2()?.1;
                if wants(*a) {
                    // dA = G · Bᵀ
                    let buf = slot(adj, *a, p * q);
                    matmul_nt_into(g, val(*b), buf, p, r, q);
                }
                if wants(*b) {
                    // dB = Aᵀ · G
                    let buf = slot(adj, *b, q * r);
                    matmul_tn_into(val(*a), g, buf, p, q, r);
                }
            }
            Op::MatMulNt(a, b) => {
                let (p, q) = self.value(*a).dims2()?;
                let r = self.value(*b).dims2()?.0;
                if wants(*a) {
                    // dA = G · B
                    let buf = slot(adj, *a, p * q);
                    matmul_into(g, val(*b), buf, p, r, q);
                }
                if wants(*b) {
                    // dB = Gᵀ · A
                    let buf = slot(adj, *b, r * q);
                    matmul_tn_into(g, val(*a), buf, p, r, q);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        add_into(slot(adj, v, g.len()), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_into(slot(adj, *a, g.len()), g);
                }
                if wants(*b) {
                    let buf = slot(adj, *b, g.len());
                    buf.iter_mut().zip(g).for_each(|(d, gv)| *d -= gv);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let vb = val(*b);
                    let buf = slot(adj, *a, g.len());
                    for i in 0..g.len() {
                        buf[i] += g[i] * vb[i];
                    }
                }
                if wants(*b) {
                    let va = val(*a);
                    let buf = slot(adj, *b, g.len());
                    for i in 0..g.len() {
                        buf[i] += g[i] * va[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                if wants(*a) {
                    let buf = slot(adj, *a, g.len());
                    for i in 0..g.len() {
                        buf[i] += g[i] / vb[i];
                    }
                }
                if wants(*b) {
                    let buf = slot(adj, *b, g.len());
                    for i in 0..g.len() {
                        buf[i] -= g[i] * out[i] / vb[i];
                    }
                }
            }
            Op::AddRow(a, row) => {
                if wants(*a) {
                    add_into(slot(adj, *a, g.len()), g);
                }
                if wants(*row) {
                    let c = self.value(*row).len();
                    let buf = slot(adj, *row, c);
                    for chunk in g.chunks(c) {
                        add_into(buf, chunk);
                    }
                }
            }
            Op::Scale(a, k) => {
                if wants(*a) {
                    let buf = slot(adj, *a, g.len());
                    buf.iter_mut().zip(g).for_each(|(d, gv)| *d += k * gv);
                }
            }
            Op::AddScalar(a) => {
                if wants(*a) {
                    add_into(slot(adj, *a, g.len()), g);
                }
            }
            Op::Exp(a) => {
                let buf = slot(adj, *a, g.len());
                for i in 0..g.len() {
                    buf[i] += g[i] * out[i];
                }
            }
            Op::Log(a) => {
                let va = val(*a);
                let buf = slot(adj, *a, g.len());
                for i in 0..g.len() {
                    buf[i] += g[i] / va[i];
                }
            }
            Op::Sigmoid(a) => {
                let buf = slot(adj, *a, g.len());
                for i in 0..g.len() {
                    buf[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }
            Op::LeakyRelu(a, slope) => {
                let va = val(*a);
                let buf = slot(adj, *a, g.len());
                for i in 0..g.len() {
                    buf[i] += if va[i] > 0.0 { g[i] } else { slope * g[i] };
                }
            }
            Op::Square(a) => {
                let va = val(*a);
                let buf = slot(adj, *a, g.len());
                for i in 0..g.len() {
                    buf[i] += 2.0 * va[i] * g[i];
                }
            }
            Op::Clamp(a, lo, hi) => {
                let va = val(*a);
                let buf = slot(adj, *a, g.len());
                for i in 0..g.len() {
                    if va[i] > *lo && va[i] < *hi {
                        buf[i] += g[i];
                    }
                }
            }
            Op::SumAll(a) => {
                let n = self.value(*a).len();
                let buf = slot(adj, *a, n);
                buf.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::SumCols(a) => {
                let (n, c) = self.value(*a).dims2()?;
                let buf = slot(adj, *a, n * c);
                for i in 0..n {
                    buf[i * c..(i + 1) * c].iter_mut().for_each(|d| *d += g[i]);
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if wants(p) {
                        let buf = slot(adj, p, n * w);
                        for i in 0..n {
                            add_into(
                                &mut buf[i * w..(i + 1) * w],
                                &g[i * total + offset..i * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if wants(p) {
                        add_into(slot(adj, p, len), &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceCols(a, start, end) => {
                let (n, c) = self.value(*a).dims2()?;
                let w = end - start;
                let buf = slot(adj, *a, n * c);
                for i in 0..n {
                    add_into(&mut buf[i * c + start..i * c + end], &g[i * w..(i + 1) * w]);
                }
            }
        }
        Ok(())
    }
}

fn slot(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::gradcheck::{check_gradients, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let y = tape.exp(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn second_backward_doubles_gradients() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::matrix(2, 2, vec![0.1, -0.3, 0.5, 0.2]).unwrap());
        let x = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let y = tape.matmul(x, w).unwrap();
        let y = tape.sigmoid(y);
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        let first = tape.grad(w).unwrap().to_vec();
        tape.backward(l).unwrap();
        let second = tape.grad(w).unwrap();
        for (a, b) in first.iter().zip(second) {
            assert!((2.0 * a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn records_are_topological() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let b = tape.exp(a);
        let c = tape.mul(a, b).unwrap();
        let _ = tape.sum(c);
        for r in tape.records() {
            assert!(r.inputs.iter().all(|i| i.id() < r.output.id()));
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let d = tape.detach(a);
        let s = tape.mul(a, d).unwrap();
        let l = tape.sum(s);
        tape.backward(l).unwrap();
        // d/da of a*const(a) = const(a)
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn sigmoid_matmul_matches_finite_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random_tensor(&mut rng, vec![3, 2], 0.5);
            let x = random_tensor(&mut rng, vec![4, 3], 0.5);
            let err = check_gradients(&[w, x], 1e-5, |tape, v| {
                let y = tape.matmul(v[1], v[0])?;
                let y = tape.sigmoid(y);
                Ok(tape.sum(y))
            })
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn parameter_used_twice_accumulates_both_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = random_tensor(&mut rng, vec![3, 3], 0.5);
        let x = random_tensor(&mut rng, vec![2, 3], 0.5);
        let err = check_gradients(&[w, x], 1e-5, |tape, v| {
            let h = tape.matmul(v[1], v[0])?;
            let h = tape.leaky_relu(h, 0.2);
            let h = tape.matmul(h, v[0])?;
            let h = tape.square(h);
            Ok(tape.sum(h))
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn every_op_matches_finite_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let a = random_tensor(&mut rng, vec![3, 4], 0.8);
            let b = random_tensor(&mut rng, vec![3, 4], 0.8);
            let row = random_tensor(&mut rng, vec![1, 4], 0.8);
            let m = random_tensor(&mut rng, vec![5, 4], 0.8);
            let err = check_gradients(&[a, b, row, m], 1e-5, |t, v| {
                let s = t.add(v[0], v[1])?;
                let d = t.sub(s, v[1])?;
                let p = t.mul(d, v[1])?;
                let e = t.exp(v[1]);
                let q = t.div(p, e)?;
                let r = t.add_row(q, v[2])?;
                let sg = t.sigmoid(r);
                let lg = t.log(sg);
                let nt = t.matmul_nt(lg, v[3])?;
                let cc = t.concat_cols(&[nt, v[0]])?;
                let sl = t.slice_cols(cc, 2, 7)?;
                let st = t.concat_rows(&[sl, sl])?;
                let cl = t.clamp(st, -50.0, 50.0);
                let sc = t.scale(cl, 0.3);
                let om = t.one_minus(sc);
                let sq = t.square(om);
                let rs = t.sum_cols(sq)?;
                Ok(t.mean(rs))
            })
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}
