//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so every input id is smaller than
//! the id of its consumer and a single reverse sweep visits each node once.
//! A tape is built per training step and thrown away afterwards.

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `[m, n] + [n]` broadcast over rows.
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Keeps `sigmoid(x)` for the reverse sweep when the input is tracked.
    Silu(Var, Option<Tensor>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    /// `scale * sum((a - b)^2)`.
    SquaredError(Var, Var, f64),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every tracked node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A leaf that gradients never flow into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::MatMul(a, b), tracked))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2("add_bias")?;
        let b = self.value(bias);
        if b.numel() != n {
            return Err(Error::Dimension(format!(
                "bias of length {} for {n} columns",
                b.numel()
            )));
        }
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let value = Tensor::from_parts(vec![m, n], out);
        let tracked = self.tracked(x) || self.tracked(bias);
        Ok(self.push(value, Op::AddBias(x, bias), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Sub(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Mul(a, b), tracked))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        let tracked = self.tracked(a);
        self.push(value, Op::Scale(a, k), tracked)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let tracked = self.tracked(a);
        if !tracked {
            let value = self.value(a).map(|x| x * sigmoid(x));
            return self.push(value, Op::Silu(a, None), false);
        }
        let sig = self.value(a).map(sigmoid);
        let value = self
            .value(a)
            .zip_map(&sig, |x, s| x * s)
            .expect("sigmoid keeps the input shape");
        self.push(value, Op::Silu(a, Some(sig)), true)
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let m = self.value(*first).dims2("concat")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat")?;
            if r != m {
                return Err(Error::Dimension(format!("concat rows {r} vs {m}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(
            Tensor::from_parts(vec![m, total], out),
            Op::ConcatCols(parts.to_vec()),
            tracked,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let tracked = self.tracked(a);
        self.push(value, Op::Sum(a), tracked)
    }

    /// `scale * sum((a - b)^2)` as a scalar node.
    pub fn squared_error(&mut self, a: Var, b: Var, scale: f64) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.same_shape(vb, "squared_error")?;
        let s: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::scalar(scale * s), Op::SquaredError(a, b, scale), tracked))
    }

    /// Mean of squared differences over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        self.squared_error(a, b, 1.0 / n)
    }

    /// Reverse sweep from a scalar node. The tape itself is left untouched.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Index {
                index: loss.0,
                len: self.nodes.len(),
            });
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &node.op {
                // Leaves keep their gradient for the caller.
                Op::Leaf => grads[id] = Some(g),
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (m, k) = va.dims2("matmul")?;
                    let n = vb.cols();
                    if self.tracked(*a) {
                        let bt = vb.transpose()?;
                        let mut da = vec![0.0; m * k];
                        gemm(g.data(), bt.data(), &mut da, m, n, k);
                        accumulate(&mut grads, *a, Tensor::from_parts(vec![m, k], da));
                    }
                    if self.tracked(*b) {
                        let at = va.transpose()?;
                        let mut db = vec![0.0; k * n];
                        gemm(at.data(), g.data(), &mut db, k, m, n);
                        accumulate(&mut grads, *b, Tensor::from_parts(vec![k, n], db));
                    }
                }
                Op::AddBias(x, bias) => {
                    if self.tracked(*bias) {
                        let n = g.cols();
                        let mut db = vec![0.0; n];
                        for row in g.data().chunks_exact(n) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        let shape = self.value(*bias).shape().to_vec();
                        accumulate(&mut grads, *bias, Tensor::from_parts(shape, db));
                    }
                    if self.tracked(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.tracked(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.tracked(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.tracked(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.tracked(*b) {
                        accumulate(&mut grads, *b, g.scale(-1.0));
                    }
                }
                Op::Mul(a, b) => {
                    if self.tracked(*a) {
                        accumulate(&mut grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?);
                    }
                    if self.tracked(*b) {
                        accumulate(&mut grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?);
                    }
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, g.scale(*k)),
                Op::Silu(a, sig) => {
                    let x = self.value(*a);
                    let sig = sig.as_ref().expect("tracked silu keeps its sigmoid");
                    let d: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .zip(sig.data())
                        .map(|((gv, x), s)| gv * s * (1.0 + x * (1.0 - s)))
                        .collect();
                    accumulate(&mut grads, *a, Tensor::from_parts(x.shape().to_vec(), d));
                }
                Op::ConcatCols(parts) => {
                    let (m, total) = g.dims2("concat grad")?;
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.tracked(p) {
                            let mut d = Vec::with_capacity(m * w);
                            for i in 0..m {
                                d.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                            }
                            accumulate(&mut grads, p, Tensor::from_parts(vec![m, w], d));
                        }
                        offset += w;
                    }
                }
                Op::Sum(a) => {
                    let shape = self.value(*a).shape();
                    accumulate(&mut grads, *a, Tensor::full(shape, g.data()[0]));
                }
                Op::SquaredError(a, b, scale) => {
                    let k = 2.0 * scale * g.data()[0];
                    let diff = self.value(*a).zip_map(self.value(*b), |x, y| k * (x - y))?;
                    if self.tracked(*b) {
                        accumulate(&mut grads, *b, diff.scale(-1.0));
                    }
                    if self.tracked(*a) {
                        accumulate(&mut grads, *a, diff);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Branch-free; `exp` overflowing to infinity gives the correct limit 0.
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
