//! Reverse-mode gradient tape.
//!
//! Nodes are appended in evaluation order, so parents always precede children
//! and a single reverse sweep from the loss visits nodes in topological order.

use std::collections::BTreeMap;

use super::{ops, NdTensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Concat(Vec<Var>, usize),
    Slice { src: Var, axis: usize, start: usize },
    Pad { src: Var, axis: usize, before: usize },
    Transpose(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f32 },
    Gelu(Var),
    Mean(Var),
    Sum(Var),
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: NdTensor,
    op: Op,
    tracked: bool,
}

/// Ordered record of primitive evaluations. Single-owner; one per training step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every tracked leaf it reaches.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<Var, NdTensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&NdTensor> {
        self.grads.get(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &NdTensor)> {
        self.grads.iter()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Next free node id.
    pub fn cursor(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &NdTensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: NdTensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: NdTensor) -> Var {
        let tracked = t.requires_grad();
        self.push(t, Op::Leaf, tracked)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&mut self, t: NdTensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    fn any(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let t = self.any(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        let t = self.any(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        let t = self.any(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), t))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let out = ops::scale(self.value(a), s);
        let t = self.any(&[a]);
        self.push(out, Op::Scale(a, s), t)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&NdTensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat(&vals, axis)?;
        let t = self.any(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), t))
    }

    pub fn slice(&mut self, src: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = ops::slice(self.value(src), axis, start, len)?;
        let t = self.any(&[src]);
        Ok(self.push(out, Op::Slice { src, axis, start }, t))
    }

    pub fn pad(&mut self, src: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let out = ops::pad(self.value(src), axis, before, after)?;
        let t = self.any(&[src]);
        Ok(self.push(out, Op::Pad { src, axis, before }, t))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = ops::transpose(self.value(a))?;
        let t = self.any(&[a]);
        Ok(self.push(out, Op::Transpose(a), t))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = ops::softmax_rows(self.value(a))?;
        let t = self.any(&[a]);
        Ok(self.push(out, Op::Softmax(a), t))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let out = ops::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let t = self.any(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, eps }, t))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = ops::gelu(self.value(a));
        let t = self.any(&[a]);
        self.push(out, Op::Gelu(a), t)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = ops::mean(self.value(a));
        let t = self.any(&[a]);
        self.push(out, Op::Mean(a), t)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = ops::sum(self.value(a));
        let t = self.any(&[a]);
        self.push(out, Op::Sum(a), t)
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mse(self.value(a), self.value(b))?;
        let t = self.any(&[a, b]);
        Ok(self.push(out, Op::Mse(a, b), t))
    }

    /// Propagates d(loss)/d(node) back to every tracked leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!("backward needs a scalar loss, got dims {:?}", lv.dims())));
        }
        let mut grads: Vec<Option<NdTensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(NdTensor::ones(lv.dims())?);
        let mut out = Gradients::default();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf = node.op {
                out.grads.insert(Var(idx), g);
                continue;
            }
            for (parent, pg) in self.local_grads(&node.op, &node.value, &g)? {
                if !self.nodes[parent.0].tracked {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += *b;
                        }
                    }
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(out)
    }

    fn local_grads(&self, op: &Op, y: &NdTensor, g: &NdTensor) -> Result<Vec<(Var, NdTensor)>> {
        let tracked = |v: &Var| self.nodes[v.0].tracked;
        let mut res = Vec::new();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if tracked(a) {
                    let bt = ops::transpose(self.value(*b))?;
                    res.push((*a, ops::matmul(g, &bt)?));
                }
                if tracked(b) {
                    let at = ops::transpose(self.value(*a))?;
                    res.push((*b, ops::matmul(&at, g)?));
                }
            }
            Op::Add(a, b) => {
                if tracked(a) {
                    res.push((*a, g.clone()));
                }
                if tracked(b) {
                    res.push((*b, ops::reduce_to(g, self.dims(*b))?));
                }
            }
            Op::Mul(a, b) => {
                if tracked(a) {
                    res.push((*a, ops::mul(g, self.value(*b))?));
                }
                if tracked(b) {
                    let ga = g.zip_map(self.value(*a), |x, y| x * y)?;
                    res.push((*b, ops::reduce_to(&ga, self.dims(*b))?));
                }
            }
            Op::Scale(a, s) => res.push((*a, ops::scale(g, *s))),
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for p in parts {
                    let n = self.dims(*p)[*axis];
                    if tracked(p) {
                        res.push((*p, ops::slice(g, *axis, start, n)?));
                    }
                    start += n;
                }
            }
            Op::Slice { src, axis, start } => {
                let total = self.dims(*src)[*axis];
                let len = g.dims()[*axis];
                res.push((*src, ops::pad(g, *axis, *start, total - start - len)?));
            }
            Op::Pad { src, axis, before } => {
                let len = self.dims(*src)[*axis];
                res.push((*src, ops::slice(g, *axis, *before, len)?));
            }
            Op::Transpose(a) => res.push((*a, ops::transpose(g)?)),
            Op::Softmax(a) => {
                let n = y.cols();
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(n).zip(g.data().chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(&p, &q)| p as f64 * q as f64).sum();
                    d.extend(yr.iter().zip(gr).map(|(&p, &q)| (p as f64 * (q as f64 - dot)) as f32));
                }
                res.push((*a, NdTensor::new(y.dims().to_vec(), d)?));
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.value(*x);
                let gam = self.value(*gamma).data();
                let dcols = xv.cols();
                let moments = ops::row_moments(xv, *eps);
                let mut dx = Vec::with_capacity(xv.len());
                let mut dgamma = vec![0f64; dcols];
                let mut dbeta = vec![0f64; dcols];
                for ((xr, gr), (mean, inv)) in xv.data().chunks(dcols).zip(g.data().chunks(dcols)).zip(moments) {
                    let xhat: Vec<f64> = xr.iter().map(|&v| (v as f64 - mean) * inv).collect();
                    let dxhat: Vec<f64> = gr.iter().zip(gam).map(|(&q, &w)| q as f64 * w as f64).collect();
                    let m1 = dxhat.iter().sum::<f64>() / dcols as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / dcols as f64;
                    for j in 0..dcols {
                        dx.push((inv * (dxhat[j] - m1 - xhat[j] * m2)) as f32);
                        dgamma[j] += gr[j] as f64 * xhat[j];
                        dbeta[j] += gr[j] as f64;
                    }
                }
                if tracked(x) {
                    res.push((*x, NdTensor::new(xv.dims().to_vec(), dx)?));
                }
                let to_t = |v: Vec<f64>, dims: &[usize]| {
                    NdTensor::new(dims.to_vec(), v.into_iter().map(|z| z as f32).collect())
                };
                if tracked(gamma) {
                    res.push((*gamma, to_t(dgamma, self.dims(*gamma))?));
                }
                if tracked(beta) {
                    res.push((*beta, to_t(dbeta, self.dims(*beta))?));
                }
            }
            Op::Gelu(a) => {
                let d = self.value(*a).zip_map(g, |x, q| ops::gelu_grad_scalar(x) * q)?;
                res.push((*a, d));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                res.push((*a, NdTensor::full(av.dims(), g.item() / av.len() as f32)?));
            }
            Op::Sum(a) => res.push((*a, NdTensor::full(self.dims(*a), g.item())?)),
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = 2.0 * g.item() / av.len() as f32;
                let diff = av.zip_map(bv, |x, y| k * (x - y))?;
                if tracked(b) {
                    res.push((*b, ops::scale(&diff, -1.0)));
                }
                if tracked(a) {
                    res.push((*a, diff));
                }
            }
        }
        if res.iter().any(|(v, t)| t.dims() != self.dims(*v)) {
            return shape_err("internal gradient shape mismatch");
        }
        Ok(res)
    }
}
