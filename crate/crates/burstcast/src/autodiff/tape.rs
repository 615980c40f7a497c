//! Reverse-mode tape over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only list of nodes; parents always precede their
//! children, so the graph is acyclic by construction and `backward` is a
//! single reverse sweep. Completed graphs are immutable.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::tensor::{binary_broadcast, broadcast_shapes, reduce_to_shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    Matmul { a: usize, b: usize, transpose_b: bool },
    Sum(usize),
    Mean(usize),
    MaxReduce { x: usize, argmax: usize },
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Relu(usize),
    Softmax { x: usize, axis: usize },
    LayerNorm { x: usize, eps: f64 },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize, len: usize },
    Reshape(usize),
    EmbeddingLookup { table: usize, indices: Vec<usize> },
    Lgamma(usize),
    Dropout { x: usize, mask: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Reverse-mode computation tape.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn stable_softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Enters a tensor as a leaf (input or parameter).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = binary_broadcast(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = binary_broadcast(self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = binary_broadcast(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a.0, b.0)))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a.0))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| c * x);
        self.push(v, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a.0, c))
    }

    /// Matrix product on the trailing two axes, with leading axes either
    /// matching or absent on `b`. With `transpose_b`, computes `a · bᵀ`.
    pub fn matmul_ext(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let v = matmul_value(self.value(a), self.value(b), false, transpose_b)?;
        Ok(self.push(v, Op::Matmul { a: a.0, b: b.0, transpose_b }))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_ext(a, b, false)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let total: f64 = t.data().iter().sum();
        let v = total / t.len() as f64;
        self.push(Tensor::scalar(v), Op::Mean(a.0))
    }

    /// Max over all elements; the subgradient flows to the first argmax.
    pub fn max(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let (argmax, best) = t
            .data()
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        self.push(Tensor::scalar(best), Op::MaxReduce { x: a.0, argmax })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a.0))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a.0))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(stable_sigmoid);
        self.push(v, Op::Sigmoid(a.0))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(stable_softplus);
        self.push(v, Op::Softplus(a.0))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a.0))
    }

    pub fn lgamma(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(statrs::function::gamma::ln_gamma);
        self.push(v, Op::Lgamma(a.0))
    }

    /// Softmax along `axis`; outputs sum to 1 along that axis.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::Shape(format!(
                "softmax axis {axis} out of range for shape {:?}",
                t.shape()
            )));
        }
        let v = lanes_map(t, axis, |lane, out| {
            let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &x) in out.iter_mut().zip(lane) {
                let e = (x - m).exp();
                *o = e;
                z += e;
            }
            for o in out.iter_mut() {
                *o /= z;
            }
        });
        Ok(self.push(v, Op::Softmax { x: a.0, axis }))
    }

    /// Normalizes the last axis to zero mean / unit variance. Affine terms,
    /// when wanted, are separate `mul`/`add` nodes.
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        let t = self.value(a);
        if t.rank() == 0 {
            return Err(Error::Shape("layer_norm needs rank >= 1".into()));
        }
        let axis = t.rank() - 1;
        let v = lanes_map(t, axis, |lane, out| {
            let n = lane.len() as f64;
            let mu = lane.iter().sum::<f64>() / n;
            let var = lane.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, &x) in out.iter_mut().zip(lane) {
                *o = (x - mu) * inv;
            }
        });
        Ok(self.push(v, Op::LayerNorm { x: a.0, eps }))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!(
                "concat axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::Shape(format!(
                    "concat shapes {:?} and {:?} differ off axis {axis}",
                    first,
                    s
                )));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; out_shape.iter().product()];
        let row = axis_total * inner;
        let mut col_off = 0usize;
        for &p in parts {
            let t = self.value(p);
            let d = t.shape()[axis];
            let src = t.data();
            for o in 0..outer {
                let dst = &mut data[o * row + col_off..o * row + col_off + d * inner];
                dst.copy_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
            }
            col_off += d * inner;
        }
        let v = Tensor::from_vec(out_shape, data)?;
        Ok(self.push(v, Op::Concat { parts: parts.iter().map(|p| p.0).collect(), axis }))
    }

    /// Contiguous sub-range along one axis.
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let t = self.value(a);
        if axis >= t.rank() || start + len > t.shape()[axis] {
            return Err(Error::Shape(format!(
                "slice [{start}, {}) on axis {axis} out of range for shape {:?}",
                start + len,
                t.shape()
            )));
        }
        let outer: usize = t.shape()[..axis].iter().product();
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let d = t.shape()[axis];
        let mut out_shape = t.shape().to_vec();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        let src = t.data();
        for o in 0..outer {
            let base = o * d * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let v = Tensor::from_vec(out_shape, data)?;
        Ok(self.push(v, Op::Slice { x: a.0, axis, start, len }))
    }

    /// Removes `axis` by selecting a single index along it.
    pub fn select(&mut self, a: NodeId, axis: usize, index: usize) -> Result<NodeId> {
        let sliced = self.slice(a, axis, index, 1)?;
        let mut shape = self.value(sliced).shape().to_vec();
        shape.remove(axis);
        self.reshape(sliced, shape)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(a).reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(a.0)))
    }

    /// Gathers rows of a `[vocab, dim]` table; output is `[indices.len(), dim]`.
    pub fn embedding_lookup(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::Shape(format!(
                "embedding table must be rank 2, got {:?}",
                t.shape()
            )));
        }
        let (vocab, dim) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &ix in indices {
            if ix >= vocab {
                return Err(Error::Shape(format!(
                    "embedding index {ix} out of range for vocab {vocab}"
                )));
            }
            data.extend_from_slice(&t.data()[ix * dim..(ix + 1) * dim]);
        }
        let v = Tensor::from_vec(vec![indices.len(), dim], data)?;
        Ok(self.push(v, Op::EmbeddingLookup { table: table.0, indices: indices.to_vec() }))
    }

    /// Training-mode dropout with an inverted mask drawn from `rng`.
    /// Evaluation mode is simply not inserting this node.
    pub fn dropout(&mut self, a: NodeId, rate: f64, rng: &mut ChaCha8Rng) -> NodeId {
        let t = self.value(a);
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { 1.0 / keep })
            .collect();
        let data: Vec<f64> = t.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let v = Tensor::from_vec(t.shape().to_vec(), data).expect("same shape");
        self.push(v, Op::Dropout { x: a.0, mask })
    }

    /// Reverse sweep from a scalar root. Returns one gradient per node;
    /// nodes unreachable from the root get zeros.
    pub fn backward(&self, root: NodeId) -> Result<Vec<Tensor>> {
        if !self.value(root).is_scalar() {
            return Err(Error::Domain(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::filled(self.value(root).shape(), 1.0));

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_parents(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        Ok(grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.unwrap_or_else(|| Tensor::zeros(self.nodes[i].value.shape())))
            .collect())
    }

    fn accumulate_parents(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], parent: usize, delta: Tensor| {
            match &mut grads[parent] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, reduce_to_shape(g, self.nodes[*a].value.shape()));
                acc(grads, *b, reduce_to_shape(g, self.nodes[*b].value.shape()));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, reduce_to_shape(g, self.nodes[*a].value.shape()));
                let neg = g.map(|x| -x);
                acc(grads, *b, reduce_to_shape(&neg, self.nodes[*b].value.shape()));
            }
            Op::Mul(a, b) => {
                let ga = binary_broadcast(g, &self.nodes[*b].value, |x, y| x * y).unwrap();
                let gb = binary_broadcast(g, &self.nodes[*a].value, |x, y| x * y).unwrap();
                acc(grads, *a, reduce_to_shape(&ga, self.nodes[*a].value.shape()));
                acc(grads, *b, reduce_to_shape(&gb, self.nodes[*b].value.shape()));
            }
            Op::Neg(a) => acc(grads, *a, g.map(|x| -x)),
            Op::Scale(a, c) => {
                let c = *c;
                acc(grads, *a, g.map(|x| c * x));
            }
            Op::AddScalar(a, _) => acc(grads, *a, g.clone()),
            Op::Matmul { a, b, transpose_b } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let (ga, gb) = matmul_backward(g, av, bv, *transpose_b);
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Sum(a) => {
                let s = g.scalar_value();
                acc(grads, *a, Tensor::filled(self.nodes[*a].value.shape(), s));
            }
            Op::Mean(a) => {
                let n = self.nodes[*a].value.len() as f64;
                let s = g.scalar_value() / n;
                acc(grads, *a, Tensor::filled(self.nodes[*a].value.shape(), s));
            }
            Op::MaxReduce { x, argmax } => {
                let mut t = Tensor::zeros(self.nodes[*x].value.shape());
                t.data_mut()[*argmax] = g.scalar_value();
                acc(grads, *x, t);
            }
            Op::Exp(a) => {
                let y = &self.nodes[i].value;
                let d = binary_broadcast(g, y, |gv, yv| gv * yv).unwrap();
                acc(grads, *a, d);
            }
            Op::Log(a) => {
                let x = &self.nodes[*a].value;
                let d = binary_broadcast(g, x, |gv, xv| gv / xv).unwrap();
                acc(grads, *a, d);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                let d = binary_broadcast(g, y, |gv, yv| gv * (1.0 - yv * yv)).unwrap();
                acc(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                let d = binary_broadcast(g, y, |gv, yv| gv * yv * (1.0 - yv)).unwrap();
                acc(grads, *a, d);
            }
            Op::Softplus(a) => {
                let x = &self.nodes[*a].value;
                let d = binary_broadcast(g, x, |gv, xv| gv * stable_sigmoid(xv)).unwrap();
                acc(grads, *a, d);
            }
            Op::Relu(a) => {
                let x = &self.nodes[*a].value;
                let d =
                    binary_broadcast(g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }).unwrap();
                acc(grads, *a, d);
            }
            Op::Lgamma(a) => {
                let x = &self.nodes[*a].value;
                let d = binary_broadcast(g, x, |gv, xv| {
                    gv * statrs::function::gamma::digamma(xv)
                })
                .unwrap();
                acc(grads, *a, d);
            }
            Op::Softmax { x, axis } => {
                let y = &self.nodes[i].value;
                let d = lanes_map2(y, g, *axis, |ylane, glane, out| {
                    let dot: f64 = ylane.iter().zip(glane).map(|(&yv, &gv)| yv * gv).sum();
                    for ((o, &yv), &gv) in out.iter_mut().zip(ylane).zip(glane) {
                        *o = yv * (gv - dot);
                    }
                });
                acc(grads, *x, d);
            }
            Op::LayerNorm { x, eps } => {
                let xv = &self.nodes[*x].value;
                let y = &self.nodes[i].value;
                let eps = *eps;
                let axis = xv.rank() - 1;
                // dx = inv_std * (g - mean(g) - y * mean(g .* y))
                let d = lanes_map3(xv, y, g, axis, move |xlane, ylane, glane, out| {
                    let n = xlane.len() as f64;
                    let mu = xlane.iter().sum::<f64>() / n;
                    let var = xlane.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let g_mean = glane.iter().sum::<f64>() / n;
                    let gy_mean =
                        glane.iter().zip(ylane).map(|(&gv, &yv)| gv * yv).sum::<f64>() / n;
                    for ((o, &gv), &yv) in out.iter_mut().zip(glane).zip(ylane) {
                        *o = inv * (gv - g_mean - yv * gy_mean);
                    }
                });
                acc(grads, *x, d);
            }
            Op::Concat { parts, axis } => {
                let axis = *axis;
                let out_shape = self.nodes[i].value.shape().to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let row = out_shape[axis] * inner;
                let mut col_off = 0usize;
                for &p in parts {
                    let pshape = self.nodes[p].value.shape().to_vec();
                    let d = pshape[axis];
                    let mut part = Tensor::zeros(&pshape);
                    for o in 0..outer {
                        let src = &g.data()[o * row + col_off..o * row + col_off + d * inner];
                        part.data_mut()[o * d * inner..(o + 1) * d * inner]
                            .copy_from_slice(src);
                    }
                    col_off += d * inner;
                    acc(grads, p, part);
                }
            }
            Op::Slice { x, axis, start, len } => {
                let xshape = self.nodes[*x].value.shape().to_vec();
                let outer: usize = xshape[..*axis].iter().product();
                let inner: usize = xshape[*axis + 1..].iter().product();
                let d = xshape[*axis];
                let mut full = Tensor::zeros(&xshape);
                for o in 0..outer {
                    let dst_base = o * d * inner + start * inner;
                    let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                    full.data_mut()[dst_base..dst_base + len * inner].copy_from_slice(src);
                }
                acc(grads, *x, full);
            }
            Op::Reshape(a) => {
                let target = self.nodes[*a].value.shape().to_vec();
                acc(grads, *a, g.reshaped(target).expect("same element count"));
            }
            Op::EmbeddingLookup { table, indices } => {
                let tshape = self.nodes[*table].value.shape().to_vec();
                let dim = tshape[1];
                let mut d = Tensor::zeros(&tshape);
                for (row, &ix) in indices.iter().enumerate() {
                    let src = &g.data()[row * dim..(row + 1) * dim];
                    for (slot, &v) in d.data_mut()[ix * dim..(ix + 1) * dim].iter_mut().zip(src)
                    {
                        *slot += v;
                    }
                }
                acc(grads, *table, d);
            }
            Op::Dropout { x, mask } => {
                let data: Vec<f64> =
                    g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                let d = Tensor::from_vec(self.nodes[*x].value.shape().to_vec(), data).unwrap();
                acc(grads, *x, d);
            }
        }
    }
}

/// Applies `f` to each lane along `axis`, writing into a same-shaped output.
fn lanes_map(t: &Tensor, axis: usize, f: impl Fn(&[f64], &mut [f64])) -> Tensor {
    let shape = t.shape();
    let d = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; t.len()];
    let src = t.data();
    let mut lane = vec![0.0; d];
    let mut lane_out = vec![0.0; d];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * d * inner + i;
            for (j, l) in lane.iter_mut().enumerate() {
                *l = src[base + j * inner];
            }
            f(&lane, &mut lane_out);
            for (j, &l) in lane_out.iter().enumerate() {
                out[base + j * inner] = l;
            }
        }
    }
    Tensor::from_vec(shape.to_vec(), out).expect("same shape")
}

fn lanes_map2(
    a: &Tensor,
    b: &Tensor,
    axis: usize,
    f: impl Fn(&[f64], &[f64], &mut [f64]),
) -> Tensor {
    let shape = a.shape();
    let d = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; a.len()];
    let (sa, sb) = (a.data(), b.data());
    let mut la = vec![0.0; d];
    let mut lb = vec![0.0; d];
    let mut lo = vec![0.0; d];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * d * inner + i;
            for j in 0..d {
                la[j] = sa[base + j * inner];
                lb[j] = sb[base + j * inner];
            }
            f(&la, &lb, &mut lo);
            for (j, &l) in lo.iter().enumerate() {
                out[base + j * inner] = l;
            }
        }
    }
    Tensor::from_vec(shape.to_vec(), out).expect("same shape")
}

fn lanes_map3(
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    axis: usize,
    f: impl Fn(&[f64], &[f64], &[f64], &mut [f64]),
) -> Tensor {
    let shape = a.shape();
    let d = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; a.len()];
    let (sa, sb, sc) = (a.data(), b.data(), c.data());
    let mut la = vec![0.0; d];
    let mut lb = vec![0.0; d];
    let mut lc = vec![0.0; d];
    let mut lo = vec![0.0; d];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * d * inner + i;
            for j in 0..d {
                la[j] = sa[base + j * inner];
                lb[j] = sb[base + j * inner];
                lc[j] = sc[base + j * inner];
            }
            f(&la, &lb, &lc, &mut lo);
            for (j, &l) in lo.iter().enumerate() {
                out[base + j * inner] = l;
            }
        }
    }
    Tensor::from_vec(shape.to_vec(), out).expect("same shape")
}

/// Raw batched matmul on the trailing two axes. `b` may omit leading axes,
/// in which case it is shared across the batch.
pub(crate) fn matmul_value(
    a: &Tensor,
    b: &Tensor,
    transpose_a: bool,
    transpose_b: bool,
) -> Result<Tensor> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(Error::Shape(format!(
            "matmul needs rank >= 2 operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ar, ac) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
    let (br, bc) = (b.shape()[b.rank() - 2], b.shape()[b.rank() - 1]);
    let (n, k1) = if transpose_a { (ac, ar) } else { (ar, ac) };
    let (k2, m) = if transpose_b { (bc, br) } else { (br, bc) };
    if k1 != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dimensions disagree: {:?} x {:?} (transpose_a={transpose_a}, transpose_b={transpose_b})",
            a.shape(),
            b.shape()
        )));
    }
    let lead_a: Vec<usize> = a.shape()[..a.rank() - 2].to_vec();
    let lead_b: Vec<usize> = b.shape()[..b.rank() - 2].to_vec();
    let batch: usize = lead_a.iter().product();
    let shared_b = lead_b.is_empty();
    if !shared_b && lead_a != lead_b {
        return Err(Error::Shape(format!(
            "matmul leading dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out_shape = lead_a.clone();
    out_shape.push(n);
    out_shape.push(m);
    let mut out = vec![0.0; batch * n * m];
    let a_stride = ar * ac;
    let b_stride = if shared_b { 0 } else { br * bc };
    for bi in 0..batch {
        let ablk = &a.data()[bi * a_stride..bi * a_stride + a_stride];
        let bblk = &b.data()[bi * b_stride..bi * b_stride + br * bc];
        let cblk = &mut out[bi * n * m..(bi + 1) * n * m];
        mm_block(ablk, bblk, cblk, n, k1, m, transpose_a, transpose_b, ar, ac, br, bc);
    }
    Tensor::from_vec(out_shape, out)
}

#[allow(clippy::too_many_arguments)]
fn mm_block(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    n: usize,
    k: usize,
    m: usize,
    ta: bool,
    tb: bool,
    _ar: usize,
    ac: usize,
    _br: usize,
    bc: usize,
) {
    match (ta, tb) {
        (false, false) => {
            // c[i,j] += a[i,kk] * b[kk,j]
            for i in 0..n {
                let arow = &a[i * ac..(i + 1) * ac];
                let crow = &mut c[i * m..(i + 1) * m];
                for (kk, &av) in arow.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b[kk * bc..kk * bc + m];
                    for (cj, &bj) in crow.iter_mut().zip(brow) {
                        *cj += av * bj;
                    }
                }
            }
        }
        (false, true) => {
            // c[i,j] += a[i,kk] * b[j,kk]
            for i in 0..n {
                let arow = &a[i * ac..i * ac + k];
                let crow = &mut c[i * m..(i + 1) * m];
                for (j, cj) in crow.iter_mut().enumerate() {
                    let brow = &b[j * bc..j * bc + k];
                    let mut acc = 0.0;
                    for (x, y) in arow.iter().zip(brow) {
                        acc += x * y;
                    }
                    *cj += acc;
                }
            }
        }
        (true, false) => {
            // c[i,j] += a[kk,i] * b[kk,j]
            for kk in 0..k {
                let arow = &a[kk * ac..kk * ac + n];
                let brow = &b[kk * bc..kk * bc + m];
                for (i, &av) in arow.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let crow = &mut c[i * m..(i + 1) * m];
                    for (cj, &bj) in crow.iter_mut().zip(brow) {
                        *cj += av * bj;
                    }
                }
            }
        }
        (true, true) => {
            // c[i,j] += a[kk,i] * b[j,kk]
            for i in 0..n {
                for j in 0..m {
                    let mut acc = 0.0;
                    for kk in 0..k {
                        acc += a[kk * ac + i] * b[j * bc + kk];
                    }
                    c[i * m + j] += acc;
                }
            }
        }
    }
}

/// Gradients of `c = a · b` (or `a · bᵀ`) for both operands. When `b` has no
/// leading axes the batch contributions are summed into it.
fn matmul_backward(g: &Tensor, a: &Tensor, b: &Tensor, transpose_b: bool) -> (Tensor, Tensor) {
    let ga = if transpose_b {
        // c = a b^T => da = g b
        matmul_value(g, b, false, false).expect("shapes checked at forward")
    } else {
        // c = a b => da = g b^T
        matmul_value(g, b, false, true).expect("shapes checked at forward")
    };
    let shared_b = b.rank() == 2 && a.rank() > 2;
    let gb_full = if transpose_b {
        // db = g^T a  (per batch)
        matmul_value(g, a, true, false).expect("shapes checked at forward")
    } else {
        // db = a^T g
        matmul_value(a, g, true, false).expect("shapes checked at forward")
    };
    let gb = if shared_b {
        // sum over the batch axes
        reduce_to_shape(&gb_full, b.shape())
    } else {
        gb_full
    };
    (ga, gb)
}
