//! Reverse-mode autodiff on an append-only tape.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each operation validates
//! shapes, computes its value eagerly, and records enough structure for the
//! backward sweep, which walks the tape in reverse creation order. Consumers
//! always have larger indices than producers, so one reverse pass accumulates
//! every gradient exactly once.
//!
//! Parameters live outside the graph in a [`ParamSet`] and are leased in as
//! leaf nodes; a parameter used twice binds to the same node, so its gradient
//! is accumulated into the store exactly once per backward call.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::{strides, ParamId, ParamSet, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MinElem(NodeId, NodeId),
    MaxElem(NodeId, NodeId),
    AddBias {
        a: NodeId,
        bias: NodeId,
    },
    Scale {
        a: NodeId,
        c: f64,
    },
    AddScalar {
        a: NodeId,
    },
    PowScalar {
        a: NodeId,
        p: f64,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Ln(NodeId),
    Exp(NodeId),
    Abs(NodeId),
    Clamp {
        a: NodeId,
        lo: f64,
        hi: f64,
    },
    /// `a` is `[B, m, k]` (rank 2 means `B = 1`). `b` is `[Bb, k, n]`
    /// (`[Bb, n, k]` when `trans_b`); rank-2 `b` is shared across the batch,
    /// and `Bb < B` cycles with period `Bb`.
    MatMul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
    },
    Softmax {
        a: NodeId,
        axis: usize,
    },
    LogSumExp {
        a: NodeId,
        axis: usize,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    Reshape {
        a: NodeId,
    },
    Permute {
        a: NodeId,
        perm: Vec<usize>,
    },
    SumAll(NodeId),
    SumAxis {
        a: NodeId,
        axis: usize,
    },
    MeanAxis {
        a: NodeId,
        axis: usize,
    },
    MaxAxis {
        a: NodeId,
        axis: usize,
    },
    Repeat {
        a: NodeId,
        axis: usize,
        times: usize,
    },
    ConcatLast(NodeId, NodeId),
    Stack {
        parts: Vec<NodeId>,
    },
    GatherRows {
        a: NodeId,
        indices: Vec<usize>,
    },
    GatherLast {
        a: NodeId,
        indices: Vec<usize>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    UpsampleBilinear {
        x: NodeId,
        out_h: usize,
        out_w: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Append-only autodiff tape.
pub struct Graph {
    nodes: Vec<Node>,
    train: bool,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl Graph {
    /// `train = false` binds parameters as constants and refuses backward;
    /// inference graphs skip all gradient bookkeeping.
    pub fn new(train: bool) -> Graph {
        Graph {
            nodes: Vec::new(),
            train,
            param_nodes: HashMap::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    /// Gradient of the last backward call; `None` for nodes outside it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        let n = &self.nodes[id.0];
        if n.grad.is_empty() {
            None
        } else {
            Some(&n.grad)
        }
    }

    pub fn value_tensor(&self, id: NodeId) -> Tensor {
        Tensor::from_vec(&self.nodes[id.0].shape, self.nodes[id.0].data.clone())
            .expect("node shape and data always agree")
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: Vec::new(),
            requires_grad: requires_grad && self.train,
            op,
        });
        id
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant leaf.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), false, Op::Input)
    }

    /// Leaf that participates in backward without belonging to a
    /// [`ParamSet`]; its gradient is read back with [`Graph::grad`].
    pub fn input_grad(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), true, Op::Input)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.input(Tensor::scalar(v))
    }

    /// Leases a parameter onto the tape. Repeated leases return the same
    /// node, so each parameter accumulates gradient exactly once per
    /// backward call.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        let value = params.value(id);
        let node = self.push(
            value.shape().to_vec(),
            value.data().to_vec(),
            true,
            Op::Param(id),
        );
        self.param_nodes.insert(id, node);
        node
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        Ok(())
    }

    fn binary_elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        self.same_shape(a, b, what)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, req, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise minimum; ties route the gradient to the first operand.
    pub fn min_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, "min", |x, y| if x <= y { x } else { y }, Op::MinElem(a, b))
    }

    /// Elementwise maximum; ties route the gradient to the first operand.
    pub fn max_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, "max", |x, y| if x >= y { x } else { y }, Op::MaxElem(a, b))
    }

    /// `[.., C] + [C]` broadcast along the last axis.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let c = *self.nodes[a.0].shape.last().ok_or_else(|| {
            Error::shape("add_bias: operand has rank 0".to_string())
        })?;
        if self.nodes[bias.0].shape != [c] {
            return Err(Error::shape(format!(
                "add_bias: bias {:?} does not match last axis {c}",
                self.nodes[bias.0].shape
            )));
        }
        let bv = &self.nodes[bias.0].data;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .chunks(c)
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &b)| x + b).collect::<Vec<_>>())
            .collect();
        let req = self.requires(a) || self.requires(bias);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, req, Op::AddBias { a, bias }))
    }

    fn unary(
        &mut self,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> NodeId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let req = self.requires(a);
        self.push(self.nodes[a.0].shape.clone(), data, req, op)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| x * c, Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| x + c, Op::AddScalar { a })
    }

    pub fn pow_scalar(&mut self, a: NodeId, p: f64) -> NodeId {
        self.unary(a, |x| x.powf(p), Op::PowScalar { a, p })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, stable_sigmoid, Op::Sigmoid(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside the range.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp { a, lo, hi })
    }

    fn matmul_dims(&self, a: NodeId, b: NodeId, trans_b: bool) -> Result<(usize, usize, usize, usize, usize, bool)> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        let (ba, m, k, rank2) = match sa.len() {
            2 => (1, sa[0], sa[1], true),
            3 => (sa[0], sa[1], sa[2], false),
            _ => {
                return Err(Error::shape(format!(
                    "matmul: lhs must be rank 2 or 3, got {sa:?}"
                )))
            }
        };
        let (bb, bk, n) = match sb.len() {
            2 => {
                if trans_b {
                    (1, sb[1], sb[0])
                } else {
                    (1, sb[0], sb[1])
                }
            }
            3 => {
                if trans_b {
                    (sb[0], sb[2], sb[1])
                } else {
                    (sb[0], sb[1], sb[2])
                }
            }
            _ => {
                return Err(Error::shape(format!(
                    "matmul: rhs must be rank 2 or 3, got {sb:?}"
                )))
            }
        };
        if bk != k {
            return Err(Error::shape(format!(
                "matmul: inner dims {k} vs {bk} ({sa:?} x {sb:?}, trans_b={trans_b})"
            )));
        }
        if bb != 0 && ba % bb != 0 {
            return Err(Error::shape(format!(
                "matmul: batch {ba} not a multiple of rhs batch {bb}"
            )));
        }
        Ok((ba, m, k, n, bb, rank2))
    }

    /// Batched matrix product; see [`Op::MatMul`] for the broadcast rules.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` over the last two axes, without materializing the transpose.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (ba, m, k, n, bb, rank2) = self.matmul_dims(a, b, trans_b)?;
        let av = &self.nodes[a.0].data;
        let bv = &self.nodes[b.0].data;
        let mut out = vec![0.0; ba * m * n];
        for bi in 0..ba {
            let ao = bi * m * k;
            let bo = (bi % bb.max(1)) * k * n;
            let oo = bi * m * n;
            if trans_b {
                // b laid out [n, k]: rows of b are contiguous dot operands.
                for i in 0..m {
                    let arow = &av[ao + i * k..ao + (i + 1) * k];
                    for j in 0..n {
                        let brow = &bv[bo + j * k..bo + (j + 1) * k];
                        let mut acc = 0.0;
                        for p in 0..k {
                            acc += arow[p] * brow[p];
                        }
                        out[oo + i * n + j] = acc;
                    }
                }
            } else {
                for i in 0..m {
                    let arow = &av[ao + i * k..ao + (i + 1) * k];
                    let orow = &mut out[oo + i * n..oo + (i + 1) * n];
                    for p in 0..k {
                        let x = arow[p];
                        if x == 0.0 {
                            continue;
                        }
                        let brow = &bv[bo + p * n..bo + (p + 1) * n];
                        for j in 0..n {
                            orow[j] += x * brow[j];
                        }
                    }
                }
            }
        }
        let shape = if rank2 { vec![m, n] } else { vec![ba, m, n] };
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(shape, out, req, Op::MatMul { a, b, trans_b }))
    }

    fn axis_split(&self, id: NodeId, axis: usize, what: &str) -> Result<(usize, usize, usize)> {
        let shape = &self.nodes[id.0].shape;
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "{what}: axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        Ok((outer, len, inner))
    }

    /// Softmax along `axis`, max-subtracted per lane.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let (outer, len, inner) = self.axis_split(a, axis, "softmax")?;
        let av = &self.nodes[a.0].data;
        let mut out = vec![0.0; av.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for l in 0..len {
                    mx = mx.max(av[base + l * inner]);
                }
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (av[base + l * inner] - mx).exp();
                    out[base + l * inner] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[base + l * inner] /= sum;
                }
            }
        }
        let req = self.requires(a);
        Ok(self.push(self.nodes[a.0].shape.clone(), out, req, Op::Softmax { a, axis }))
    }

    /// `ln(sum(exp(x)))` along `axis` (axis removed), max-subtracted.
    pub fn logsumexp(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let (outer, len, inner) = self.axis_split(a, axis, "logsumexp")?;
        let av = &self.nodes[a.0].data;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for l in 0..len {
                    mx = mx.max(av[base + l * inner]);
                }
                let mut sum = 0.0;
                for l in 0..len {
                    sum += (av[base + l * inner] - mx).exp();
                }
                out[o * inner + i] = mx + sum.ln();
            }
        }
        let mut shape = self.nodes[a.0].shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let req = self.requires(a);
        Ok(self.push(shape, out, req, Op::LogSumExp { a, axis }))
    }

    /// Normalizes the last axis to zero mean and unit (biased) variance,
    /// then applies the affine pair: `y = gain * x_hat + bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let c = *self.nodes[x.0].shape.last().ok_or_else(|| {
            Error::shape("layer_norm: operand has rank 0".to_string())
        })?;
        if self.nodes[gain.0].shape != [c] || self.nodes[bias.0].shape != [c] {
            return Err(Error::shape(format!(
                "layer_norm: gain {:?} / bias {:?} must be [{c}]",
                self.nodes[gain.0].shape, self.nodes[bias.0].shape
            )));
        }
        if eps <= 0.0 {
            return Err(Error::invalid(format!("layer_norm: eps must be positive, got {eps}")));
        }
        let xv = &self.nodes[x.0].data;
        let gv = &self.nodes[gain.0].data;
        let bv = &self.nodes[bias.0].data;
        let mut out = vec![0.0; xv.len()];
        for (row, orow) in xv.chunks(c).zip(out.chunks_mut(c)) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                orow[j] = (row[j] - mean) * r * gv[j] + bv[j];
            }
        }
        let req = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(
            self.nodes[x.0].shape.clone(),
            out,
            req,
            Op::LayerNorm { x, gain, bias, eps },
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let expect: usize = shape.iter().product();
        if expect != self.nodes[a.0].data.len() {
            return Err(Error::shape(format!(
                "reshape: {:?} has {} elements, target {shape:?} needs {expect}",
                self.nodes[a.0].shape,
                self.nodes[a.0].data.len()
            )));
        }
        let data = self.nodes[a.0].data.clone();
        let req = self.requires(a);
        Ok(self.push(shape.to_vec(), data, req, Op::Reshape { a }))
    }

    /// General axis permutation; output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let in_shape = self.nodes[a.0].shape.clone();
        if perm.len() != in_shape.len() {
            return Err(Error::invalid(format!(
                "permute: perm {perm:?} does not match rank {}",
                in_shape.len()
            )));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::invalid(format!("permute: invalid perm {perm:?}")));
            }
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let in_str = strides(&in_shape);
        let out_str = strides(&out_shape);
        let av = &self.nodes[a.0].data;
        let mut out = vec![0.0; av.len()];
        let rank = perm.len();
        let n = av.len();
        let mut out_idx = vec![0usize; rank];
        for (flat_out, slot) in out.iter_mut().enumerate().take(n) {
            let mut rem = flat_out;
            for d in 0..rank {
                out_idx[d] = rem / out_str[d];
                rem %= out_str[d];
            }
            let mut flat_in = 0;
            for d in 0..rank {
                flat_in += out_idx[d] * in_str[perm[d]];
            }
            *slot = av[flat_in];
        }
        let req = self.requires(a);
        Ok(self.push(out_shape, out, req, Op::Permute { a, perm: perm.to_vec() }))
    }

    /// Full reduction to a scalar `[1]`.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let req = self.requires(a);
        self.push(vec![1], vec![s], req, Op::SumAll(a))
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce_axis(a, axis, "sum_axis", Reduce::Sum)
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce_axis(a, axis, "mean_axis", Reduce::Mean)
    }

    /// Max along `axis`; ties route the gradient to the lowest index.
    pub fn max_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce_axis(a, axis, "max_axis", Reduce::Max)
    }

    fn reduce_axis(&mut self, a: NodeId, axis: usize, what: &str, kind: Reduce) -> Result<NodeId> {
        let (outer, len, inner) = self.axis_split(a, axis, what)?;
        if len == 0 {
            return Err(Error::invalid(format!("{what}: axis {axis} is empty")));
        }
        let av = &self.nodes[a.0].data;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let v = match kind {
                    Reduce::Sum | Reduce::Mean => {
                        let mut s = 0.0;
                        for l in 0..len {
                            s += av[base + l * inner];
                        }
                        if matches!(kind, Reduce::Mean) {
                            s / len as f64
                        } else {
                            s
                        }
                    }
                    Reduce::Max => {
                        let mut mx = av[base];
                        for l in 1..len {
                            mx = mx.max(av[base + l * inner]);
                        }
                        mx
                    }
                };
                out[o * inner + i] = v;
            }
        }
        let mut shape = self.nodes[a.0].shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let req = self.requires(a);
        let op = match kind {
            Reduce::Sum => Op::SumAxis { a, axis },
            Reduce::Mean => Op::MeanAxis { a, axis },
            Reduce::Max => Op::MaxAxis { a, axis },
        };
        Ok(self.push(shape, out, req, op))
    }

    /// Broadcasts a size-1 axis to `times` copies.
    pub fn repeat(&mut self, a: NodeId, axis: usize, times: usize) -> Result<NodeId> {
        let (outer, len, inner) = self.axis_split(a, axis, "repeat")?;
        if len != 1 {
            return Err(Error::invalid(format!(
                "repeat: axis {axis} must have size 1, shape is {:?}",
                self.nodes[a.0].shape
            )));
        }
        if times == 0 {
            return Err(Error::invalid("repeat: times must be positive".to_string()));
        }
        let av = &self.nodes[a.0].data;
        let mut out = vec![0.0; outer * times * inner];
        for o in 0..outer {
            let src = &av[o * inner..(o + 1) * inner];
            for t in 0..times {
                let dst = (o * times + t) * inner;
                out[dst..dst + inner].copy_from_slice(src);
            }
        }
        let mut shape = self.nodes[a.0].shape.clone();
        shape[axis] = times;
        let req = self.requires(a);
        Ok(self.push(shape, out, req, Op::Repeat { a, axis, times }))
    }

    /// Concatenates along the last axis; leading dims must match.
    pub fn concat_last(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape(format!(
                "concat_last: incompatible shapes {sa:?} and {sb:?}"
            )));
        }
        let ca = sa[sa.len() - 1];
        let cb = sb[sb.len() - 1];
        let rows = self.nodes[a.0].data.len() / ca.max(1);
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&self.nodes[a.0].data[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&self.nodes[b.0].data[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = ca + cb;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(shape, out, req, Op::ConcatLast(a, b)))
    }

    /// Stacks same-shape tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("stack: no parts".to_string()));
        }
        let base = self.nodes[parts[0].0].shape.clone();
        let mut out = Vec::with_capacity(parts.len() * self.nodes[parts[0].0].data.len());
        let mut req = false;
        for &p in parts {
            if self.nodes[p.0].shape != base {
                return Err(Error::shape(format!(
                    "stack: part shape {:?} differs from {:?}",
                    self.nodes[p.0].shape, base
                )));
            }
            out.extend_from_slice(&self.nodes[p.0].data);
            req |= self.requires(p);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&base);
        Ok(self.push(shape, out, req, Op::Stack { parts: parts.to_vec() }))
    }

    /// Selects rows (axis 0) by index; duplicates allowed.
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let shape = self.nodes[a.0].shape.clone();
        if shape.is_empty() {
            return Err(Error::shape("gather_rows: rank-0 operand".to_string()));
        }
        let rows = shape[0];
        let row_len: usize = shape[1..].iter().product();
        for &i in indices {
            if i >= rows {
                return Err(Error::invalid(format!(
                    "gather_rows: index {i} out of range for {rows} rows"
                )));
            }
        }
        let av = &self.nodes[a.0].data;
        let mut out = Vec::with_capacity(indices.len() * row_len);
        for &i in indices {
            out.extend_from_slice(&av[i * row_len..(i + 1) * row_len]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        let req = self.requires(a);
        Ok(self.push(out_shape, out, req, Op::GatherRows { a, indices: indices.to_vec() }))
    }

    /// Selects entries of the last axis by index.
    pub fn gather_last(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let shape = self.nodes[a.0].shape.clone();
        let c = *shape.last().ok_or_else(|| Error::shape("gather_last: rank-0 operand".to_string()))?;
        for &i in indices {
            if i >= c {
                return Err(Error::invalid(format!(
                    "gather_last: index {i} out of range for last axis {c}"
                )));
            }
        }
        let av = &self.nodes[a.0].data;
        let rows = av.len() / c.max(1);
        let mut out = Vec::with_capacity(rows * indices.len());
        for r in 0..rows {
            for &i in indices {
                out.push(av[r * c + i]);
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = indices.len();
        let req = self.requires(a);
        Ok(self.push(out_shape, out, req, Op::GatherLast { a, indices: indices.to_vec() }))
    }

    /// 2-D convolution, NHWC layout, zero padding.
    /// `x` is `[B, H, W, Cin]`, `w` is `[KH, KW, Cin, Cout]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d: x {xs:?} must be [B,H,W,Cin], w {ws:?} must be [KH,KW,Cin,Cout]"
            )));
        }
        let (bn, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw, wcin, cout) = (ws[0], ws[1], ws[2], ws[3]);
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d: input channels {cin} vs kernel channels {wcin}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be positive".to_string()));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        if let Some(bias) = b {
            if self.nodes[bias.0].shape != [cout] {
                return Err(Error::shape(format!(
                    "conv2d: bias {:?} must be [{cout}]",
                    self.nodes[bias.0].shape
                )));
            }
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let xv = &self.nodes[x.0].data;
        let wv = &self.nodes[w.0].data;
        let mut out = vec![0.0; bn * oh * ow * cout];
        for bi in 0..bn {
            for oy in 0..oh {
                for ox in 0..ow {
                    let obase = ((bi * oh + oy) * ow + ox) * cout;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let xbase = ((bi * h + iy as usize) * wd + ix as usize) * cin;
                            let wbase = (ky * kw + kx) * cin * cout;
                            for ci in 0..cin {
                                let xval = xv[xbase + ci];
                                if xval == 0.0 {
                                    continue;
                                }
                                let wrow = &wv[wbase + ci * cout..wbase + (ci + 1) * cout];
                                let orow = &mut out[obase..obase + cout];
                                for co in 0..cout {
                                    orow[co] += xval * wrow[co];
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(bias) = b {
            let bv = &self.nodes[bias.0].data;
            for chunk in out.chunks_mut(cout) {
                for (o, &bb) in chunk.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let req = self.requires(x)
            || self.requires(w)
            || b.map(|bias| self.requires(bias)).unwrap_or(false);
        Ok(self.push(
            vec![bn, oh, ow, cout],
            out,
            req,
            Op::Conv2d { x, w, b, stride, pad },
        ))
    }

    /// Bilinear resize of `[B, H, W, C]` with half-pixel centers
    /// (the align_corners=false convention).
    pub fn upsample_bilinear(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 4 {
            return Err(Error::shape(format!(
                "upsample_bilinear: input {xs:?} must be [B,H,W,C]"
            )));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("upsample_bilinear: empty output".to_string()));
        }
        let (bn, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        let xv = &self.nodes[x.0].data;
        let mut out = vec![0.0; bn * out_h * out_w * c];
        for bi in 0..bn {
            for oy in 0..out_h {
                let (y0, y1, wy) = bilinear_axis(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1, wx) = bilinear_axis(ox, w, out_w);
                    let obase = ((bi * out_h + oy) * out_w + ox) * c;
                    let i00 = ((bi * h + y0) * w + x0) * c;
                    let i01 = ((bi * h + y0) * w + x1) * c;
                    let i10 = ((bi * h + y1) * w + x0) * c;
                    let i11 = ((bi * h + y1) * w + x1) * c;
                    for ch in 0..c {
                        out[obase + ch] = (1.0 - wy) * (1.0 - wx) * xv[i00 + ch]
                            + (1.0 - wy) * wx * xv[i01 + ch]
                            + wy * (1.0 - wx) * xv[i10 + ch]
                            + wy * wx * xv[i11 + ch];
                    }
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(
            vec![bn, out_h, out_w, c],
            out,
            req,
            Op::UpsampleBilinear { x, out_h, out_w },
        ))
    }

    /// Reverse sweep from a scalar loss. Populates gradients of every
    /// reachable node and folds parameter gradients into `params`
    /// (additively; parameters not on the tape keep their stored gradient).
    pub fn backward(&mut self, loss: NodeId, params: &mut ParamSet) -> Result<()> {
        if !self.train {
            return Err(Error::invalid(
                "backward on an inference graph".to_string(),
            ));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for n in &mut self.nodes {
            if n.requires_grad {
                n.grad = vec![0.0; n.data.len()];
            } else {
                n.grad = Vec::new();
            }
        }
        if !self.nodes[loss.0].requires_grad {
            // Loss does not depend on any trainable leaf; nothing to do.
            return Ok(());
        }
        self.nodes[loss.0].grad[0] = 1.0;
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_empty() {
                continue;
            }
            self.step_backward(i)?;
            if let Op::Param(pid) = self.nodes[i].op {
                params.accumulate_grad(pid, &self.nodes[i].grad);
            }
        }
        Ok(())
    }

    fn add_grad(&mut self, id: NodeId, contrib: &[f64]) {
        let n = &mut self.nodes[id.0];
        if !n.requires_grad {
            return;
        }
        debug_assert_eq!(n.grad.len(), contrib.len());
        for (g, c) in n.grad.iter_mut().zip(contrib) {
            *g += c;
        }
    }

    #[allow(clippy::too_many_lines)]
    fn step_backward(&mut self, i: usize) -> Result<()> {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                let g = self.nodes[i].grad.clone();
                self.add_grad(a, &g);
                self.add_grad(b, &g);
            }
            Op::Sub(a, b) => {
                let g = self.nodes[i].grad.clone();
                self.add_grad(a, &g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.add_grad(b, &neg);
            }
            Op::Mul(a, b) => {
                let contrib_a: Vec<f64> = self.nodes[i]
                    .grad
                    .iter()
                    .zip(&self.nodes[b.0].data)
                    .map(|(&g, &y)| g * y)
                    .collect();
                let contrib_b: Vec<f64> = self.nodes[i]
                    .grad
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(&g, &x)| g * x)
                    .collect();
                self.add_grad(a, &contrib_a);
                self.add_grad(b, &contrib_b);
            }
            Op::Div(a, b) => {
                let contrib_a: Vec<f64> = self.nodes[i]
                    .grad
                    .iter()
                    .zip(&self.nodes[b.0].data)
                    .map(|(&g, &y)| g / y)
                    .collect();
                let contrib_b: Vec<f64> = self.nodes[i]
                    .grad
                    .iter()
                    .zip(self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data))
                    .map(|(&g, (&x, &y))| -g * x / (y * y))
                    .collect();
                self.add_grad(a, &contrib_a);
                self.add_grad(b, &contrib_b);
            }
            Op::MinElem(a, b) | Op::MaxElem(a, b) => {
                let take_a = |x: f64, y: f64| match self.nodes[i].op {
                    Op::MinElem(..) => x <= y,
                    _ => x >= y,
                };
                let n = self.nodes[i].grad.len();
                let mut ca = vec![0.0; n];
                let mut cb = vec![0.0; n];
                for j in 0..n {
                    let x = self.nodes[a.0].data[j];
                    let y = self.nodes[b.0].data[j];
                    let g = self.nodes[i].grad[j];
                    if take_a(x, y) {
                        ca[j] = g;
                    } else {
                        cb[j] = g;
                    }
                }
                self.add_grad(a, &ca);
                self.add_grad(b, &cb);
            }
            Op::AddBias { a, bias } => {
                let g = self.nodes[i].grad.clone();
                let c = self.nodes[bias.0].data.len();
                self.add_grad(a, &g);
                let mut cb = vec![0.0; c];
                for row in g.chunks(c) {
                    for (acc, &v) in cb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                self.add_grad(bias, &cb);
            }
            Op::Scale { a, c } => {
                let contrib: Vec<f64> = self.nodes[i].grad.iter().map(|&g| g * c).collect();
                self.add_grad(a, &contrib);
            }
            Op::AddScalar { a } => {
                let g = self.nodes[i].grad.clone();
                self.add_grad(a, &g);
            }
            Op::PowScalar { a, p } => {
                let contrib: Vec<f64> = self.nodes[i]
                    .grad
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(&g, &x)| g * p * x.powf(p - 1.0))
                    .collect();
                self.add_grad(a, &contrib);
            }
            Op::Relu(a) => {
                let contrib: Vec<f64> = self.nodes[i]
                    .grad
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                self.add_grad(a, &contrib);
            }
            Op::Sigmoid(a) => {
                let contrib: Vec<f64> = self.nodes[i]
                    .grad
                    .iter()
                    .zip(&self.nodes[i].data)
                    .map(|(&g, &y)| g * y * (1.0 - y))
                    .collect();
                self.add_grad(a, &contrib);
            }
            Op::Ln(a) => {
                let contrib: Vec<f64> = self.nodes[i]
                    .grad
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(&g, &x)| g / x)
                    .collect();
                self.add_grad(a, &contrib);
            }
            Op::Exp(a) => {
                let contrib: Vec<f64> = self.nodes[i]
                    .grad
                    .iter()
                    .zip(&self.nodes[i].data)
                    .map(|(&g, &y)| g * y)
                    .collect();
                self.add_grad(a, &contrib);
            }
            Op::Abs(a) => {
                let contrib: Vec<f64> = self.nodes[i]
                    .grad
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(&g, &x)| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.add_grad(a, &contrib);
            }
            Op::Clamp { a, lo, hi } => {
                let contrib: Vec<f64> = self.nodes[i]
                    .grad
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(&g, &x)| if x > lo && x < hi { g } else { 0.0 })
                    .collect();
                self.add_grad(a, &contrib);
            }
            Op::MatMul { a, b, trans_b } => {
                self.backward_matmul(i, a, b, trans_b)?;
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = self.axis_split(NodeId(i), axis, "softmax")?;
                let s = &self.nodes[i].data;
                let g = &self.nodes[i].grad;
                let mut contrib = vec![0.0; s.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let base = o * len * inner + ii;
                        let mut dot = 0.0;
                        for l in 0..len {
                            let k = base + l * inner;
                            dot += g[k] * s[k];
                        }
                        for l in 0..len {
                            let k = base + l * inner;
                            contrib[k] = s[k] * (g[k] - dot);
                        }
                    }
                }
                self.add_grad(a, &contrib);
            }
            Op::LogSumExp { a, axis } => {
                let (outer, len, inner) = self.axis_split(a, axis, "logsumexp")?;
                let xv = &self.nodes[a.0].data;
                let yv = &self.nodes[i].data;
                let g = &self.nodes[i].grad;
                let mut contrib = vec![0.0; xv.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let lane_out = o * inner + ii;
                        let base = o * len * inner + ii;
                        for l in 0..len {
                            let k = base + l * inner;
                            contrib[k] = g[lane_out] * (xv[k] - yv[lane_out]).exp();
                        }
                    }
                }
                self.add_grad(a, &contrib);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let c = *self.nodes[x.0].shape.last().unwrap();
                let cf = c as f64;
                let xv = &self.nodes[x.0].data;
                let gv = &self.nodes[gain.0].data;
                let gout = &self.nodes[i].grad;
                let rows = xv.len() / c;
                let mut cx = vec![0.0; xv.len()];
                let mut cgain = vec![0.0; c];
                let mut cbias = vec![0.0; c];
                for r in 0..rows {
                    let row = &xv[r * c..(r + 1) * c];
                    let grow = &gout[r * c..(r + 1) * c];
                    let mean = row.iter().sum::<f64>() / cf;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cf;
                    let rstd = 1.0 / (var + eps).sqrt();
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..c {
                        let xhat = (row[j] - mean) * rstd;
                        let dxhat = grow[j] * gv[j];
                        cgain[j] += grow[j] * xhat;
                        cbias[j] += grow[j];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                    }
                    mean_dxhat /= cf;
                    mean_dxhat_xhat /= cf;
                    for j in 0..c {
                        let xhat = (row[j] - mean) * rstd;
                        let dxhat = grow[j] * gv[j];
                        cx[r * c + j] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                self.add_grad(x, &cx);
                self.add_grad(gain, &cgain);
                self.add_grad(bias, &cbias);
            }
            Op::Reshape { a } => {
                let g = self.nodes[i].grad.clone();
                self.add_grad(a, &g);
            }
            Op::Permute { a, perm } => {
                let in_shape = &self.nodes[a.0].shape;
                let out_shape = &self.nodes[i].shape;
                let in_str = strides(in_shape);
                let out_str = strides(out_shape);
                let rank = perm.len();
                let g = &self.nodes[i].grad;
                let mut contrib = vec![0.0; g.len()];
                let mut out_idx = vec![0usize; rank];
                for (flat_out, &gv) in g.iter().enumerate() {
                    let mut rem = flat_out;
                    for d in 0..rank {
                        out_idx[d] = rem / out_str[d];
                        rem %= out_str[d];
                    }
                    let mut flat_in = 0;
                    for d in 0..rank {
                        flat_in += out_idx[d] * in_str[perm[d]];
                    }
                    contrib[flat_in] += gv;
                }
                self.add_grad(a, &contrib);
            }
            Op::SumAll(a) => {
                let g = self.nodes[i].grad[0];
                let contrib = vec![g; self.nodes[a.0].data.len()];
                self.add_grad(a, &contrib);
            }
            Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
                let (outer, len, inner) = self.axis_split(a, axis, "reduce")?;
                let scale = if matches!(self.nodes[i].op, Op::MeanAxis { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let g = &self.nodes[i].grad;
                let mut contrib = vec![0.0; self.nodes[a.0].data.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let gv = g[o * inner + ii] * scale;
                        let base = o * len * inner + ii;
                        for l in 0..len {
                            contrib[base + l * inner] = gv;
                        }
                    }
                }
                self.add_grad(a, &contrib);
            }
            Op::MaxAxis { a, axis } => {
                let (outer, len, inner) = self.axis_split(a, axis, "max_axis")?;
                let xv = &self.nodes[a.0].data;
                let g = &self.nodes[i].grad;
                let mut contrib = vec![0.0; xv.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let base = o * len * inner + ii;
                        let mut best = 0;
                        for l in 1..len {
                            if xv[base + l * inner] > xv[base + best * inner] {
                                best = l;
                            }
                        }
                        contrib[base + best * inner] = g[o * inner + ii];
                    }
                }
                self.add_grad(a, &contrib);
            }
            Op::Repeat { a, axis, times } => {
                let out_split = self.axis_split(NodeId(i), axis, "repeat")?;
                let (outer, _, inner) = out_split;
                let g = &self.nodes[i].grad;
                let mut contrib = vec![0.0; self.nodes[a.0].data.len()];
                for o in 0..outer {
                    for t in 0..times {
                        let src = (o * times + t) * inner;
                        let dst = o * inner;
                        for ii in 0..inner {
                            contrib[dst + ii] += g[src + ii];
                        }
                    }
                }
                self.add_grad(a, &contrib);
            }
            Op::ConcatLast(a, b) => {
                let ca = *self.nodes[a.0].shape.last().unwrap();
                let cb = *self.nodes[b.0].shape.last().unwrap();
                let g = &self.nodes[i].grad;
                let rows = g.len() / (ca + cb);
                let mut ga = vec![0.0; rows * ca];
                let mut gb = vec![0.0; rows * cb];
                for r in 0..rows {
                    let grow = &g[r * (ca + cb)..(r + 1) * (ca + cb)];
                    ga[r * ca..(r + 1) * ca].copy_from_slice(&grow[..ca]);
                    gb[r * cb..(r + 1) * cb].copy_from_slice(&grow[ca..]);
                }
                self.add_grad(a, &ga);
                self.add_grad(b, &gb);
            }
            Op::Stack { parts } => {
                let part_len = self.nodes[parts[0].0].data.len();
                let g = self.nodes[i].grad.clone();
                for (pi, &p) in parts.iter().enumerate() {
                    self.add_grad(p, &g[pi * part_len..(pi + 1) * part_len]);
                }
            }
            Op::GatherRows { a, indices } => {
                let row_len: usize = self.nodes[a.0].shape[1..].iter().product();
                let g = &self.nodes[i].grad;
                let mut contrib = vec![0.0; self.nodes[a.0].data.len()];
                for (r, &src) in indices.iter().enumerate() {
                    for j in 0..row_len {
                        contrib[src * row_len + j] += g[r * row_len + j];
                    }
                }
                self.add_grad(a, &contrib);
            }
            Op::GatherLast { a, indices } => {
                let c = *self.nodes[a.0].shape.last().unwrap();
                let k = indices.len();
                let g = &self.nodes[i].grad;
                let rows = g.len() / k.max(1);
                let mut contrib = vec![0.0; self.nodes[a.0].data.len()];
                for r in 0..rows {
                    for (j, &src) in indices.iter().enumerate() {
                        contrib[r * c + src] += g[r * k + j];
                    }
                }
                self.add_grad(a, &contrib);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                self.backward_conv2d(i, x, w, b, stride, pad);
            }
            Op::UpsampleBilinear { x, out_h, out_w } => {
                let xs = &self.nodes[x.0].shape;
                let (bn, h, wd, c) = (xs[0], xs[1], xs[2], xs[3]);
                let g = &self.nodes[i].grad;
                let mut contrib = vec![0.0; self.nodes[x.0].data.len()];
                for bi in 0..bn {
                    for oy in 0..out_h {
                        let (y0, y1, wy) = bilinear_axis(oy, h, out_h);
                        for ox in 0..out_w {
                            let (x0, x1, wx) = bilinear_axis(ox, wd, out_w);
                            let obase = ((bi * out_h + oy) * out_w + ox) * c;
                            let i00 = ((bi * h + y0) * wd + x0) * c;
                            let i01 = ((bi * h + y0) * wd + x1) * c;
                            let i10 = ((bi * h + y1) * wd + x0) * c;
                            let i11 = ((bi * h + y1) * wd + x1) * c;
                            for ch in 0..c {
                                let gv = g[obase + ch];
                                contrib[i00 + ch] += (1.0 - wy) * (1.0 - wx) * gv;
                                contrib[i01 + ch] += (1.0 - wy) * wx * gv;
                                contrib[i10 + ch] += wy * (1.0 - wx) * gv;
                                contrib[i11 + ch] += wy * wx * gv;
                            }
                        }
                    }
                }
                self.add_grad(x, &contrib);
            }
        }
        Ok(())
    }

    fn backward_matmul(&mut self, i: usize, a: NodeId, b: NodeId, trans_b: bool) -> Result<()> {
        let (ba, m, k, n, bb, _) = self.matmul_dims(a, b, trans_b)?;
        let bb = bb.max(1);
        let g = &self.nodes[i].grad;
        let av = &self.nodes[a.0].data;
        let bv = &self.nodes[b.0].data;
        let mut ca = vec![0.0; av.len()];
        let mut cb = vec![0.0; bv.len()];
        for bi in 0..ba {
            let ao = bi * m * k;
            let bo = (bi % bb) * k * n;
            let go = bi * m * n;
            if trans_b {
                // out[i,j] = sum_p a[i,p] * b[j,p]
                for ii in 0..m {
                    let grow = &g[go + ii * n..go + (ii + 1) * n];
                    let carow = &mut ca[ao + ii * k..ao + (ii + 1) * k];
                    for j in 0..n {
                        let gv = grow[j];
                        if gv == 0.0 {
                            continue;
                        }
                        let brow = &bv[bo + j * k..bo + (j + 1) * k];
                        for p in 0..k {
                            carow[p] += gv * brow[p];
                        }
                    }
                }
                for ii in 0..m {
                    let grow = &g[go + ii * n..go + (ii + 1) * n];
                    let arow = &av[ao + ii * k..ao + (ii + 1) * k];
                    for j in 0..n {
                        let gv = grow[j];
                        if gv == 0.0 {
                            continue;
                        }
                        let cbrow = &mut cb[bo + j * k..bo + (j + 1) * k];
                        for p in 0..k {
                            cbrow[p] += gv * arow[p];
                        }
                    }
                }
            } else {
                // out[i,j] = sum_p a[i,p] * b[p,j]
                for ii in 0..m {
                    let grow = &g[go + ii * n..go + (ii + 1) * n];
                    let carow = &mut ca[ao + ii * k..ao + (ii + 1) * k];
                    for p in 0..k {
                        let brow = &bv[bo + p * n..bo + (p + 1) * n];
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += grow[j] * brow[j];
                        }
                        carow[p] += acc;
                    }
                }
                for ii in 0..m {
                    let grow = &g[go + ii * n..go + (ii + 1) * n];
                    let arow = &av[ao + ii * k..ao + (ii + 1) * k];
                    for p in 0..k {
                        let xv = arow[p];
                        if xv == 0.0 {
                            continue;
                        }
                        let cbrow = &mut cb[bo + p * n..bo + (p + 1) * n];
                        for j in 0..n {
                            cbrow[j] += xv * grow[j];
                        }
                    }
                }
            }
        }
        self.add_grad(a, &ca);
        self.add_grad(b, &cb);
        Ok(())
    }

    fn backward_conv2d(
        &mut self,
        i: usize,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) {
        let xs = &self.nodes[x.0].shape;
        let ws = &self.nodes[w.0].shape;
        let (bn, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw, _, cout) = (ws[0], ws[1], ws[2], ws[3]);
        let os = &self.nodes[i].shape;
        let (oh, ow) = (os[1], os[2]);
        let g = &self.nodes[i].grad;
        let xv = &self.nodes[x.0].data;
        let wv = &self.nodes[w.0].data;
        let mut cx = vec![0.0; xv.len()];
        let mut cw = vec![0.0; wv.len()];
        let mut cbias = vec![0.0; cout];
        for bi in 0..bn {
            for oy in 0..oh {
                for ox in 0..ow {
                    let obase = ((bi * oh + oy) * ow + ox) * cout;
                    let grow = &g[obase..obase + cout];
                    for (acc, &gv) in cbias.iter_mut().zip(grow) {
                        *acc += gv;
                    }
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let xbase = ((bi * h + iy as usize) * wd + ix as usize) * cin;
                            let wbase = (ky * kw + kx) * cin * cout;
                            for ci in 0..cin {
                                let wrow = &wv[wbase + ci * cout..wbase + (ci + 1) * cout];
                                let mut acc = 0.0;
                                for co in 0..cout {
                                    acc += grow[co] * wrow[co];
                                }
                                cx[xbase + ci] += acc;
                                let xval = xv[xbase + ci];
                                if xval != 0.0 {
                                    let cwrow =
                                        &mut cw[wbase + ci * cout..wbase + (ci + 1) * cout];
                                    for co in 0..cout {
                                        cwrow[co] += xval * grow[co];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        self.add_grad(x, &cx);
        self.add_grad(w, &cw);
        if let Some(bias) = b {
            self.add_grad(bias, &cbias);
        }
    }
}

enum Reduce {
    Sum,
    Mean,
    Max,
}

/// Overflow-safe logistic; public so detached evaluation paths (the
/// instance matcher) see bit-identical probabilities to the graph op.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Source interpolation stops for one output coordinate under half-pixel
/// centers: returns (low index, high index, high weight).
fn bilinear_axis(out_i: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((out_i as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}
