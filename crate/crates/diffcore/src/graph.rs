//! Eager reverse-mode tape over dense f64 tensors.
//!
//! Every op evaluates at record time, so building the graph *is* the forward
//! pass; `backward` walks the tape in reverse creation order (which is a
//! topological order by construction) and accumulates gradients into the
//! leaves. Stochastic inputs (reparameterization noise, uniform box draws)
//! enter as constant leaves, so backward through a sampled value is exact.
//!
//! Outputs are checked for non-finite values after every op; a NaN or inf
//! aborts with the offending node id rather than poisoning the tape.

use crate::error::DiffError;
use crate::tensor::{
    broadcast_shape, broadcast_strides, reduce_to_shape, strides_for, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnKind {
    Exp,
    Log,
    Softplus,
    LogSoftplus,
    Sigmoid,
    Tanh,
    Relu,
    Sin,
    Cos,
    Sqrt,
    Square,
}

#[derive(Clone, Debug)]
enum Op {
    Source,
    Bin { kind: BinKind, a: NodeId, b: NodeId },
    MatMul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Reshape { a: NodeId },
    Un { kind: UnKind, a: NodeId },
    AddScalar { a: NodeId },
    MulScalar { a: NodeId, c: f64 },
    SumAxis { a: NodeId, axis: usize },
    MeanAxis { a: NodeId, axis: usize },
    MaxAxis { a: NodeId, arg: Vec<usize> },
    MinAxis { a: NodeId, arg: Vec<usize> },
    SumAll { a: NodeId },
    MeanAll { a: NodeId },
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { a: NodeId, axis: usize, start: usize },
    BroadcastTo { a: NodeId },
    Softmax { a: NodeId },
    LayerNorm { a: NodeId, eps: f64 },
    Embedding { table: NodeId, indices: Vec<usize> },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients of a scalar loss with respect to the graph's leaves.
pub struct Gradients {
    map: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.map.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.map.get_mut(id.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// out = alpha * A(ta) @ B(tb) + beta * out, row-major.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    out: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // Safety: lengths are checked above and the stride pairs describe the
    // same buffers either plainly or transposed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(softplus(x)), stable across the whole line: ~x for very negative x.
fn log_softplus(x: f64) -> f64 {
    if x < -30.0 {
        x
    } else {
        softplus(x).ln()
    }
}

/// d/dx log(softplus(x)) = sigmoid(x)/softplus(x), with its -inf-side limit 1.
fn log_softplus_grad(x: f64) -> f64 {
    if x < -30.0 {
        1.0
    } else {
        sigmoid(x) / softplus(x)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn with_capacity(n: usize) -> Self {
        Graph { nodes: Vec::with_capacity(n) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Differentiable input; gradients are reported for these.
    pub fn leaf(&mut self, t: Tensor) -> Result<NodeId, DiffError> {
        self.push(t, true, Op::Source)
    }

    /// Non-differentiable input (data, noise draws, masks).
    pub fn constant(&mut self, t: Tensor) -> Result<NodeId, DiffError> {
        self.push(t, false, Op::Source)
    }

    pub fn scalar(&mut self, v: f64) -> Result<NodeId, DiffError> {
        self.constant(Tensor::scalar(v))
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Result<NodeId, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite {
                node: self.nodes.len(),
                op: op_name(&op),
            });
        }
        self.nodes.push(Node { value, requires_grad, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ---- elementwise binary ----

    fn bin(&mut self, kind: BinKind, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| {
            DiffError::ShapeMismatch {
                op: bin_name(kind),
                detail: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            }
        })?;
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let total: usize = out_shape.iter().product();
        let mut data = vec![0.0; total];
        if va.shape() == vb.shape() {
            for ((o, &x), &y) in data.iter_mut().zip(va.data()).zip(vb.data()) {
                *o = f(x, y);
            }
        } else if vb.len() == 1 {
            let y = vb.data()[0];
            for (o, &x) in data.iter_mut().zip(va.data()) {
                *o = f(x, y);
            }
        } else if va.len() == 1 {
            let x = va.data()[0];
            for (o, &y) in data.iter_mut().zip(vb.data()) {
                *o = f(x, y);
            }
        } else {
            let sa = broadcast_strides(va.shape(), &out_shape);
            let sb = broadcast_strides(vb.shape(), &out_shape);
            let so = strides_for(&out_shape);
            let (da, db) = (va.data(), vb.data());
            for (flat, o) in data.iter_mut().enumerate() {
                let mut rem = flat;
                let (mut ia, mut ib) = (0usize, 0usize);
                for d in 0..out_shape.len() {
                    let i = rem / so[d];
                    rem %= so[d];
                    ia += i * sa[d];
                    ib += i * sb[d];
                }
                *o = f(da[ia], db[ib]);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(out_shape, data)?, rg, Op::Bin { kind, a, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.bin(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.bin(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.bin(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.bin(BinKind::Div, a, b)
    }

    // ---- matmul / layout ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.ndim() != 2 || vb.ndim() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} @ {:?}", va.shape(), vb.shape()),
            });
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut data = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), false, 0.0, &mut data);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::matrix(m, n, data)?, rg, Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let va = &self.nodes[a.0].value;
        if va.ndim() != 2 {
            return Err(DiffError::ShapeMismatch {
                op: "transpose",
                detail: format!("{:?}", va.shape()),
            });
        }
        let (r, c) = (va.shape()[0], va.shape()[1]);
        let mut data = vec![0.0; r * c];
        let src = va.data();
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(c, r, data)?, rg, Op::Transpose { a })
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, DiffError> {
        let va = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != va.len() {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", va.shape(), shape),
            });
        }
        let t = Tensor::new(shape.to_vec(), va.data().to_vec())?;
        let rg = self.rg(a);
        self.push(t, rg, Op::Reshape { a })
    }

    // ---- elementwise unary ----

    fn un(&mut self, kind: UnKind, a: NodeId) -> Result<NodeId, DiffError> {
        let va = &self.nodes[a.0].value;
        let f = |x: f64| match kind {
            UnKind::Exp => x.exp(),
            UnKind::Log => x.ln(),
            UnKind::Softplus => softplus(x),
            UnKind::LogSoftplus => log_softplus(x),
            UnKind::Sigmoid => sigmoid(x),
            UnKind::Tanh => x.tanh(),
            UnKind::Relu => x.max(0.0),
            UnKind::Sin => x.sin(),
            UnKind::Cos => x.cos(),
            UnKind::Sqrt => x.sqrt(),
            UnKind::Square => x * x,
        };
        let data: Vec<f64> = va.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, rg, Op::Un { kind, a })
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.un(UnKind::Exp, a)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.un(UnKind::Log, a)
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.un(UnKind::Softplus, a)
    }

    /// log(softplus(x)) as one stable op; plain log∘softplus underflows for
    /// strongly negative inputs (degenerate box sides).
    pub fn log_softplus(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.un(UnKind::LogSoftplus, a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.un(UnKind::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.un(UnKind::Tanh, a)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.un(UnKind::Relu, a)
    }

    pub fn sin(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.un(UnKind::Sin, a)
    }

    pub fn cos(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.un(UnKind::Cos, a)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.un(UnKind::Sqrt, a)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.un(UnKind::Square, a)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, DiffError> {
        let va = &self.nodes[a.0].value;
        let data: Vec<f64> = va.data().iter().map(|&x| x + c).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, rg, Op::AddScalar { a })
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, DiffError> {
        let va = &self.nodes[a.0].value;
        let data: Vec<f64> = va.data().iter().map(|&x| x * c).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, rg, Op::MulScalar { a, c })
    }

    // ---- reductions ----

    fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        (outer, shape[axis], inner)
    }

    fn reduced_shape(shape: &[usize], axis: usize, keep: bool) -> Vec<usize> {
        let mut s = shape.to_vec();
        if keep {
            s[axis] = 1;
        } else {
            s.remove(axis);
            if s.is_empty() {
                s.push(1);
            }
        }
        s
    }

    fn check_axis(&self, id: NodeId, axis: usize, op: &'static str) -> Result<(), DiffError> {
        let nd = self.nodes[id.0].value.ndim();
        if axis >= nd {
            return Err(DiffError::ShapeMismatch {
                op,
                detail: format!("axis {} out of range for ndim {}", axis, nd),
            });
        }
        Ok(())
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize, keep: bool) -> Result<NodeId, DiffError> {
        self.check_axis(a, axis, "sum_axis")?;
        let va = &self.nodes[a.0].value;
        let (outer, dim, inner) = Self::axis_split(va.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        let src = va.data();
        for o in 0..outer {
            for d in 0..dim {
                let base = (o * dim + d) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        let shape = Self::reduced_shape(va.shape(), axis, keep);
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data)?, rg, Op::SumAxis { a, axis })
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize, keep: bool) -> Result<NodeId, DiffError> {
        self.check_axis(a, axis, "mean_axis")?;
        let dim = self.nodes[a.0].value.shape()[axis] as f64;
        let s = self.sum_axis(a, axis, keep)?;
        // reuse sum forward, but record as MeanAxis for a single backward hop
        let v = self.nodes[s.0].value.clone();
        self.nodes.pop();
        let data: Vec<f64> = v.data().iter().map(|&x| x / dim).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, rg, Op::MeanAxis { a, axis })
    }

    fn extreme_axis(
        &mut self,
        a: NodeId,
        axis: usize,
        keep: bool,
        max: bool,
    ) -> Result<NodeId, DiffError> {
        self.check_axis(a, axis, if max { "max_axis" } else { "min_axis" })?;
        let va = &self.nodes[a.0].value;
        let (outer, dim, inner) = Self::axis_split(va.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        // ties broken toward the first index along the axis (strict compare)
        let mut arg = vec![0usize; outer * inner];
        let src = va.data();
        for o in 0..outer {
            for i in 0..inner {
                let mut best = src[o * dim * inner + i];
                let mut bidx = o * dim * inner + i;
                for d in 1..dim {
                    let v = src[(o * dim + d) * inner + i];
                    if (max && v > best) || (!max && v < best) {
                        best = v;
                        bidx = (o * dim + d) * inner + i;
                    }
                }
                data[o * inner + i] = best;
                arg[o * inner + i] = bidx;
            }
        }
        let shape = Self::reduced_shape(va.shape(), axis, keep);
        let rg = self.rg(a);
        let op = if max { Op::MaxAxis { a, arg } } else { Op::MinAxis { a, arg } };
        self.push(Tensor::new(shape, data)?, rg, op)
    }

    pub fn max_axis(&mut self, a: NodeId, axis: usize, keep: bool) -> Result<NodeId, DiffError> {
        self.extreme_axis(a, axis, keep, true)
    }

    pub fn min_axis(&mut self, a: NodeId, axis: usize, keep: bool) -> Result<NodeId, DiffError> {
        self.extreme_axis(a, axis, keep, false)
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let v = &self.nodes[a.0].value;
        let s: f64 = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::MeanAll { a })
    }

    // ---- structure ----

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId, DiffError> {
        if inputs.is_empty() {
            return Err(DiffError::Invalid("concat of zero inputs".into()));
        }
        let first = self.nodes[inputs[0].0].value.shape().to_vec();
        self.check_axis(inputs[0], axis, "concat")?;
        let mut axis_total = 0usize;
        for &id in inputs {
            let s = self.nodes[id.0].value.shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(d, (x, y))| d != axis && x != y)
            {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    detail: format!("{:?} vs {:?} along axis {}", s, first, axis),
                });
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let (outer, _, inner) = Self::axis_split(&shape, axis);
        let mut data = vec![0.0; shape.iter().product()];
        let mut offset = 0usize;
        for &id in inputs {
            let v = &self.nodes[id.0].value;
            let dim = v.shape()[axis];
            let src = v.data();
            for o in 0..outer {
                let dst = (o * axis_total + offset) * inner;
                let s = o * dim * inner;
                data[dst..dst + dim * inner].copy_from_slice(&src[s..s + dim * inner]);
            }
            offset += dim;
        }
        let rg = inputs.iter().any(|&i| self.rg(i));
        self.push(
            Tensor::new(shape, data)?,
            rg,
            Op::Concat { inputs: inputs.to_vec(), axis },
        )
    }

    pub fn slice(
        &mut self,
        a: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    ) -> Result<NodeId, DiffError> {
        self.check_axis(a, axis, "slice")?;
        let va = &self.nodes[a.0].value;
        let dim = va.shape()[axis];
        if start >= end || end > dim {
            return Err(DiffError::ShapeMismatch {
                op: "slice",
                detail: format!("range {}..{} on axis of size {}", start, end, dim),
            });
        }
        let (outer, _, inner) = Self::axis_split(va.shape(), axis);
        let span = end - start;
        let mut shape = va.shape().to_vec();
        shape[axis] = span;
        let mut data = vec![0.0; outer * span * inner];
        let src = va.data();
        for o in 0..outer {
            let s = (o * dim + start) * inner;
            let d = o * span * inner;
            data[d..d + span * inner].copy_from_slice(&src[s..s + span * inner]);
        }
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data)?, rg, Op::Slice { a, axis, start })
    }

    pub fn broadcast_to(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, DiffError> {
        let va = &self.nodes[a.0].value;
        let ok = broadcast_shape(va.shape(), shape).map(|s| s == shape) == Some(true);
        if !ok {
            return Err(DiffError::ShapeMismatch {
                op: "broadcast_to",
                detail: format!("{:?} -> {:?}", va.shape(), shape),
            });
        }
        let sa = broadcast_strides(va.shape(), shape);
        let so = strides_for(shape);
        let total: usize = shape.iter().product();
        let mut data = vec![0.0; total];
        let src = va.data();
        for (flat, o) in data.iter_mut().enumerate() {
            let mut rem = flat;
            let mut ia = 0usize;
            for d in 0..shape.len() {
                let i = rem / so[d];
                rem %= so[d];
                ia += i * sa[d];
            }
            *o = src[ia];
        }
        let rg = self.rg(a);
        self.push(Tensor::new(shape.to_vec(), data)?, rg, Op::BroadcastTo { a })
    }

    /// Softmax over the last axis, max-shifted for stability.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let va = &self.nodes[a.0].value;
        let last = *va.shape().last().unwrap();
        let rows = va.len() / last;
        let mut data = vec![0.0; va.len()];
        let src = va.data();
        for r in 0..rows {
            let row = &src[r * last..(r + 1) * last];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &x) in data[r * last..(r + 1) * last].iter_mut().zip(row) {
                *o = (x - m).exp();
                z += *o;
            }
            for o in &mut data[r * last..(r + 1) * last] {
                *o /= z;
            }
        }
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, rg, Op::Softmax { a })
    }

    /// Layer normalization over the last axis (no affine part; compose with
    /// mul/add for gain and bias).
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId, DiffError> {
        let va = &self.nodes[a.0].value;
        let last = *va.shape().last().unwrap();
        let rows = va.len() / last;
        let mut data = vec![0.0; va.len()];
        let src = va.data();
        for r in 0..rows {
            let row = &src[r * last..(r + 1) * last];
            let mean = row.iter().sum::<f64>() / last as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / last as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, &x) in data[r * last..(r + 1) * last].iter_mut().zip(row) {
                *o = (x - mean) * inv;
            }
        }
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(t, rg, Op::LayerNorm { a, eps })
    }

    /// Row lookup into a 2-D table; also serves as a row-gather.
    pub fn embedding(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId, DiffError> {
        let vt = &self.nodes[table.0].value;
        if vt.ndim() != 2 {
            return Err(DiffError::ShapeMismatch {
                op: "embedding",
                detail: format!("table must be 2-D, got {:?}", vt.shape()),
            });
        }
        let (rows, cols) = (vt.shape()[0], vt.shape()[1]);
        let mut data = vec![0.0; indices.len() * cols];
        let src = vt.data();
        for (k, &idx) in indices.iter().enumerate() {
            if idx >= rows {
                return Err(DiffError::Invalid(format!(
                    "embedding index {} out of range for table with {} rows",
                    idx, rows
                )));
            }
            data[k * cols..(k + 1) * cols].copy_from_slice(&src[idx * cols..(idx + 1) * cols]);
        }
        let t = Tensor::matrix(indices.len(), cols, data)?;
        let rg = self.rg(table);
        self.push(t, rg, Op::Embedding { table, indices: indices.to_vec() })
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss. Returns gradients for every
    /// differentiable leaf; leaves with no path to the loss get exact zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, DiffError> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(DiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Op::Source = node.op {
                grads[id] = Some(g); // keep leaf gradients
                continue;
            }
            self.backprop(id, &g, &mut grads);
        }
        let mut map: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Source) || !node.requires_grad {
                continue;
            }
            let t = match grads[id].take() {
                Some(g) => Tensor::new(node.value.shape().to_vec(), g)?,
                None => Tensor::zeros(node.value.shape()),
            };
            map[id] = Some(t);
        }
        Ok(Gradients { map })
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, contrib: Vec<f64>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contrib) {
                    *a += b;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    /// Like accum but via closure producing the contribution only when needed.
    fn accum_with(
        &self,
        grads: &mut [Option<Vec<f64>>],
        id: NodeId,
        f: impl FnOnce() -> Vec<f64>,
    ) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        self.accum(grads, id, f());
    }

    fn backprop(&self, id: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Source => unreachable!("sources are retained, not backpropped"),
            Op::Bin { kind, a, b } => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let same = va.shape() == vb.shape();
                let da = |g: &[f64]| -> Vec<f64> {
                    match kind {
                        BinKind::Add | BinKind::Sub => g.to_vec(),
                        BinKind::Mul => {
                            if same {
                                g.iter().zip(vb.data()).map(|(&gi, &y)| gi * y).collect()
                            } else {
                                self.broadcast_factor(g, out.shape(), vb)
                            }
                        }
                        BinKind::Div => {
                            if same {
                                g.iter().zip(vb.data()).map(|(&gi, &y)| gi / y).collect()
                            } else {
                                let inv: Vec<f64> =
                                    vb.data().iter().map(|&y| 1.0 / y).collect();
                                let invt = Tensor::new(vb.shape().to_vec(), inv).unwrap();
                                self.broadcast_factor(g, out.shape(), &invt)
                            }
                        }
                    }
                };
                if self.nodes[a.0].requires_grad {
                    let contrib = reduce_to_shape(&da(g), out.shape(), va.shape());
                    self.accum(grads, *a, contrib);
                }
                if self.nodes[b.0].requires_grad {
                    let full: Vec<f64> = match kind {
                        BinKind::Add => g.to_vec(),
                        BinKind::Sub => g.iter().map(|&x| -x).collect(),
                        BinKind::Mul => self.broadcast_factor(g, out.shape(), va),
                        BinKind::Div => {
                            // d(a/b)/db = -a/b^2 = -out/b
                            let gv = self.broadcast_factor(g, out.shape(), out);
                            let sb = broadcast_strides(vb.shape(), out.shape());
                            let so = strides_for(out.shape());
                            let dbv = vb.data();
                            gv.iter()
                                .enumerate()
                                .map(|(flat, &x)| {
                                    let mut rem = flat;
                                    let mut ib = 0usize;
                                    for d in 0..out.shape().len() {
                                        let i = rem / so[d];
                                        rem %= so[d];
                                        ib += i * sb[d];
                                    }
                                    -x / dbv[ib]
                                })
                                .collect()
                        }
                    };
                    let contrib = reduce_to_shape(&full, out.shape(), vb.shape());
                    self.accum(grads, *b, contrib);
                }
            }
            Op::MatMul { a, b } => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.nodes[a.0].requires_grad {
                    let buf = grads[a.0].get_or_insert_with(|| vec![0.0; m * k]);
                    gemm(m, n, k, g, false, vb.data(), true, 1.0, buf);
                }
                if self.nodes[b.0].requires_grad {
                    let buf = grads[b.0].get_or_insert_with(|| vec![0.0; k * n]);
                    gemm(k, m, n, va.data(), true, g, false, 1.0, buf);
                }
            }
            Op::Transpose { a } => {
                let (c, r) = (out.shape()[0], out.shape()[1]);
                self.accum_with(grads, *a, || {
                    let mut contrib = vec![0.0; r * c];
                    for i in 0..c {
                        for j in 0..r {
                            contrib[j * c + i] = g[i * r + j];
                        }
                    }
                    contrib
                });
            }
            Op::Reshape { a } => self.accum(grads, *a, g.to_vec()),
            Op::Un { kind, a } => {
                let x = self.nodes[a.0].value.data();
                let y = out.data();
                self.accum_with(grads, *a, || {
                    g.iter()
                        .enumerate()
                        .map(|(i, &gi)| {
                            gi * match kind {
                                UnKind::Exp => y[i],
                                UnKind::Log => 1.0 / x[i],
                                UnKind::Softplus => sigmoid(x[i]),
                                UnKind::LogSoftplus => log_softplus_grad(x[i]),
                                UnKind::Sigmoid => y[i] * (1.0 - y[i]),
                                UnKind::Tanh => 1.0 - y[i] * y[i],
                                UnKind::Relu => {
                                    if x[i] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                UnKind::Sin => x[i].cos(),
                                UnKind::Cos => -x[i].sin(),
                                UnKind::Sqrt => 0.5 / y[i],
                                UnKind::Square => 2.0 * x[i],
                            }
                        })
                        .collect()
                });
            }
            Op::AddScalar { a } => self.accum(grads, *a, g.to_vec()),
            Op::MulScalar { a, c } => {
                self.accum_with(grads, *a, || g.iter().map(|&x| x * c).collect())
            }
            Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
                let va = &self.nodes[a.0].value;
                let (outer, dim, inner) = Self::axis_split(va.shape(), *axis);
                let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                    1.0 / dim as f64
                } else {
                    1.0
                };
                self.accum_with(grads, *a, || {
                    let mut contrib = vec![0.0; va.len()];
                    for o in 0..outer {
                        for d in 0..dim {
                            let base = (o * dim + d) * inner;
                            for i in 0..inner {
                                contrib[base + i] = g[o * inner + i] * scale;
                            }
                        }
                    }
                    contrib
                });
            }
            Op::MaxAxis { a, arg } | Op::MinAxis { a, arg } => {
                let va = &self.nodes[a.0].value;
                self.accum_with(grads, *a, || {
                    let mut contrib = vec![0.0; va.len()];
                    for (i, &src) in arg.iter().enumerate() {
                        contrib[src] += g[i];
                    }
                    contrib
                });
            }
            Op::SumAll { a } | Op::MeanAll { a } => {
                let va = &self.nodes[a.0].value;
                let scale = if matches!(node.op, Op::MeanAll { .. }) {
                    1.0 / va.len() as f64
                } else {
                    1.0
                };
                self.accum_with(grads, *a, || vec![g[0] * scale; va.len()]);
            }
            Op::Concat { inputs, axis } => {
                let shape = out.shape();
                let (outer, total_dim, inner) = Self::axis_split(shape, *axis);
                let mut offset = 0usize;
                for &inp in inputs {
                    let vi = &self.nodes[inp.0].value;
                    let dim = vi.shape()[*axis];
                    if self.nodes[inp.0].requires_grad {
                        let mut contrib = vec![0.0; vi.len()];
                        for o in 0..outer {
                            let s = (o * total_dim + offset) * inner;
                            let d = o * dim * inner;
                            contrib[d..d + dim * inner].copy_from_slice(&g[s..s + dim * inner]);
                        }
                        self.accum(grads, inp, contrib);
                    }
                    offset += dim;
                }
            }
            Op::Slice { a, axis, start } => {
                let va = &self.nodes[a.0].value;
                let dim = va.shape()[*axis];
                let (outer, span, inner) = Self::axis_split(out.shape(), *axis);
                self.accum_with(grads, *a, || {
                    let mut contrib = vec![0.0; va.len()];
                    for o in 0..outer {
                        let d = (o * dim + start) * inner;
                        let s = o * span * inner;
                        contrib[d..d + span * inner].copy_from_slice(&g[s..s + span * inner]);
                    }
                    contrib
                });
            }
            Op::BroadcastTo { a } => {
                let va = &self.nodes[a.0].value;
                self.accum_with(grads, *a, || {
                    reduce_to_shape(g, out.shape(), va.shape())
                });
            }
            Op::Softmax { a } => {
                let y = out.data();
                let last = *out.shape().last().unwrap();
                let rows = y.len() / last;
                self.accum_with(grads, *a, || {
                    let mut contrib = vec![0.0; y.len()];
                    for r in 0..rows {
                        let o = r * last;
                        let dot: f64 =
                            (0..last).map(|i| g[o + i] * y[o + i]).sum();
                        for i in 0..last {
                            contrib[o + i] = y[o + i] * (g[o + i] - dot);
                        }
                    }
                    contrib
                });
            }
            Op::LayerNorm { a, eps } => {
                let x = self.nodes[a.0].value.data();
                let y = out.data();
                let last = *out.shape().last().unwrap();
                let rows = y.len() / last;
                self.accum_with(grads, *a, || {
                    let mut contrib = vec![0.0; y.len()];
                    for r in 0..rows {
                        let o = r * last;
                        let row = &x[o..o + last];
                        let mean = row.iter().sum::<f64>() / last as f64;
                        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>()
                            / last as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let m1: f64 = g[o..o + last].iter().sum::<f64>() / last as f64;
                        let m2: f64 =
                            (0..last).map(|i| g[o + i] * y[o + i]).sum::<f64>() / last as f64;
                        for i in 0..last {
                            contrib[o + i] = (g[o + i] - m1 - y[o + i] * m2) * inv;
                        }
                    }
                    contrib
                });
            }
            Op::Embedding { table, indices } => {
                let vt = &self.nodes[table.0].value;
                let cols = vt.shape()[1];
                self.accum_with(grads, *table, || {
                    let mut contrib = vec![0.0; vt.len()];
                    for (k, &idx) in indices.iter().enumerate() {
                        for c in 0..cols {
                            contrib[idx * cols + c] += g[k * cols + c];
                        }
                    }
                    contrib
                });
            }
        }
    }

    /// g (shaped like `out_shape`) times `factor` expanded to `out_shape`.
    fn broadcast_factor(&self, g: &[f64], out_shape: &[usize], factor: &Tensor) -> Vec<f64> {
        if factor.shape() == out_shape {
            return g.iter().zip(factor.data()).map(|(&a, &b)| a * b).collect();
        }
        let sf = broadcast_strides(factor.shape(), out_shape);
        let so = strides_for(out_shape);
        let fd = factor.data();
        g.iter()
            .enumerate()
            .map(|(flat, &x)| {
                let mut rem = flat;
                let mut i_f = 0usize;
                for d in 0..out_shape.len() {
                    let i = rem / so[d];
                    rem %= so[d];
                    i_f += i * sf[d];
                }
                x * fd[i_f]
            })
            .collect()
    }
}

fn bin_name(kind: BinKind) -> &'static str {
    match kind {
        BinKind::Add => "add",
        BinKind::Sub => "sub",
        BinKind::Mul => "mul",
        BinKind::Div => "div",
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Source => "source",
        Op::Bin { kind, .. } => bin_name(*kind),
        Op::MatMul { .. } => "matmul",
        Op::Transpose { .. } => "transpose",
        Op::Reshape { .. } => "reshape",
        Op::Un { kind, .. } => match kind {
            UnKind::Exp => "exp",
            UnKind::Log => "log",
            UnKind::Softplus => "softplus",
            UnKind::LogSoftplus => "log_softplus",
            UnKind::Sigmoid => "sigmoid",
            UnKind::Tanh => "tanh",
            UnKind::Relu => "relu",
            UnKind::Sin => "sin",
            UnKind::Cos => "cos",
            UnKind::Sqrt => "sqrt",
            UnKind::Square => "square",
        },
        Op::AddScalar { .. } => "add_scalar",
        Op::MulScalar { .. } => "mul_scalar",
        Op::SumAxis { .. } => "sum_axis",
        Op::MeanAxis { .. } => "mean_axis",
        Op::MaxAxis { .. } => "max_axis",
        Op::MinAxis { .. } => "min_axis",
        Op::SumAll { .. } => "sum_all",
        Op::MeanAll { .. } => "mean_all",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::BroadcastTo { .. } => "broadcast_to",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Embedding { .. } => "embedding",
    }
}
