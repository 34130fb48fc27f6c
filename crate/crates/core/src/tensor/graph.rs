use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use super::kernels::{
    broadcast_shape, broadcast_strides, contiguous_strides, for_each_strided, split_axis,
};
use super::{mismatch, numel, ParamRegistry, Real, Result, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    ClampMin(Var, F),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    BroadcastTo(Var),
    SumAxis(Var, usize),
    SumAll(Var),
    Softmax(Var),
    LayerNorm(Var, Vec<F>),
    NormLast(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    IndexSelect(Var, Vec<usize>),
}

struct Node<'a, F: Real> {
    shape: Vec<usize>,
    value: Cow<'a, [F]>,
    op: Op<F>,
    requires_grad: bool,
}

/// Recorded computation. Every operation appends a node; [`Graph::backward`]
/// walks the nodes in reverse creation order.
pub struct Graph<'a, F: Real> {
    nodes: Vec<Node<'a, F>>,
    track_params: bool,
    params: HashMap<&'a str, Var>,
}

/// Per-node gradient buffers produced by [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Parameter gradients keyed by registry name.
pub type ParamGrads<F> = BTreeMap<String, Vec<F>>;

impl<'a, F: Real> Default for Graph<'a, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, F: Real> Graph<'a, F> {
    /// Graph whose parameters require gradients.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            track_params: true,
            params: HashMap::new(),
        }
    }

    /// Graph for frozen-parameter inference; nothing requires gradients.
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<F> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("graph node shape is consistent")
    }

    fn leaf(&mut self, shape: Vec<usize>, data: Vec<F>, requires_grad: bool) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(mismatch("leaf", &shape, &[data.len()]));
        }
        Ok(self.push(shape, data, Op::Leaf, requires_grad))
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<F>) -> Result<Var> {
        self.leaf(shape, data, false)
    }

    /// Free leaf that receives a gradient.
    pub fn variable(&mut self, shape: Vec<usize>, data: Vec<F>) -> Result<Var> {
        self.leaf(shape, data, true)
    }

    pub fn scalar(&mut self, v: F) -> Var {
        self.push(vec![], vec![v], Op::Leaf, false)
    }

    /// Registry parameter, borrowed without copying. Repeated requests for the
    /// same name return the same node.
    pub fn param(&mut self, registry: &'a ParamRegistry<F>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let (key, t) = registry
            .get_entry(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf,
            requires_grad: self.track_params,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(key, v);
        Ok(v)
    }

    /// Gradients of every parameter that entered this graph.
    pub fn param_grads(&self, grads: &Gradients<F>) -> ParamGrads<F> {
        self.params
            .iter()
            .filter_map(|(name, &v)| grads.get(v).map(|g| (name.to_string(), g.to_vec())))
            .collect()
    }

    // ---- elementwise with broadcasting ----

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<(Vec<usize>, Vec<F>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            let out = self
                .value(a)
                .iter()
                .zip(self.value(b))
                .map(|(&x, &y)| f(x, y))
                .collect();
            return Ok((sa.to_vec(), out));
        }
        let shape = broadcast_shape(op, sa, sb)?;
        let (st_a, st_b) = (broadcast_strides(sa, &shape), broadcast_strides(sb, &shape));
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = vec![F::zero(); numel(&shape)];
        for_each_strided(&shape, [&st_a, &st_b], |o, [ia, ib]| out[o] = f(va[ia], vb[ib]));
        Ok((shape, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary("div", a, b, |x, y| x / y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Div(a, b), rg))
    }

    // ---- unary ----

    fn unary(&mut self, x: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -F::one())
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > F::zero() { v } else { F::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), |v| {
            v.max(F::zero()) + (-v.abs()).exp().ln_1p()
        })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), F::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), F::ln)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), F::abs)
    }

    pub fn clamp_min(&mut self, x: Var, lo: F) -> Var {
        self.unary(x, Op::ClampMin(x, lo), |v| v.max(lo))
    }

    // ---- linear algebra ----

    /// `a (…, m, k) × b (k, n)` or batched `a (…, m, k) × b (…, k, n)` with
    /// identical batch dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let mut out = vec![F::zero(); numel(&shape)];
        let (va, vb) = (self.value(a), self.value(b));
        if sb.len() == 2 {
            let rows = numel(&sa) / k;
            F::gemm(rows, k, n, va, (k, 1), vb, (n, 1), &mut out, false);
        } else {
            if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(mismatch("matmul", &sa, &sb));
            }
            let batch = numel(&sa[..sa.len() - 2]);
            for i in 0..batch {
                F::gemm(
                    m,
                    k,
                    n,
                    &va[i * m * k..],
                    (k, 1),
                    &vb[i * k * n..],
                    (n, 1),
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::MatMul(a, b), rg))
    }

    // ---- shape ----

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != numel(self.shape(x)) {
            return Err(mismatch("reshape", self.shape(x), &shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len() || perm.iter().any(|&p| p >= sx.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(mismatch("permute", &sx, perm));
        }
        let base = contiguous_strides(&sx);
        let shape: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| base[p]).collect();
        let vx = self.value(x);
        let mut out = vec![F::zero(); vx.len()];
        for_each_strided(&shape, [&strides], |o, [i]| out[o] = vx[i]);
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Permute(x, perm.to_vec()), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(mismatch("transpose", self.shape(x), &[]));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(x, &perm)
    }

    pub fn broadcast_to(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if broadcast_shape("broadcast_to", &sx, &shape)? != shape {
            return Err(mismatch("broadcast_to", &sx, &shape));
        }
        let st = broadcast_strides(&sx, &shape);
        let vx = self.value(x);
        let mut out = vec![F::zero(); numel(&shape)];
        for_each_strided(&shape, [&st], |o, [i]| out[o] = vx[i]);
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::BroadcastTo(x), rg))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(mismatch("sum_axis", &sx, &[axis]));
        }
        let (outer, n, inner) = split_axis(&sx, axis);
        let vx = self.value(x);
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &vx[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc = *acc + v;
                }
            }
        }
        let mut shape = sx;
        shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::SumAxis(x, axis), rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| mismatch("mean_axis", self.shape(x), &[axis]))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, F::one() / F::lit(n as f64)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(vec![], vec![total], Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, F::one() / F::lit(n as f64))
    }

    /// Softmax over the last axis. `-inf` entries get probability zero; a row
    /// that is entirely `-inf` becomes all zeros.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| mismatch("softmax", &sx, &[]))?;
        let vx = self.value(x);
        let mut out = vec![F::zero(); vx.len()];
        for (row, dst) in vx.chunks(d).zip(out.chunks_mut(d)) {
            softmax_row(row, dst);
        }
        let rg = self.rg(x);
        Ok(self.push(sx, out, Op::Softmax(x), rg))
    }

    /// Zero-mean unit-variance normalization over the last axis (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: F) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| mismatch("layer_norm", &sx, &[]))?;
        let dn = F::lit(d as f64);
        let vx = self.value(x);
        let mut out = vec![F::zero(); vx.len()];
        let mut inv = Vec::with_capacity(vx.len() / d);
        for (row, dst) in vx.chunks(d).zip(out.chunks_mut(d)) {
            let mu = row.iter().copied().sum::<F>() / dn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / dn;
            let r = F::one() / (var + eps).sqrt();
            for (o, &v) in dst.iter_mut().zip(row) {
                *o = (v - mu) * r;
            }
            inv.push(r);
        }
        let rg = self.rg(x);
        Ok(self.push(sx, out, Op::LayerNorm(x, inv), rg))
    }

    /// Euclidean norm over the last axis. The gradient at the origin is taken
    /// as zero.
    pub fn norm_last(&mut self, x: Var) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        let d = shape.pop().ok_or_else(|| mismatch("norm_last", &[], &[]))?;
        let out = self
            .value(x)
            .chunks(d)
            .map(|r| r.iter().map(|&v| v * v).sum::<F>().sqrt())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::NormLast(x), rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| mismatch("concat", &[], &[]))?).to_vec();
        if axis >= first.len() {
            return Err(mismatch("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(mismatch("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let n = self.shape(x)[axis] * inner;
                out.extend_from_slice(&self.value(x)[o * n..(o + 1) * n]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(shape, out, Op::Concat(xs.to_vec(), axis), rg))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || start + len > sx[axis] || len == 0 {
            return Err(mismatch("slice", &sx, &[axis, start, len]));
        }
        let (outer, n, inner) = split_axis(&sx, axis);
        let vx = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&vx[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Slice(x, axis, start), rg))
    }

    /// Gathers rows (axis 0).
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let rows = *sx.first().ok_or_else(|| mismatch("index_select", &sx, &[]))?;
        if indices.is_empty() || indices.iter().any(|&i| i >= rows) {
            return Err(mismatch("index_select", &sx, indices));
        }
        let row = numel(&sx[1..]);
        let vx = self.value(x);
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&vx[i * row..(i + 1) * row]);
        }
        let mut shape = sx;
        shape[0] = indices.len();
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::IndexSelect(x, indices.to_vec()), rg))
    }

    // ---- reverse pass ----

    /// Reverse-mode pass from a scalar. Gradients of every node that requires
    /// one are returned; parameters can be extracted with
    /// [`Graph::param_grads`].
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let ls = self.shape(loss);
        if numel(ls) != 1 {
            return Err(TensorError::NotScalar(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![F::one()]);
        for id in (0..=loss.0).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<'a, F>, gy: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        // Lazily allocated accumulation buffer for a parent that needs it.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let n = nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
                } else {
                    None
                }
            }};
        }
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -F::one() } else { F::one() };
                for (v, s) in [(*a, F::one()), (*b, sign)] {
                    if let Some(g) = slot!(v) {
                        reduce_broadcast(g, &nodes[v.0].shape, &node.shape, gy, |_, gv| gv * s);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (st_a, st_b) = (broadcast_strides(sa, &node.shape), broadcast_strides(sb, &node.shape));
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(g) = slot!(a) {
                    for_each_strided(&node.shape, [&st_a, &st_b], |o, [ia, ib]| {
                        g[ia] = g[ia] + gy[o] * vb[ib]
                    });
                }
                if let Some(g) = slot!(b) {
                    for_each_strided(&node.shape, [&st_a, &st_b], |o, [ia, ib]| {
                        g[ib] = g[ib] + gy[o] * va[ia]
                    });
                }
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (st_a, st_b) = (broadcast_strides(sa, &node.shape), broadcast_strides(sb, &node.shape));
                let vb = &nodes[b.0].value;
                if let Some(g) = slot!(a) {
                    for_each_strided(&node.shape, [&st_a, &st_b], |o, [ia, ib]| {
                        g[ia] = g[ia] + gy[o] / vb[ib]
                    });
                }
                if let Some(g) = slot!(b) {
                    // d(a/b)/db = -(a/b)/b
                    for_each_strided(&node.shape, [&st_b], |o, [ib]| {
                        g[ib] = g[ib] - gy[o] * y[o] / vb[ib]
                    });
                }
            }
            Op::Scale(x, c) => {
                if let Some(g) = slot!(*x) {
                    zip_acc(g, gy, |_, d| d * *c);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(g) = slot!(*x) {
                    zip_acc(g, gy, |_, d| d);
                }
            }
            Op::Relu(x) => {
                let vx = &nodes[x.0].value;
                if let Some(g) = slot!(*x) {
                    zip_acc(g, gy, |i, d| if vx[i] > F::zero() { d } else { F::zero() });
                }
            }
            Op::Sigmoid(x) => {
                if let Some(g) = slot!(*x) {
                    zip_acc(g, gy, |i, d| d * y[i] * (F::one() - y[i]));
                }
            }
            Op::Softplus(x) => {
                let vx = &nodes[x.0].value;
                if let Some(g) = slot!(*x) {
                    zip_acc(g, gy, |i, d| d * sigmoid(vx[i]));
                }
            }
            Op::Exp(x) => {
                if let Some(g) = slot!(*x) {
                    zip_acc(g, gy, |i, d| d * y[i]);
                }
            }
            Op::Log(x) => {
                let vx = &nodes[x.0].value;
                if let Some(g) = slot!(*x) {
                    zip_acc(g, gy, |i, d| d / vx[i]);
                }
            }
            Op::Abs(x) => {
                let vx = &nodes[x.0].value;
                if let Some(g) = slot!(*x) {
                    zip_acc(g, gy, |i, d| {
                        if vx[i] > F::zero() {
                            d
                        } else if vx[i] < F::zero() {
                            -d
                        } else {
                            F::zero()
                        }
                    });
                }
            }
            Op::ClampMin(x, lo) => {
                let vx = &nodes[x.0].value;
                if let Some(g) = slot!(*x) {
                    zip_acc(g, gy, |i, d| if vx[i] > *lo { d } else { F::zero() });
                }
            }
            Op::MatMul(a, b) => self.matmul_backward(node, *a, *b, gy, grads),
            Op::Permute(x, perm) => {
                let sx = &nodes[x.0].shape;
                let base = contiguous_strides(sx);
                let strides: Vec<usize> = perm.iter().map(|&p| base[p]).collect();
                if let Some(g) = slot!(*x) {
                    for_each_strided(&node.shape, [&strides], |o, [i]| g[i] = g[i] + gy[o]);
                }
            }
            Op::BroadcastTo(x) => {
                if let Some(g) = slot!(*x) {
                    reduce_broadcast(g, &nodes[x.0].shape, &node.shape, gy, |_, d| d);
                }
            }
            Op::SumAxis(x, axis) => {
                let (outer, n, inner) = split_axis(&nodes[x.0].shape, *axis);
                if let Some(g) = slot!(*x) {
                    for o in 0..outer {
                        for j in 0..n {
                            for k in 0..inner {
                                let i = (o * n + j) * inner + k;
                                g[i] = g[i] + gy[o * inner + k];
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(g) = slot!(*x) {
                    for v in g.iter_mut() {
                        *v = *v + gy[0];
                    }
                }
            }
            Op::Softmax(x) => {
                let d = *node.shape.last().expect("softmax has an axis");
                if let Some(g) = slot!(*x) {
                    for ((yr, gr), dst) in y.chunks(d).zip(gy.chunks(d)).zip(g.chunks_mut(d)) {
                        let dot: F = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for ((o, &p), &q) in dst.iter_mut().zip(yr).zip(gr) {
                            *o = *o + p * (q - dot);
                        }
                    }
                }
            }
            Op::LayerNorm(x, inv) => {
                let d = *node.shape.last().expect("layer_norm has an axis");
                let dn = F::lit(d as f64);
                if let Some(g) = slot!(*x) {
                    for (r, ((yr, gr), dst)) in y.chunks(d).zip(gy.chunks(d)).zip(g.chunks_mut(d)).enumerate() {
                        let mean_g = gr.iter().copied().sum::<F>() / dn;
                        let mean_gy = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<F>() / dn;
                        for ((o, &yy), &gg) in dst.iter_mut().zip(yr).zip(gr) {
                            *o = *o + inv[r] * (gg - mean_g - yy * mean_gy);
                        }
                    }
                }
            }
            Op::NormLast(x) => {
                let vx = &nodes[x.0].value;
                let d = *nodes[x.0].shape.last().expect("norm_last has an axis");
                if let Some(g) = slot!(*x) {
                    for (r, (&n, &gn)) in y.iter().zip(gy).enumerate() {
                        if n > F::zero() {
                            for k in 0..d {
                                let i = r * d + k;
                                g[i] = g[i] + gn * vx[i] / n;
                            }
                        }
                    }
                }
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &x in xs {
                    let n = nodes[x.0].shape[*axis];
                    if let Some(g) = slot!(x) {
                        for o in 0..outer {
                            let src = &gy[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            for (acc, &v) in g[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src) {
                                *acc = *acc + v;
                            }
                        }
                    }
                    offset += n;
                }
            }
            Op::Slice(x, axis, start) => {
                let (outer, n, inner) = split_axis(&nodes[x.0].shape, *axis);
                let len = node.shape[*axis];
                if let Some(g) = slot!(*x) {
                    for o in 0..outer {
                        let dst = &mut g[(o * n + start) * inner..(o * n + start + len) * inner];
                        for (acc, &v) in dst.iter_mut().zip(&gy[o * len * inner..(o + 1) * len * inner]) {
                            *acc = *acc + v;
                        }
                    }
                }
            }
            Op::IndexSelect(x, indices) => {
                let row = numel(&nodes[x.0].shape[1..]);
                if let Some(g) = slot!(*x) {
                    for (r, &i) in indices.iter().enumerate() {
                        for k in 0..row {
                            g[i * row + k] = g[i * row + k] + gy[r * row + k];
                        }
                    }
                }
            }
        }
    }

    fn matmul_backward(&self, node: &Node<'a, F>, a: Var, b: Var, gy: &[F], grads: &mut [Option<Vec<F>>]) {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let (need_a, need_b) = (self.rg(a), self.rg(b));
        let mut take = |v: Var| {
            let len = self.nodes[v.0].value.len();
            grads[v.0].take().unwrap_or_else(|| vec![F::zero(); len])
        };
        let mut ga = need_a.then(|| take(a));
        let mut gb = need_b.then(|| take(b));
        if sb.len() == 2 {
            let rows = numel(sa) / k;
            if let Some(g) = ga.as_mut() {
                // dA = dC · Bᵀ
                F::gemm(rows, n, k, gy, (n, 1), vb, (1, n), g, true);
            }
            if let Some(g) = gb.as_mut() {
                // dB = Aᵀ · dC
                F::gemm(k, rows, n, va, (1, k), gy, (n, 1), g, true);
            }
        } else {
            let batch = numel(&node.shape[..node.shape.len() - 2]);
            for i in 0..batch {
                let gyi = &gy[i * m * n..];
                if let Some(g) = ga.as_mut() {
                    F::gemm(m, n, k, gyi, (n, 1), &vb[i * k * n..], (1, n), &mut g[i * m * k..(i + 1) * m * k], true);
                }
                if let Some(g) = gb.as_mut() {
                    F::gemm(k, m, n, &va[i * m * k..], (1, k), gyi, (n, 1), &mut g[i * k * n..(i + 1) * k * n], true);
                }
            }
        }
        for (v, g) in [(a, ga), (b, gb)] {
            let Some(g) = g else { continue };
            match grads[v.0].as_mut() {
                // a and b are the same node
                Some(acc) => zip_acc(acc, &g, |_, d| d),
                None => grads[v.0] = Some(g),
            }
        }
    }
}

fn zip_acc<F: Real>(g: &mut [F], gy: &[F], f: impl Fn(usize, F) -> F) {
    for (i, (acc, &d)) in g.iter_mut().zip(gy).enumerate() {
        *acc = *acc + f(i, d);
    }
}

/// Sums `gy` (shaped `out`) back onto a broadcast operand shaped `src`.
fn reduce_broadcast<F: Real>(g: &mut [F], src: &[usize], out: &[usize], gy: &[F], f: impl Fn(usize, F) -> F) {
    if src == out {
        zip_acc(g, gy, f);
        return;
    }
    let st = broadcast_strides(src, out);
    for_each_strided(out, [&st], |o, [i]| g[i] = g[i] + f(o, gy[o]));
}

pub(crate) fn sigmoid<F: Real>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn softmax_row<F: Real>(row: &[F], dst: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        dst.iter_mut().for_each(|v| *v = F::zero());
        return;
    }
    let mut total = F::zero();
    for (o, &v) in dst.iter_mut().zip(row) {
        *o = (v - max).exp();
        total = total + *o;
    }
    for o in dst.iter_mut() {
        *o = *o / total;
    }
}
