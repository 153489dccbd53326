//! Wengert-list tape: the forward pass appends primitive ops to an arena and
//! the backward pass walks it in reverse, accumulating gradients.
//!
//! Inputs of a node always have smaller ids than the node itself, so a single
//! reverse sweep visits every node after all of its consumers.

use super::gemm::dgemm_acc;
use super::{broadcast_index, broadcast_shape, reduce_to_shape, strides_of, Tensor, TensorError};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    /// out = op(a) · op(b) where op transposes when the flag is set;
    /// (m, k, n) are the dimensions of the *operated* views.
    Matmul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Relu { x: NodeId },
    Gelu { x: NodeId },
    Softplus { x: NodeId },
    Scale { x: NodeId, c: f64 },
    Softmax { x: NodeId, axis: usize },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    MeanPool { x: NodeId, axis: usize },
    SumAll { x: NodeId },
    Reshape { x: NodeId },
    SliceLast { x: NodeId, start: usize, len: usize },
    ConcatLast { xs: Vec<NodeId> },
}

struct Node {
    op: Op,
    value: Tensor,
    /// Op-specific values saved for the backward rule (empty when the output
    /// does not require gradients).
    aux: Vec<f64>,
}

/// Per-node gradient buffers produced by a backward pass. Buffers exist for
/// every node that requires gradients; leaves that never influenced the loss
/// keep their all-zero buffer.
#[derive(Debug)]
pub struct Gradients {
    bufs: Vec<Option<Vec<f64>>>,
    seeded: Vec<bool>,
}

impl Gradients {
    fn for_tape(tape: &Tape) -> Self {
        let bufs = tape
            .nodes
            .iter()
            .map(|n| {
                if n.value.requires_grad {
                    Some(vec![0.0; n.value.numel()])
                } else {
                    None
                }
            })
            .collect::<Vec<_>>();
        let seeded = vec![false; tape.nodes.len()];
        Gradients { bufs, seeded }
    }

    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.bufs.get(id.0).and_then(|b| b.as_deref())
    }

    pub fn len(&self) -> usize {
        self.bufs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bufs.is_empty()
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    /// Fault-injection knob for the self-check negative control: scales the
    /// GELU backward rule. 1.0 in normal operation.
    gelu_backward_scale: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softplus_fwd(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// (outer, axis length, inner) decomposition used to walk lanes along `axis`.
fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            gelu_backward_scale: 1.0,
        }
    }

    /// Negative-control fixture: makes every subsequent GELU backward rule
    /// wrong by a factor of 1.5 so gradient checks must fail.
    pub fn inject_gelu_backward_fault(&mut self) {
        self.gelu_backward_scale = 1.5;
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

    fn push(&mut self, op: Op, value: Tensor, aux: Vec<f64>) -> NodeId {
        self.nodes.push(Node { op, value, aux });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].value.requires_grad
    }

    /// Record a tensor as a differentiable leaf (keeps its requires_grad flag).
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, Vec::new())
    }

    /// Record a tensor as plain data: never differentiated through.
    pub fn constant(&mut self, mut t: Tensor) -> NodeId {
        t.requires_grad = false;
        self.push(Op::Leaf, t, Vec::new())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.matmul_t(a, false, b, false)
    }

    /// Matrix product with optional transposition of either stored operand.
    pub fn matmul_t(
        &mut self,
        a: NodeId,
        ta: bool,
        b: NodeId,
        tb: bool,
    ) -> Result<NodeId, TensorError> {
        let (ash, bsh) = (&self.nodes[a.0].value.shape, &self.nodes[b.0].value.shape);
        if ash.len() != 2 {
            return Err(TensorError::NotMatrix { shape: ash.clone() });
        }
        if bsh.len() != 2 {
            return Err(TensorError::NotMatrix { shape: bsh.clone() });
        }
        let (m, ka) = if ta { (ash[1], ash[0]) } else { (ash[0], ash[1]) };
        let (kb, n) = if tb { (bsh[1], bsh[0]) } else { (bsh[0], bsh[1]) };
        if ka != kb {
            return Err(TensorError::MatmulMismatch {
                left: ash.clone(),
                right: bsh.clone(),
            });
        }
        let k = ka;
        let mut out = vec![0.0; m * n];
        dgemm_acc(
            m,
            k,
            n,
            1.0,
            &self.nodes[a.0].value.data,
            ta,
            &self.nodes[b.0].value.data,
            tb,
            0.0,
            &mut out,
        );
        let mut t = Tensor::new(vec![m, n], out)?;
        t.requires_grad = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Matmul { a, b, ta, tb, m, k, n }, t, Vec::new()))
    }

    fn ew_binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, TensorError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = broadcast_shape(&av.shape, &bv.shape)?;
        let n: usize = out_shape.iter().product();
        let mut data = vec![0.0; n];
        if av.shape == out_shape && bv.shape == out_shape {
            for i in 0..n {
                data[i] = f(av.data[i], bv.data[i]);
            }
        } else {
            let os = strides_of(&out_shape);
            let sa = strides_of(&av.shape);
            let sb = strides_of(&bv.shape);
            for (i, d) in data.iter_mut().enumerate() {
                let ia = broadcast_index(i, &out_shape, &os, &av.shape, &sa);
                let ib = broadcast_index(i, &out_shape, &os, &bv.shape, &sb);
                *d = f(av.data[ia], bv.data[ib]);
            }
        }
        let mut t = Tensor::new(out_shape, data)?;
        t.requires_grad = self.rg(a) || self.rg(b);
        Ok(self.push(op, t, Vec::new()))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.ew_binary(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.ew_binary(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.ew_binary(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let data = xv.data.iter().map(|&v| v.max(0.0)).collect();
        let mut t = Tensor {
            shape: xv.shape.clone(),
            data,
            requires_grad: xv.requires_grad,
        };
        t.requires_grad = self.rg(x);
        self.push(Op::Relu { x }, t, Vec::new())
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let data: Vec<f64> = xv.data.iter().map(|&v| gelu_fwd(v)).collect();
        let rg = xv.requires_grad;
        // The derivative is cheap to compute alongside the forward value and
        // saves a tanh per element in the backward sweep.
        let aux = if rg {
            xv.data.iter().map(|&v| gelu_grad(v)).collect()
        } else {
            Vec::new()
        };
        let t = Tensor {
            shape: xv.shape.clone(),
            data,
            requires_grad: rg,
        };
        self.push(Op::Gelu { x }, t, aux)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let t = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| softplus_fwd(v)).collect(),
            requires_grad: xv.requires_grad,
        };
        self.push(Op::Softplus { x }, t, Vec::new())
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let t = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| v * c).collect(),
            requires_grad: xv.requires_grad,
        };
        self.push(Op::Scale { x, c }, t, Vec::new())
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        let xv = &self.nodes[x.0].value;
        if axis >= xv.shape.len() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                shape: xv.shape.clone(),
            });
        }
        let (outer, len, inner) = lane_dims(&xv.shape, axis);
        let mut data = vec![0.0; xv.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(xv.data[base + j * inner]);
                }
                let mut s = 0.0;
                for j in 0..len {
                    let e = (xv.data[base + j * inner] - mx).exp();
                    data[base + j * inner] = e;
                    s += e;
                }
                let inv = 1.0 / s;
                for j in 0..len {
                    data[base + j * inner] *= inv;
                }
            }
        }
        let t = Tensor {
            shape: xv.shape.clone(),
            data,
            requires_grad: xv.requires_grad,
        };
        Ok(self.push(Op::Softmax { x, axis }, t, Vec::new()))
    }

    /// Normalizes over the last axis; zero-variance rows come out as `bias`.
    pub fn layernorm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        let xsh = self.nodes[x.0].value.shape.clone();
        let d = *xsh.last().ok_or(TensorError::AxisOutOfRange {
            axis: 0,
            shape: xsh.clone(),
        })?;
        for p in [gain, bias] {
            let psh = &self.nodes[p.0].value.shape;
            if psh.as_slice() != [d] {
                return Err(TensorError::LayerNormParam {
                    param: psh.clone(),
                    shape: xsh.clone(),
                });
            }
        }
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gain.0].value;
        let bv = &self.nodes[bias.0].value;
        let rows = xv.numel() / d;
        let rg = xv.requires_grad || gv.requires_grad || bv.requires_grad;
        let mut data = vec![0.0; xv.numel()];
        let mut aux = if rg { vec![0.0; rows * 2] } else { Vec::new() };
        for r in 0..rows {
            let base = r * d;
            let row = &xv.data[base..base + d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let invstd = 1.0 / (var + eps).sqrt();
            if rg {
                aux[r * 2] = mean;
                aux[r * 2 + 1] = invstd;
            }
            for j in 0..d {
                let xhat = (row[j] - mean) * invstd;
                data[base + j] = gv.data[j] * xhat + bv.data[j];
            }
        }
        let t = Tensor {
            shape: xsh,
            data,
            requires_grad: rg,
        };
        Ok(self.push(Op::LayerNorm { x, gain, bias, eps }, t, aux))
    }

    /// Arithmetic mean over `axis`; the axis is removed from the shape.
    pub fn mean_pool(&mut self, x: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        let xv = &self.nodes[x.0].value;
        if axis >= xv.shape.len() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                shape: xv.shape.clone(),
            });
        }
        let (outer, len, inner) = lane_dims(&xv.shape, axis);
        let mut out_shape = xv.shape.clone();
        out_shape.remove(axis);
        let mut data = vec![0.0; outer * inner];
        let inv = 1.0 / len as f64;
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                let obase = o * inner;
                for i in 0..inner {
                    data[obase + i] += xv.data[base + i];
                }
            }
        }
        for v in &mut data {
            *v *= inv;
        }
        let t = Tensor {
            shape: out_shape,
            data,
            requires_grad: xv.requires_grad,
        };
        Ok(self.push(Op::MeanPool { x, axis }, t, Vec::new()))
    }

    /// Sum of all elements, as a scalar (empty shape).
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let s: f64 = xv.data.iter().sum();
        let t = Tensor {
            shape: vec![],
            data: vec![s],
            requires_grad: xv.requires_grad,
        };
        self.push(Op::SumAll { x }, t, Vec::new())
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        let xv = &self.nodes[x.0].value;
        let n: usize = shape.iter().product();
        if n != xv.numel() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ReshapeMismatch {
                from: xv.shape.clone(),
                to: shape,
            });
        }
        let t = Tensor {
            shape,
            data: xv.data.clone(),
            requires_grad: xv.requires_grad,
        };
        Ok(self.push(Op::Reshape { x }, t, Vec::new()))
    }

    /// Contiguous slice [start, start+len) along the last axis.
    pub fn slice_last(
        &mut self,
        x: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, TensorError> {
        let xv = &self.nodes[x.0].value;
        let last = *xv.shape.last().unwrap_or(&0);
        if xv.shape.is_empty() || len == 0 || start + len > last {
            return Err(TensorError::SliceOutOfRange {
                start,
                len,
                shape: xv.shape.clone(),
            });
        }
        let lanes = xv.numel() / last;
        let mut out_shape = xv.shape.clone();
        *out_shape.last_mut().unwrap() = len;
        let mut data = vec![0.0; lanes * len];
        for l in 0..lanes {
            let src = l * last + start;
            data[l * len..(l + 1) * len].copy_from_slice(&xv.data[src..src + len]);
        }
        let t = Tensor {
            shape: out_shape,
            data,
            requires_grad: xv.requires_grad,
        };
        Ok(self.push(Op::SliceLast { x, start, len }, t, Vec::new()))
    }

    /// Concatenate along the last axis; all leading dims must agree.
    pub fn concat_last(&mut self, xs: &[NodeId]) -> Result<NodeId, TensorError> {
        let first = xs.first().ok_or(TensorError::ConcatMismatch {
            left: vec![],
            right: vec![],
        })?;
        let lead = {
            let sh = &self.nodes[first.0].value.shape;
            sh[..sh.len() - 1].to_vec()
        };
        let mut total_last = 0usize;
        for &x in xs {
            let sh = &self.nodes[x.0].value.shape;
            if sh.is_empty() || sh[..sh.len() - 1] != lead[..] {
                return Err(TensorError::ConcatMismatch {
                    left: self.nodes[first.0].value.shape.clone(),
                    right: sh.clone(),
                });
            }
            total_last += *sh.last().unwrap();
        }
        let lanes: usize = lead.iter().product();
        let mut out_shape = lead.clone();
        out_shape.push(total_last);
        let mut data = vec![0.0; lanes * total_last];
        let mut off = 0usize;
        let mut rg = false;
        for &x in xs {
            let xv = &self.nodes[x.0].value;
            let w = *xv.shape.last().unwrap();
            for l in 0..lanes {
                data[l * total_last + off..l * total_last + off + w]
                    .copy_from_slice(&xv.data[l * w..(l + 1) * w]);
            }
            off += w;
            rg |= xv.requires_grad;
        }
        let t = Tensor {
            shape: out_shape,
            data,
            requires_grad: rg,
        };
        Ok(self.push(Op::ConcatLast { xs: xs.to_vec() }, t, Vec::new()))
    }

    /// Seed d(loss)/d(loss) = 1 and sweep the tape in reverse. `loss` must be
    /// scalar-valued (one element).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TensorError> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::NoGradPath);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarOutput {
                shape: lv.shape.clone(),
            });
        }
        let mut grads = Gradients::for_tape(self);
        if let Some(buf) = grads.bufs[loss.0].as_mut() {
            buf[0] = 1.0;
            grads.seeded[loss.0] = true;
        }
        self.run_backward(&mut grads);
        Ok(grads)
    }

    /// Reverse sweep over already-seeded gradients. On an empty tape (or with
    /// nothing seeded) this touches nothing.
    pub fn run_backward(&self, grads: &mut Gradients) {
        for id in (0..self.nodes.len()).rev() {
            if !grads.seeded[id] || !self.nodes[id].value.requires_grad {
                continue;
            }
            self.step_backward(id, grads);
        }
    }

    fn step_backward(&self, id: usize, grads: &mut Gradients) {
        // Inputs always precede outputs, so splitting at `id` gives disjoint
        // mutable access to input buffers while reading the output's.
        let (lo, hi) = grads.bufs.split_at_mut(id);
        let g: &[f64] = hi[0].as_deref().expect("seeded node has a buffer");
        let node = &self.nodes[id];
        let out_shape = &node.value.shape;
        let mut seed = |nid: NodeId| {
            grads.seeded[nid.0] = true;
        };
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b, ta, tb, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let av = &self.nodes[a.0].value.data;
                let bv = &self.nodes[b.0].value.data;
                if self.rg(*a) {
                    let da = lo[a.0].as_mut().expect("grad buffer");
                    match (ta, tb) {
                        (false, false) => dgemm_acc(m, n, k, 1.0, g, false, bv, true, 1.0, da),
                        (false, true) => dgemm_acc(m, n, k, 1.0, g, false, bv, false, 1.0, da),
                        (true, false) => dgemm_acc(k, n, m, 1.0, bv, false, g, true, 1.0, da),
                        (true, true) => dgemm_acc(k, n, m, 1.0, bv, true, g, true, 1.0, da),
                    }
                    seed(*a);
                }
                if self.rg(*b) {
                    let db = lo[b.0].as_mut().expect("grad buffer");
                    match (ta, tb) {
                        (false, false) => dgemm_acc(k, m, n, 1.0, av, true, g, false, 1.0, db),
                        (false, true) => dgemm_acc(n, m, k, 1.0, g, true, av, false, 1.0, db),
                        (true, false) => dgemm_acc(k, m, n, 1.0, av, false, g, false, 1.0, db),
                        (true, true) => dgemm_acc(n, m, k, 1.0, g, true, av, true, 1.0, db),
                    }
                    seed(*b);
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let negate_b = matches!(node.op, Op::Sub { .. });
                for (nid, flip) in [(*a, false), (*b, negate_b)] {
                    if !self.rg(nid) {
                        continue;
                    }
                    let ish = &self.nodes[nid.0].value.shape;
                    let mut contrib = reduce_to_shape(g, out_shape, ish);
                    if flip {
                        for v in &mut contrib {
                            *v = -*v;
                        }
                    }
                    let buf = lo[nid.0].as_mut().expect("grad buffer");
                    for (dst, src) in buf.iter_mut().zip(&contrib) {
                        *dst += src;
                    }
                    seed(nid);
                }
            }
            Op::Mul { a, b } => {
                let os = strides_of(out_shape);
                for (nid, other) in [(*a, *b), (*b, *a)] {
                    if !self.rg(nid) {
                        continue;
                    }
                    let ish = self.nodes[nid.0].value.shape.clone();
                    let osh = &self.nodes[other.0].value.shape;
                    let ov = &self.nodes[other.0].value.data;
                    let is = strides_of(&ish);
                    let ss = strides_of(osh);
                    let buf = lo[nid.0].as_mut().expect("grad buffer");
                    for (i, &gi) in g.iter().enumerate() {
                        let io = broadcast_index(i, out_shape, &os, osh, &ss);
                        let ii = broadcast_index(i, out_shape, &os, &ish, &is);
                        buf[ii] += gi * ov[io];
                    }
                    seed(nid);
                }
            }
            Op::Relu { x } => {
                if self.rg(*x) {
                    let xv = &self.nodes[x.0].value.data;
                    let buf = lo[x.0].as_mut().expect("grad buffer");
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            buf[i] += g[i];
                        }
                    }
                    seed(*x);
                }
            }
            Op::Gelu { x } => {
                if self.rg(*x) {
                    let buf = lo[x.0].as_mut().expect("grad buffer");
                    let s = self.gelu_backward_scale;
                    for i in 0..g.len() {
                        buf[i] += g[i] * node.aux[i] * s;
                    }
                    seed(*x);
                }
            }
            Op::Softplus { x } => {
                if self.rg(*x) {
                    let xv = &self.nodes[x.0].value.data;
                    let buf = lo[x.0].as_mut().expect("grad buffer");
                    for i in 0..g.len() {
                        buf[i] += g[i] * sigmoid(xv[i]);
                    }
                    seed(*x);
                }
            }
            Op::Scale { x, c } => {
                if self.rg(*x) {
                    let buf = lo[x.0].as_mut().expect("grad buffer");
                    for i in 0..g.len() {
                        buf[i] += g[i] * c;
                    }
                    seed(*x);
                }
            }
            Op::Softmax { x, axis } => {
                if self.rg(*x) {
                    let y = &node.value.data;
                    let (outer, len, inner) = lane_dims(out_shape, *axis);
                    let buf = lo[x.0].as_mut().expect("grad buffer");
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = 0.0;
                            for j in 0..len {
                                let idx = base + j * inner;
                                dot += g[idx] * y[idx];
                            }
                            for j in 0..len {
                                let idx = base + j * inner;
                                buf[idx] += y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                    seed(*x);
                }
            }
            Op::LayerNorm { x, gain, bias, .. } => {
                let d = *out_shape.last().unwrap();
                let rows = node.value.numel() / d;
                let xv = &self.nodes[x.0].value.data;
                let gv = &self.nodes[gain.0].value.data;
                for r in 0..rows {
                    let (mean, invstd) = (node.aux[r * 2], node.aux[r * 2 + 1]);
                    let base = r * d;
                    if self.rg(*x) {
                        // dL/dx = invstd * (h - mean(h) - xhat * mean(h*xhat)),
                        // h = g ⊙ gain, per row.
                        let mut mh = 0.0;
                        let mut mhx = 0.0;
                        for j in 0..d {
                            let xhat = (xv[base + j] - mean) * invstd;
                            let h = g[base + j] * gv[j];
                            mh += h;
                            mhx += h * xhat;
                        }
                        mh /= d as f64;
                        mhx /= d as f64;
                        let buf = lo[x.0].as_mut().expect("grad buffer");
                        for j in 0..d {
                            let xhat = (xv[base + j] - mean) * invstd;
                            let h = g[base + j] * gv[j];
                            buf[base + j] += invstd * (h - mh - xhat * mhx);
                        }
                    }
                    if self.rg(*gain) {
                        let buf = lo[gain.0].as_mut().expect("grad buffer");
                        for j in 0..d {
                            let xhat = (xv[base + j] - mean) * invstd;
                            buf[j] += g[base + j] * xhat;
                        }
                    }
                    if self.rg(*bias) {
                        let buf = lo[bias.0].as_mut().expect("grad buffer");
                        for j in 0..d {
                            buf[j] += g[base + j];
                        }
                    }
                }
                if self.rg(*x) {
                    seed(*x);
                }
                if self.rg(*gain) {
                    seed(*gain);
                }
                if self.rg(*bias) {
                    seed(*bias);
                }
            }
            Op::MeanPool { x, axis } => {
                if self.rg(*x) {
                    let ish = &self.nodes[x.0].value.shape;
                    let (outer, len, inner) = lane_dims(ish, *axis);
                    let inv = 1.0 / len as f64;
                    let buf = lo[x.0].as_mut().expect("grad buffer");
                    for o in 0..outer {
                        for j in 0..len {
                            let base = (o * len + j) * inner;
                            let obase = o * inner;
                            for i in 0..inner {
                                buf[base + i] += g[obase + i] * inv;
                            }
                        }
                    }
                    seed(*x);
                }
            }
            Op::SumAll { x } => {
                if self.rg(*x) {
                    let buf = lo[x.0].as_mut().expect("grad buffer");
                    for v in buf.iter_mut() {
                        *v += g[0];
                    }
                    seed(*x);
                }
            }
            Op::Reshape { x } => {
                if self.rg(*x) {
                    let buf = lo[x.0].as_mut().expect("grad buffer");
                    for (dst, src) in buf.iter_mut().zip(g) {
                        *dst += src;
                    }
                    seed(*x);
                }
            }
            Op::SliceLast { x, start, len } => {
                if self.rg(*x) {
                    let last = *self.nodes[x.0].value.shape.last().unwrap();
                    let lanes = self.nodes[x.0].value.numel() / last;
                    let buf = lo[x.0].as_mut().expect("grad buffer");
                    for l in 0..lanes {
                        for j in 0..*len {
                            buf[l * last + start + j] += g[l * len + j];
                        }
                    }
                    seed(*x);
                }
            }
            Op::ConcatLast { xs } => {
                let total = *out_shape.last().unwrap();
                let lanes = node.value.numel() / total;
                let mut off = 0usize;
                for &xid in xs {
                    let w = *self.nodes[xid.0].value.shape.last().unwrap();
                    if self.rg(xid) {
                        let buf = lo[xid.0].as_mut().expect("grad buffer");
                        for l in 0..lanes {
                            for j in 0..w {
                                buf[l * w + j] += g[l * total + off + j];
                            }
                        }
                        grads.seeded[xid.0] = true;
                    }
                    off += w;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let out = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(out).data, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_row_by_column() {
        let mut tape = Tape::new();
        let a = tape.constant(t(vec![1, 2], vec![1.0, 2.0]));
        let b = tape.constant(t(vec![2, 1], vec![3.0, 4.0]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).shape, vec![1, 1]);
        assert_eq!(tape.value(out).data, vec![11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(t(vec![2, 3], vec![0.0; 6]));
        let b = tape.constant(t(vec![2, 2], vec![0.0; 4]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn add_identity_and_relu_clamp() {
        let mut tape = Tape::new();
        let a = tape.constant(t(vec![3], vec![1.0, 2.0, 3.0]));
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.add(a, z).unwrap();
        assert_eq!(tape.value(s).data, vec![1.0, 2.0, 3.0]);

        let x = tape.constant(t(vec![3], vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data, vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![3], vec![0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in &tape.value(y).data {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = tape.constant(t(vec![2], vec![1000.0, 0.0]));
        let yb = tape.softmax(big, 0).unwrap();
        let d = &tape.value(yb).data;
        assert!(d[0] > 0.999_999 && d[1] < 1e-6);
        assert!(d.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(t(
            vec![2, 5],
            vec![0.3, -1.2, 4.0, 0.0, 2.2, -3.0, 0.5, 0.5, 1.0, -0.1],
        ));
        let y = tape.softmax(x, 1).unwrap();
        let d = &tape.value(y).data;
        for r in 0..2 {
            let s: f64 = d[r * 5..(r + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layernorm_constant_row_maps_to_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![1, 4], vec![5.0, 5.0, 5.0, 5.0]));
        let gain = tape.constant(t(vec![4], vec![1.0; 4]));
        let bias = tape.constant(t(vec![4], vec![0.0; 4]));
        let y = tape.layernorm(x, gain, bias, 1e-5).unwrap();
        assert_eq!(tape.value(y).data, vec![0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn layernorm_symmetry() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![1, 2], vec![1.0, -1.0]));
        let gain = tape.constant(t(vec![2], vec![1.0, 1.0]));
        let bias = tape.constant(t(vec![2], vec![0.0, 0.0]));
        let y = tape.layernorm(x, gain, bias, 1e-5).unwrap();
        let d = &tape.value(y).data;
        assert!((d[0] - 1.0).abs() < 1e-4);
        assert!((d[1] + 1.0).abs() < 1e-4);
        assert!((d[0] + d[1]).abs() < 1e-12);
    }

    #[test]
    fn layernorm_normalizes_wide_rows() {
        // Output variance is sigma^2/(sigma^2+eps), so rows need variance well
        // above eps*1e6 for the 1e-6 bound to be observable.
        let mut tape = Tape::new();
        let mut vals = Vec::new();
        for r in 0..4 {
            for j in 0..16 {
                vals.push(((r * 16 + j) as f64 * 0.7).sin() * 30.0);
            }
        }
        let x = tape.constant(t(vec![4, 16], vals));
        let gain = tape.constant(t(vec![16], vec![1.0; 16]));
        let bias = tape.constant(t(vec![16], vec![0.0; 16]));
        let y = tape.layernorm(x, gain, bias, 1e-5).unwrap();
        let d = &tape.value(y).data;
        for r in 0..4 {
            let row = &d[r * 16..(r + 1) * 16];
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() <= 1e-10, "row mean {mean}");
            assert!((var - 1.0).abs() <= 1e-6, "row var {var}");
        }
    }

    #[test]
    fn mean_pool_basic_and_single() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![3], vec![2.0, 4.0, 6.0]));
        let m = tape.mean_pool(x, 0).unwrap();
        assert_eq!(tape.value(m).shape, Vec::<usize>::new());
        assert_eq!(tape.value(m).data, vec![4.0]);

        let one = tape.constant(t(vec![1], vec![7.5]));
        let m1 = tape.mean_pool(one, 0).unwrap();
        assert_eq!(tape.value(m1).data, vec![7.5]);
    }

    #[test]
    fn mean_pool_middle_axis() {
        // shape (2,2,2): mean over axis 1
        let mut tape = Tape::new();
        let x = tape.constant(t(
            vec![2, 2, 2],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
        ));
        let m = tape.mean_pool(x, 1).unwrap();
        assert_eq!(tape.value(m).shape, vec![2, 2]);
        assert_eq!(tape.value(m).data, vec![2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn slice_and_concat_invert() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let a = tape.slice_last(x, 0, 2).unwrap();
        let b = tape.slice_last(x, 2, 2).unwrap();
        assert_eq!(tape.value(a).data, vec![1.0, 2.0, 5.0, 6.0]);
        assert_eq!(tape.value(b).data, vec![3.0, 4.0, 7.0, 8.0]);
        let back = tape.concat_last(&[a, b]).unwrap();
        assert_eq!(tape.value(back).data, tape.value(x).data);
    }

    #[test]
    fn backward_empty_tape_is_noop() {
        let tape = Tape::new();
        let mut grads = Gradients::for_tape(&tape);
        tape.run_backward(&mut grads);
        assert!(grads.is_empty());
    }

    #[test]
    fn unused_leaf_gets_exact_zero_grads() {
        let mut tape = Tape::new();
        let used = tape.leaf(t(vec![2], vec![1.0, 2.0]).with_grad());
        let unused = tape.leaf(t(vec![3], vec![9.0, 9.0, 9.0]).with_grad());
        let sq = tape.mul(used, used).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(used).unwrap(), &[2.0, 4.0]);
        assert_eq!(grads.get(unused).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn sum_of_squares_gradient_is_analytic() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![2], vec![1.0, 2.0]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        assert_eq!(tape.value(loss).data, vec![5.0]);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn broadcast_add_grad_sums_over_rows() {
        // (2,3) + (3,) : bias grad accumulates both rows.
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![2, 3], vec![1.0; 6]).with_grad());
        let b = tape.leaf(t(vec![3], vec![0.5; 3]).with_grad());
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum_all(s);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[1.0; 6]);
        assert_eq!(grads.get(b).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![2], vec![1.0, 2.0]).with_grad());
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarOutput { .. }));
    }
}
