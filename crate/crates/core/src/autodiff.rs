//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to a [`Tape`]. Nodes only ever refer to
//! earlier nodes, so the tape is topologically ordered by construction and
//! [`Tape::backward`] is a single reverse sweep. Gradients accumulate
//! additively when a value feeds several consumers (e.g. encoder weights
//! shared by both augmented views).
//!
//! Operations that need saved state or a fused backward rule (the selective
//! scan, the contrastive losses) plug in through [`CustomOp`].

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Exp,
    Log,
    Neg,
    Softplus,
    Sigmoid,
    Tanh,
    Silu,
}

impl UnaryKind {
    pub const ALL: [UnaryKind; 7] = [
        UnaryKind::Exp,
        UnaryKind::Log,
        UnaryKind::Neg,
        UnaryKind::Softplus,
        UnaryKind::Sigmoid,
        UnaryKind::Tanh,
        UnaryKind::Silu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Neg => "neg",
            UnaryKind::Softplus => "softplus",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Tanh => "tanh",
            UnaryKind::Silu => "silu",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

impl BinaryKind {
    pub fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

impl ReduceKind {
    pub fn name(self) -> &'static str {
        match self {
            ReduceKind::Sum => "sum",
            ReduceKind::Mean => "mean",
            ReduceKind::Max => "max",
        }
    }
}

/// A differentiable operation with a hand-written backward rule.
///
/// `forward` may stash intermediate results on `self`; the op is stored on
/// the tape and its `backward` is called at most once per backward sweep.
pub trait CustomOp: Send {
    fn name(&self) -> &'static str;

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// Returns one gradient per input (`None` for non-differentiable inputs).
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    Binary(BinaryKind, Var, Var),
    Unary(UnaryKind, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Reduce {
        kind: ReduceKind,
        x: Var,
        axis: Option<usize>,
        argmax: Vec<usize>,
    },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    AddTiled(Var, Var),
    RmsNorm {
        x: Var,
        gain: Var,
        eps: f64,
    },
    L2Normalize(Var),
    ConcatCols(Var, Var),
    ReverseSegments {
        x: Var,
        segment: usize,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary(k, ..) => k.name(),
            Op::Unary(k, _) => k.name(),
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Reduce { kind, .. } => kind.name(),
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::AddTiled(..) => "add_tiled",
            Op::RmsNorm { .. } => "rms_norm",
            Op::L2Normalize(_) => "l2_normalize",
            Op::ConcatCols(..) => "concat_cols",
            Op::ReverseSegments { .. } => "reverse_segments",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` does not influence it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but materializes zeros for disconnected values.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

fn accumulate(slot: &mut Option<Tensor>, grad: Tensor) {
    match slot {
        Some(existing) => {
            for (e, g) in existing.data_mut().iter_mut().zip(grad.data()) {
                *e += g;
            }
        }
        None => *slot = Some(grad),
    }
}

/// `(outer, len, inner)` strides for reducing `shape` along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// First recorded node holding a non-finite value, with its op name.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (Var(i), n.op.name()))
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out_shape = if av.shape() == bv.shape() || bv.numel() == 1 {
            av.shape().to_vec()
        } else if av.numel() == 1 {
            bv.shape().to_vec()
        } else {
            return Err(Error::shape(kind.name(), av.shape(), bv.shape()));
        };
        let n: usize = out_shape.iter().product();
        let (ad, bd) = (av.data(), bv.data());
        let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        let data = (0..n)
            .map(|i| {
                let (x, y) = (pick(ad, i), pick(bd, i));
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                }
            })
            .collect();
        let rg = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            rg,
            Op::Binary(kind, a, b),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if kind == UnaryKind::Log {
            if let Some(bad) = xv.data().iter().find(|&&v| v <= 0.0) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("non-positive input {bad}"),
                });
            }
        }
        let f: fn(f64) -> f64 = match kind {
            UnaryKind::Exp => f64::exp,
            UnaryKind::Log => f64::ln,
            UnaryKind::Neg => |v| -v,
            UnaryKind::Softplus => softplus,
            UnaryKind::Sigmoid => sigmoid,
            UnaryKind::Tanh => f64::tanh,
            UnaryKind::Silu => |v| v * sigmoid(v),
        };
        let out = xv.map(f);
        let rg = self.needs(&[x]);
        Ok(self.push(out, rg, Op::Unary(kind, x)))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Softplus, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Silu, x)
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.needs(&[x]);
        self.push(out, rg, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        let rg = self.needs(&[x]);
        self.push(out, rg, Op::AddScalar(x))
    }

    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axis: Option<usize>) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let data = xv.data();
        let (outer, len, inner, out_shape) = match axis {
            None => (1, data.len(), 1, Vec::new()),
            Some(a) if a < shape.len() => {
                let (o, l, i) = axis_split(&shape, a);
                let mut s = shape.clone();
                s.remove(a);
                (o, l, i, s)
            }
            Some(a) => {
                return Err(Error::Axis {
                    axis: a,
                    rank: shape.len(),
                })
            }
        };
        if len == 0 && kind != ReduceKind::Sum {
            return Err(Error::Contract(format!("{} over empty axis", kind.name())));
        }
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if kind == ReduceKind::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let slot = o * inner + i;
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let s: f64 = (0..len).map(|k| data[idx(k)]).sum();
                        out[slot] = if kind == ReduceKind::Mean {
                            s / len as f64
                        } else {
                            s
                        };
                    }
                    ReduceKind::Max => {
                        let mut best = idx(0);
                        for k in 1..len {
                            // strict comparison keeps the lowest index on ties
                            if data[idx(k)] > data[best] {
                                best = idx(k);
                            }
                        }
                        out[slot] = data[best];
                        argmax[slot] = best;
                    }
                }
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            rg,
            Op::Reduce {
                kind,
                x,
                axis,
                argmax,
            },
        ))
    }

    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceKind::Sum, x, axis)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceKind::Mean, x, axis)
    }

    pub fn max(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(ReduceKind::Max, x, axis)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av
            .dims2()
            .map_err(|_| Error::shape("matmul", av.shape(), bv.shape()))?;
        let (k2, n) = bv
            .dims2()
            .map_err(|_| Error::shape("matmul", av.shape(), bv.shape()))?;
        if k != k2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            rg,
            Op::MatMul(a, b),
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        let d = xv.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), rg, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, rg, Op::Reshape(x)))
    }

    /// `x + p` with `p` repeated to cover `x` (row bias, position tables).
    pub fn add_tiled(&mut self, x: Var, p: Var) -> Result<Var> {
        let (xv, pv) = (self.value(x), self.value(p));
        let np = pv.numel();
        if np == 0 || xv.numel() % np != 0 {
            return Err(Error::shape("add_tiled", xv.shape(), pv.shape()));
        }
        let pd = pv.data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + pd[i % np])
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.needs(&[x, p]);
        Ok(self.push(out, rg, Op::AddTiled(x, p)))
    }

    /// Row-wise RMS normalization with a learned per-column gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        let (rows, cols) = xv.dims2()?;
        if gv.numel() != cols {
            return Err(Error::shape("rms_norm", xv.shape(), gv.shape()));
        }
        let (xd, gd) = (xv.data(), gv.data());
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for c in 0..cols {
                out[r * cols + c] = row[c] * inv * gd[c];
            }
        }
        let rg = self.needs(&[x, gain]);
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], out),
            rg,
            Op::RmsNorm { x, gain, eps },
        ))
    }

    /// Scales each row to unit L2 norm; rows with norm ≤ 1e-12 are rejected.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.dims2()?;
        let xd = xv.data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= 1e-12 {
                return Err(Error::DegenerateEmbedding { row: r, norm });
            }
            for c in 0..cols {
                out[r * cols + c] = row[c] / norm;
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], out),
            rg,
            Op::L2Normalize(x),
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ra, ca) = av.dims2()?;
        let (rb, cb) = bv.dims2()?;
        if ra != rb {
            return Err(Error::shape("concat_cols", av.shape(), bv.shape()));
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![ra, ca + cb], out),
            rg,
            Op::ConcatCols(a, b),
        ))
    }

    /// Reverses the row order inside each consecutive block of `segment` rows.
    pub fn reverse_segments(&mut self, x: Var, segment: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.dims2()?;
        if segment == 0 || rows % segment != 0 {
            return Err(Error::shape("reverse_segments", xv.shape(), &[segment]));
        }
        let xd = xv.data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let src = reversed_row(r, segment);
            out[r * cols..(r + 1) * cols].copy_from_slice(&xd[src * cols..(src + 1) * cols]);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], out),
            rg,
            Op::ReverseSegments { x, segment },
        ))
    }

    pub fn custom(&mut self, inputs: &[Var], mut op: Box<dyn CustomOp>) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = op.forward(&values)?;
        let rg = self.needs(inputs);
        Ok(self.push(
            out,
            rg,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        ))
    }

    /// Propagates d(loss)/d(node) back to every node that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (before, rest) = grads.split_at_mut(i);
            let Some(g) = rest[0].as_ref() else {
                continue;
            };
            self.backward_node(node, g, before)?;
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (av, bv) = (val(*a), val(*b));
                for (side, this, other) in [(0, *a, bv), (1, *b, av)] {
                    if !wants(this) {
                        continue;
                    }
                    let tv = val(this);
                    let od = other.data();
                    let pick = |i: usize| if od.len() == 1 { od[0] } else { od[i] };
                    let contrib = |i: usize| match (kind, side) {
                        (BinaryKind::Add, _) | (BinaryKind::Sub, 0) => gd[i],
                        (BinaryKind::Sub, _) => -gd[i],
                        (BinaryKind::Mul, _) => gd[i] * pick(i),
                    };
                    let grad = if tv.numel() == gd.len() {
                        Tensor::from_parts(tv.shape().to_vec(), (0..gd.len()).map(contrib).collect())
                    } else {
                        let s: f64 = (0..gd.len()).map(contrib).sum();
                        Tensor::from_parts(tv.shape().to_vec(), vec![s])
                    };
                    accumulate(&mut grads[this.0], grad);
                }
            }
            Op::Unary(kind, x) => {
                let xd = val(*x).data();
                let yd = node.value.data();
                let data = (0..gd.len())
                    .map(|i| {
                        let (xv, yv) = (xd[i], yd[i]);
                        let d = match kind {
                            UnaryKind::Exp => yv,
                            UnaryKind::Log => 1.0 / xv,
                            UnaryKind::Neg => -1.0,
                            UnaryKind::Softplus => sigmoid(xv),
                            UnaryKind::Sigmoid => yv * (1.0 - yv),
                            UnaryKind::Tanh => 1.0 - yv * yv,
                            UnaryKind::Silu => {
                                let s = sigmoid(xv);
                                s + xv * s * (1.0 - s)
                            }
                        };
                        gd[i] * d
                    })
                    .collect();
                accumulate(
                    &mut grads[x.0],
                    Tensor::from_parts(g.shape().to_vec(), data),
                );
            }
            Op::Scale(x, c) => {
                accumulate(&mut grads[x.0], g.map(|v| v * c));
            }
            Op::AddScalar(x) => {
                accumulate(&mut grads[x.0], g.clone());
            }
            Op::Reduce {
                kind,
                x,
                axis,
                argmax,
            } => {
                let xv = val(*x);
                let shape = xv.shape();
                let mut out = vec![0.0; xv.numel()];
                let (outer, len, inner) = match axis {
                    None => (1, xv.numel(), 1),
                    Some(a) => axis_split(shape, *a),
                };
                match kind {
                    ReduceKind::Max => {
                        for (slot, &src) in argmax.iter().enumerate() {
                            out[src] += gd[slot];
                        }
                    }
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let w = if *kind == ReduceKind::Mean {
                            1.0 / len as f64
                        } else {
                            1.0
                        };
                        for o in 0..outer {
                            for k in 0..len {
                                for i in 0..inner {
                                    out[(o * len + k) * inner + i] = gd[o * inner + i] * w;
                                }
                            }
                        }
                    }
                }
                accumulate(
                    &mut grads[x.0],
                    Tensor::from_parts(shape.to_vec(), out),
                );
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = av.dims2()?;
                let n = bv.shape()[1];
                if wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt_acc(gd, bv.data(), &mut ga, m, k, n);
                    accumulate(&mut grads[a.0], Tensor::from_parts(vec![m, k], ga));
                }
                if wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn_acc(av.data(), gd, &mut gb, m, k, n);
                    accumulate(&mut grads[b.0], Tensor::from_parts(vec![k, n], gb));
                }
            }
            Op::Transpose(x) => {
                let (r, c) = val(*x).dims2()?;
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[i * c + j] = gd[j * r + i];
                    }
                }
                accumulate(&mut grads[x.0], Tensor::from_parts(vec![r, c], out));
            }
            Op::Reshape(x) => {
                accumulate(&mut grads[x.0], g.reshape(val(*x).shape().to_vec())?);
            }
            Op::AddTiled(x, p) => {
                if wants(*x) {
                    accumulate(&mut grads[x.0], g.clone());
                }
                if wants(*p) {
                    let pv = val(*p);
                    let np = pv.numel();
                    let mut gp = vec![0.0; np];
                    for (i, v) in gd.iter().enumerate() {
                        gp[i % np] += v;
                    }
                    accumulate(&mut grads[p.0], Tensor::from_parts(pv.shape().to_vec(), gp));
                }
            }
            Op::RmsNorm { x, gain, eps } => {
                let (xv, gv) = (val(*x), val(*gain));
                let (rows, cols) = xv.dims2()?;
                let (xd, gnd) = (xv.data(), gv.data());
                let mut gx = vec![0.0; rows * cols];
                let mut gg = vec![0.0; cols];
                for r in 0..rows {
                    let row = &xd[r * cols..(r + 1) * cols];
                    let grow = &gd[r * cols..(r + 1) * cols];
                    let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
                    let inv = 1.0 / (ms + eps).sqrt();
                    let mut dot = 0.0;
                    for c in 0..cols {
                        gg[c] += grow[c] * row[c] * inv;
                        dot += grow[c] * gnd[c] * row[c];
                    }
                    let k = inv * inv * inv * dot / cols as f64;
                    for c in 0..cols {
                        gx[r * cols + c] = inv * grow[c] * gnd[c] - k * row[c];
                    }
                }
                if wants(*x) {
                    accumulate(&mut grads[x.0], Tensor::from_parts(vec![rows, cols], gx));
                }
                if wants(*gain) {
                    accumulate(
                        &mut grads[gain.0],
                        Tensor::from_parts(gv.shape().to_vec(), gg),
                    );
                }
            }
            Op::L2Normalize(x) => {
                let xv = val(*x);
                let (rows, cols) = xv.dims2()?;
                let yd = node.value.data();
                let xd = xv.data();
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let xr = &xd[r * cols..(r + 1) * cols];
                    let yr = &yd[r * cols..(r + 1) * cols];
                    let gr = &gd[r * cols..(r + 1) * cols];
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        gx[r * cols + c] = (gr[c] - yr[c] * dot) / norm;
                    }
                }
                accumulate(&mut grads[x.0], Tensor::from_parts(vec![rows, cols], gx));
            }
            Op::ConcatCols(a, b) => {
                let ca = val(*a).dims2()?.1;
                let (rows, cb) = val(*b).dims2()?;
                let width = ca + cb;
                if wants(*a) {
                    let data = (0..rows)
                        .flat_map(|r| gd[r * width..r * width + ca].iter().copied())
                        .collect();
                    accumulate(&mut grads[a.0], Tensor::from_parts(vec![rows, ca], data));
                }
                if wants(*b) {
                    let data = (0..rows)
                        .flat_map(|r| gd[r * width + ca..(r + 1) * width].iter().copied())
                        .collect();
                    accumulate(&mut grads[b.0], Tensor::from_parts(vec![rows, cb], data));
                }
            }
            Op::ReverseSegments { x, segment } => {
                let (rows, cols) = g.dims2()?;
                let mut out = vec![0.0; rows * cols];
                for r in 0..rows {
                    let src = reversed_row(r, *segment);
                    out[src * cols..(src + 1) * cols].copy_from_slice(&gd[r * cols..(r + 1) * cols]);
                }
                accumulate(&mut grads[x.0], Tensor::from_parts(vec![rows, cols], out));
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let input_grads = op.backward(&values, &node.value, g)?;
                if input_grads.len() != inputs.len() {
                    return Err(Error::Contract(format!(
                        "{} returned {} gradients for {} inputs",
                        op.name(),
                        input_grads.len(),
                        inputs.len()
                    )));
                }
                for (v, ig) in inputs.iter().zip(input_grads) {
                    if let (true, Some(ig)) = (wants(*v), ig) {
                        if ig.shape() != val(*v).shape() {
                            return Err(Error::shape(op.name(), ig.shape(), val(*v).shape()));
                        }
                        accumulate(&mut grads[v.0], ig);
                    }
                }
            }
        }
        Ok(())
    }
}

fn reversed_row(r: usize, segment: usize) -> usize {
    let base = r - r % segment;
    base + segment - 1 - (r - base)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut t = Tape::new();
        let eye = t.constant(mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let a = t.constant(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = t.constant(mat(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
        let ia = t.matmul(eye, a).unwrap();
        assert_eq!(t.value(ia), t.value(a));
        let ab = t.matmul(a, b).unwrap();
        assert_eq!(t.value(ab).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3]));
        let b = t.constant(Tensor::zeros(vec![2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn exp_of_zero_and_softplus_of_zero() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(vec![3]));
        let e = t.exp(z).unwrap();
        assert_eq!(t.value(e).data(), &[1.0; 3]);
        let s = t.softplus(z).unwrap();
        for v in t.value(s).data() {
            assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(t.log(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn binary_shape_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2]));
        let b = t.constant(Tensor::zeros(vec![3]));
        assert!(matches!(t.add(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn scalar_broadcast_gradient_sums() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = t.leaf(Tensor::scalar(2.0));
        let y = t.mul(x, s).unwrap();
        let l = t.sum(y, None).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(s).unwrap().data(), &[6.0]);
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn reductions() {
        let mut t = Tape::new();
        let v = t.constant(Tensor::vector(vec![2.0, 4.0, 6.0]));
        let m = t.mean(v, None).unwrap();
        assert_eq!(t.value(m).item().unwrap(), 4.0);
        let a = t.constant(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let s = t.sum(a, Some(0)).unwrap();
        assert_eq!(t.value(s).data(), &[4.0, 6.0]);
        assert!(matches!(t.sum(a, Some(2)), Err(Error::Axis { .. })));
    }

    #[test]
    fn max_routes_gradient_to_first_argmax() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 5.0, 5.0, 2.0]));
        let m = t.max(x, None).unwrap();
        let g = t.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn square_gradient_and_disconnected_leaf() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let unused = t.leaf(Tensor::scalar(7.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item().unwrap(), 6.0);
        assert!(g.get(unused).is_none());
        assert_eq!(g.get_or_zeros(unused, &[]).item().unwrap(), 0.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn l2_normalize_values() {
        let mut t = Tape::new();
        let x = t.constant(mat(&[vec![3.0, 4.0], vec![1.0, 0.0]]));
        let y = t.l2_normalize(x).unwrap();
        let d = t.value(y).data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
        assert_eq!(&d[2..], &[1.0, 0.0]);
        let z = t.constant(Tensor::zeros(vec![1, 2]));
        assert!(matches!(
            t.l2_normalize(z),
            Err(Error::DegenerateEmbedding { row: 0, .. })
        ));
    }

    #[test]
    fn reverse_segments_is_an_involution() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![6, 1], (0..6).map(f64::from).collect()).unwrap());
        let r = t.reverse_segments(x, 3).unwrap();
        assert_eq!(t.value(r).data(), &[2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
        let rr = t.reverse_segments(r, 3).unwrap();
        assert_eq!(t.value(rr), t.value(x));
    }
}
