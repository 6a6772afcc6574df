//! Reverse-mode differentiation over a dynamic tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each recorded operation
//! computes and caches its value immediately; [`Tape::backward`] then walks
//! the nodes in reverse to accumulate gradients for the parameter leaves.
//! Parameters are borrowed, never copied, so one tape per minibatch is cheap.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::named::{GradientSet, NamedTensors};
use crate::scalar::Scalar;
use crate::tensor::{
    dot, gemm_nn_acc, gemm_nt_acc, gemm_tn_acc, log_softmax_into, softmax_in_place, Tensor,
};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds a tape can record. Variants carry the non-differentiable
/// side data (indices, masks, constants) the operation needs.
#[derive(Debug, Clone)]
pub enum OpKind<T> {
    /// `a · b`
    MatMul,
    /// `a · bᵀ`
    MatMulNT,
    /// `a + b`; `b` may be a single row broadcast over the rows of `a`.
    Add,
    /// Elementwise product.
    Mul,
    Neg,
    Scale(T),
    Tanh,
    Sigmoid,
    /// Row softmax. With a mask, entries where the mask is zero are excluded
    /// and come out exactly zero.
    SoftmaxRow(Option<Tensor<T>>),
    LogSoftmaxRow,
    Log,
    /// Sum of all entries into a 1x1 tensor.
    Sum,
    /// Column-wise concatenation.
    Concat,
    /// Columns `start..start + len`.
    Slice { start: usize, len: usize },
    /// Output row `i` is input row `rows[i]`.
    GatherRows(Vec<usize>),
    /// Embedding lookup on an `m x K` table: output row `i` is column
    /// `ids[i]`. `None` yields a zero row.
    Lookup(Vec<Option<usize>>),
    /// Pairwise maximum over adjacent columns `(2j, 2j+1)`.
    Maxout,
    Reshape { rows: usize, cols: usize },
    /// Row-wise select: row `i` comes from the first input where
    /// `mask[i] == 1` and from the second where `mask[i] == 0`.
    MaskSelect(Vec<bool>),
    /// `alpha: B x T`, `ann: (B*T) x D` gives `B x D`, row `b` being
    /// `Σ_j alpha[b, j] · ann[b*T + j]`.
    Attend,
    /// Gated interpolation `(1 − z) ∘ prev + z ∘ proposal` over inputs
    /// `(z, prev, proposal)`.
    Interpolate,
    /// Weighted negative log-likelihood of `targets` under row softmaxes of
    /// the logits: `-Σ_b w_b log softmax(logits_b)[t_b]`, a 1x1 value.
    Nll { targets: Vec<usize>, weights: Vec<T> },
}

impl<T> OpKind<T> {
    fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::MatMulNT => "matmul_nt",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Neg => "neg",
            OpKind::Scale(_) => "scale",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::SoftmaxRow(_) => "softmax_row",
            OpKind::LogSoftmaxRow => "log_softmax_row",
            OpKind::Log => "log",
            OpKind::Sum => "sum",
            OpKind::Concat => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::GatherRows(_) => "gather_rows",
            OpKind::Lookup(_) => "lookup",
            OpKind::Maxout => "maxout",
            OpKind::Reshape { .. } => "reshape",
            OpKind::MaskSelect(_) => "mask_select",
            OpKind::Attend => "attend",
            OpKind::Interpolate => "interpolate",
            OpKind::Nll { .. } => "nll",
        }
    }
}

/// Deliberate backward-rule corruption, used only to prove that gradient
/// checks detect a broken rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Scales the tanh derivative by 1.01.
    TanhBackward,
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    inputs: Vec<Var>,
    kind: Option<OpKind<T>>,
    param: Option<usize>,
    needs_grad: bool,
}

pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    fault: Option<Fault>,
}

impl<'a, T: Scalar> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape { op, left: a, right: b }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Test hook: corrupt one backward rule.
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor<T>>, param: Option<usize>) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            kind: None,
            param,
            needs_grad: param.is_some(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(Cow::Owned(value), None)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor<T>) -> Var {
        self.push_leaf(Cow::Borrowed(value), None)
    }

    /// Registers a parameter leaf; `index` is its position in the parameter
    /// set later handed to [`Tape::backward`].
    pub fn param(&mut self, index: usize, value: &'a Tensor<T>) -> Var {
        self.push_leaf(Cow::Borrowed(value), Some(index))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Records an operation, computing and caching its forward value.
    pub fn record(&mut self, kind: OpKind<T>, inputs: &[Var]) -> Result<Var> {
        let value = self.forward(&kind, inputs)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            inputs: inputs.to_vec(),
            kind: Some(kind),
            param: None,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn arity(kind: &OpKind<T>, inputs: &[Var]) -> Result<()> {
        let expected = match kind {
            OpKind::MatMul | OpKind::MatMulNT | OpKind::Add | OpKind::Mul | OpKind::MaskSelect(_) | OpKind::Attend => 2,
            OpKind::Interpolate => 3,
            OpKind::Concat => {
                if inputs.is_empty() {
                    return Err(Error::invalid("concat needs at least one input"));
                }
                return Ok(());
            }
            _ => 1,
        };
        if inputs.len() != expected {
            return Err(Error::invalid(format!(
                "{} takes {expected} inputs, got {}",
                kind.name(),
                inputs.len()
            )));
        }
        Ok(())
    }

    fn forward(&self, kind: &OpKind<T>, inputs: &[Var]) -> Result<Tensor<T>> {
        Self::arity(kind, inputs)?;
        let x = self.value(inputs[0]);
        let y = inputs.get(1).map(|&v| self.value(v));
        Ok(match kind {
            OpKind::MatMul => x.matmul(y.unwrap())?,
            OpKind::MatMulNT => x.matmul_nt(y.unwrap())?,
            OpKind::Add => {
                let y = y.unwrap();
                if x.shape() == y.shape() {
                    x.add(y)?
                } else if y.rows() == 1 && y.cols() == x.cols() {
                    let mut out = x.clone();
                    for r in 0..out.rows() {
                        for (o, &b) in out.row_mut(r).iter_mut().zip(y.data()) {
                            *o += b;
                        }
                    }
                    out
                } else {
                    return Err(shape_err("add", x.shape(), y.shape()));
                }
            }
            OpKind::Mul => x.hadamard(y.unwrap())?,
            OpKind::Neg => x.map(|v| -v),
            OpKind::Scale(c) => x.scale(*c),
            OpKind::Tanh => x.map(T::tanh),
            OpKind::Sigmoid => x.map(|v| T::one() / (T::one() + (-v).exp())),
            OpKind::SoftmaxRow(mask) => {
                if x.cols() == 0 {
                    return Err(Error::invalid("softmax_row: empty rows"));
                }
                let mut out = x.clone();
                match mask {
                    None => {
                        for r in 0..out.rows() {
                            softmax_in_place(out.row_mut(r));
                        }
                    }
                    Some(mask) => {
                        if mask.shape() != x.shape() {
                            return Err(shape_err("softmax_row mask", x.shape(), mask.shape()));
                        }
                        for r in 0..out.rows() {
                            masked_softmax(x.row(r), mask.row(r), out.row_mut(r))?;
                        }
                    }
                }
                out
            }
            OpKind::LogSoftmaxRow => {
                let mut out = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    log_softmax_into(x.row(r), out.row_mut(r));
                }
                out
            }
            OpKind::Log => x.map(T::ln),
            OpKind::Sum => Tensor::scalar(x.sum()),
            OpKind::Concat => {
                let rows = x.rows();
                let mut cols = 0;
                for &v in inputs {
                    let t = self.value(v);
                    if t.rows() != rows {
                        return Err(shape_err("concat", x.shape(), t.shape()));
                    }
                    cols += t.cols();
                }
                let mut out = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    let mut off = 0;
                    let orow = out.row_mut(r);
                    for &v in inputs {
                        let t = self.value(v);
                        orow[off..off + t.cols()].copy_from_slice(t.row(r));
                        off += t.cols();
                    }
                }
                out
            }
            OpKind::Slice { start, len } => {
                if start + len > x.cols() || *len == 0 {
                    return Err(Error::invalid(format!(
                        "slice {start}..{} out of range for {} columns",
                        start + len,
                        x.cols()
                    )));
                }
                let mut out = Tensor::zeros(x.rows(), *len);
                for r in 0..x.rows() {
                    out.row_mut(r).copy_from_slice(&x.row(r)[*start..start + len]);
                }
                out
            }
            OpKind::GatherRows(rows) => {
                let mut out = Tensor::zeros(rows.len(), x.cols());
                for (i, &src) in rows.iter().enumerate() {
                    if src >= x.rows() {
                        return Err(Error::invalid(format!("gather_rows index {src} >= {}", x.rows())));
                    }
                    out.row_mut(i).copy_from_slice(x.row(src));
                }
                out
            }
            OpKind::Lookup(ids) => {
                let mut out = Tensor::zeros(ids.len(), x.rows());
                for (i, id) in ids.iter().enumerate() {
                    if let Some(id) = *id {
                        if id >= x.cols() {
                            return Err(Error::invalid(format!("lookup id {id} >= vocabulary {}", x.cols())));
                        }
                        for (k, o) in out.row_mut(i).iter_mut().enumerate() {
                            *o = x.get(k, id);
                        }
                    }
                }
                out
            }
            OpKind::Maxout => {
                if !x.cols().is_multiple_of(2) {
                    return Err(Error::invalid(format!("maxout needs an even width, got {}", x.cols())));
                }
                let half = x.cols() / 2;
                let mut out = Tensor::zeros(x.rows(), half);
                for r in 0..x.rows() {
                    let src = x.row(r);
                    for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                        *o = src[2 * j].max(src[2 * j + 1]);
                    }
                }
                out
            }
            OpKind::Reshape { rows, cols } => x.reshape(*rows, *cols)?,
            OpKind::MaskSelect(mask) => {
                let y = y.unwrap();
                if x.shape() != y.shape() || mask.len() != x.rows() {
                    return Err(shape_err("mask_select", x.shape(), y.shape()));
                }
                let mut out = y.clone();
                for (r, &m) in mask.iter().enumerate() {
                    if m {
                        out.row_mut(r).copy_from_slice(x.row(r));
                    }
                }
                out
            }
            OpKind::Attend => {
                let ann = y.unwrap();
                let (b, t) = x.shape();
                if ann.rows() != b * t {
                    return Err(shape_err("attend", x.shape(), ann.shape()));
                }
                let mut out = Tensor::zeros(b, ann.cols());
                for bi in 0..b {
                    let orow = out.row_mut(bi);
                    for j in 0..t {
                        let a = x.get(bi, j);
                        if a != T::zero() {
                            for (o, &h) in orow.iter_mut().zip(ann.row(bi * t + j)) {
                                *o += a * h;
                            }
                        }
                    }
                }
                out
            }
            OpKind::Interpolate => {
                let prev = y.unwrap();
                let prop = self.value(inputs[2]);
                if x.shape() != prev.shape() || x.shape() != prop.shape() {
                    return Err(shape_err("interpolate", x.shape(), prev.shape()));
                }
                let data = x
                    .data()
                    .iter()
                    .zip(prev.data())
                    .zip(prop.data())
                    .map(|((&z, &p), &q)| (T::one() - z) * p + z * q)
                    .collect();
                Tensor::from_vec(x.rows(), x.cols(), data)?
            }
            OpKind::Nll { targets, weights } => {
                if targets.len() != x.rows() || weights.len() != x.rows() {
                    return Err(Error::invalid(format!(
                        "nll: {} rows but {} targets / {} weights",
                        x.rows(),
                        targets.len(),
                        weights.len()
                    )));
                }
                let mut lp = vec![T::zero(); x.cols()];
                let mut total = T::zero();
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if t >= x.cols() {
                        return Err(Error::invalid(format!("nll target {t} >= {}", x.cols())));
                    }
                    if w != T::zero() {
                        log_softmax_into(x.row(r), &mut lp);
                        total -= w * lp[t];
                    }
                }
                Tensor::scalar(total)
            }
        })
    }

    // Convenience wrappers.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::MatMul, &[a, b])
    }
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::MatMulNT, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Add, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Mul, &[a, b])
    }
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Neg, &[a])
    }
    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.record(OpKind::Scale(c), &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Tanh, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Sigmoid, &[a])
    }
    pub fn softmax_rows(&mut self, a: Var, mask: Option<Tensor<T>>) -> Result<Var> {
        self.record(OpKind::SoftmaxRow(mask), &[a])
    }
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::LogSoftmaxRow, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Log, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Sum, &[a])
    }
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.record(OpKind::Concat, parts)
    }
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.record(OpKind::Slice { start, len }, &[a])
    }
    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var> {
        self.record(OpKind::GatherRows(rows), &[a])
    }
    pub fn lookup(&mut self, table: Var, ids: Vec<Option<usize>>) -> Result<Var> {
        self.record(OpKind::Lookup(ids), &[table])
    }
    pub fn maxout(&mut self, a: Var) -> Result<Var> {
        self.record(OpKind::Maxout, &[a])
    }
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        self.record(OpKind::Reshape { rows, cols }, &[a])
    }
    pub fn mask_select(&mut self, when_set: Var, otherwise: Var, mask: Vec<bool>) -> Result<Var> {
        self.record(OpKind::MaskSelect(mask), &[when_set, otherwise])
    }
    pub fn attend(&mut self, alpha: Var, annotations: Var) -> Result<Var> {
        self.record(OpKind::Attend, &[alpha, annotations])
    }
    pub fn interpolate(&mut self, z: Var, prev: Var, proposal: Var) -> Result<Var> {
        self.record(OpKind::Interpolate, &[z, prev, proposal])
    }
    pub fn nll(&mut self, logits: Var, targets: Vec<usize>, weights: Vec<T>) -> Result<Var> {
        self.record(OpKind::Nll { targets, weights }, &[logits])
    }

    /// `x · Wᵀ + b` with `W` stored `out x in` and `b` a `1 x out` row.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul_nt(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Reverse sweep from a scalar root. Returns one gradient per entry of
    /// `params` (zero for parameters the root does not depend on).
    pub fn backward(&self, root: Var, params: &NamedTensors<T>) -> Result<GradientSet<T>> {
        let root_shape = self.value(root).shape();
        if root_shape != (1, 1) {
            return Err(Error::invalid(format!("backward root must be 1x1, got {root_shape:?}")));
        }
        let mut grads = params.zeros_like();
        let mut adj: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Some(p) = node.param {
                if p >= grads.len() || grads.at(p).shape() != g.shape() {
                    return Err(Error::invalid(format!("parameter leaf {p} does not match the parameter set")));
                }
                grads.at_mut(p).add_assign(&g);
                continue;
            }
            let Some(kind) = &node.kind else { continue };
            self.propagate(kind, node, &g, &mut adj);
        }
        Ok(grads)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, kind: &OpKind<T>, node: &Node<'a, T>, g: &Tensor<T>, adj: &mut [Option<Tensor<T>>]) {
        let inputs = &node.inputs;
        let out = &*node.value;
        let x = self.value(inputs[0]);
        let acc = |adj: &mut [Option<Tensor<T>>], v: Var, f: &dyn Fn(&mut Tensor<T>)| {
            let t = self.value(v);
            let slot = adj[v.0].get_or_insert_with(|| Tensor::zeros(t.rows(), t.cols()));
            f(slot);
        };
        match kind {
            OpKind::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let bv = self.value(b);
                if self.wants(a) {
                    acc(adj, a, &|s| gemm_nt_acc(g, bv, s));
                }
                if self.wants(b) {
                    acc(adj, b, &|s| gemm_tn_acc(x, g, s));
                }
            }
            OpKind::MatMulNT => {
                let (a, b) = (inputs[0], inputs[1]);
                let bv = self.value(b);
                if self.wants(a) {
                    acc(adj, a, &|s| gemm_nn_acc(g, bv, s));
                }
                if self.wants(b) {
                    acc(adj, b, &|s| gemm_tn_acc(g, x, s));
                }
            }
            OpKind::Add => {
                let (a, b) = (inputs[0], inputs[1]);
                if self.wants(a) {
                    acc(adj, a, &|s| s.add_assign(g));
                }
                if self.wants(b) {
                    let bshape = self.value(b).shape();
                    if bshape == g.shape() {
                        acc(adj, b, &|s| s.add_assign(g));
                    } else {
                        acc(adj, b, &|s| {
                            let srow = s.row_mut(0);
                            for r in 0..g.rows() {
                                for (o, &v) in srow.iter_mut().zip(g.row(r)) {
                                    *o += v;
                                }
                            }
                        });
                    }
                }
            }
            OpKind::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let bv = self.value(b);
                if self.wants(a) {
                    acc(adj, a, &|s| zip3(s, g, bv, |gi, bi| gi * bi));
                }
                if self.wants(b) {
                    acc(adj, b, &|s| zip3(s, g, x, |gi, ai| gi * ai));
                }
            }
            OpKind::Neg => acc(adj, inputs[0], &|s| zip2(s, g, |gi| -gi)),
            OpKind::Scale(c) => {
                let c = *c;
                acc(adj, inputs[0], &|s| zip2(s, g, |gi| gi * c))
            }
            OpKind::Tanh => {
                let bump = if self.fault == Some(Fault::TanhBackward) {
                    T::from_f64_lossy(1.01)
                } else {
                    T::one()
                };
                acc(adj, inputs[0], &|s| zip3(s, g, out, |gi, yi| gi * (T::one() - yi * yi) * bump))
            }
            OpKind::Sigmoid => acc(adj, inputs[0], &|s| zip3(s, g, out, |gi, yi| gi * yi * (T::one() - yi))),
            OpKind::SoftmaxRow(_) => acc(adj, inputs[0], &|s| {
                for r in 0..g.rows() {
                    let (yr, gr) = (out.row(r), g.row(r));
                    let inner = dot(yr, gr);
                    for ((o, &yi), &gi) in s.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o += yi * (gi - inner);
                    }
                }
            }),
            OpKind::LogSoftmaxRow => acc(adj, inputs[0], &|s| {
                for r in 0..g.rows() {
                    let gr = g.row(r);
                    let total: T = gr.iter().copied().sum();
                    for ((o, &lp), &gi) in s.row_mut(r).iter_mut().zip(out.row(r)).zip(gr) {
                        *o += gi - lp.exp() * total;
                    }
                }
            }),
            OpKind::Log => acc(adj, inputs[0], &|s| zip3(s, g, x, |gi, xi| gi / xi)),
            OpKind::Sum => {
                let gv = g.item();
                acc(adj, inputs[0], &|s| s.data_mut().iter_mut().for_each(|o| *o += gv))
            }
            OpKind::Concat => {
                let mut off = 0;
                for &v in inputs {
                    let w = self.value(v).cols();
                    if self.wants(v) {
                        acc(adj, v, &|s| {
                            for r in 0..g.rows() {
                                for (o, &gi) in s.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                    *o += gi;
                                }
                            }
                        });
                    }
                    off += w;
                }
            }
            OpKind::Slice { start, len } => acc(adj, inputs[0], &|s| {
                for r in 0..g.rows() {
                    for (o, &gi) in s.row_mut(r)[*start..start + len].iter_mut().zip(g.row(r)) {
                        *o += gi;
                    }
                }
            }),
            OpKind::GatherRows(rows) => acc(adj, inputs[0], &|s| {
                for (i, &src) in rows.iter().enumerate() {
                    for (o, &gi) in s.row_mut(src).iter_mut().zip(g.row(i)) {
                        *o += gi;
                    }
                }
            }),
            OpKind::Lookup(ids) => acc(adj, inputs[0], &|s| {
                let k = s.cols();
                let data = s.data_mut();
                for (i, id) in ids.iter().enumerate() {
                    if let Some(id) = *id {
                        for (row, &gi) in g.row(i).iter().enumerate() {
                            data[row * k + id] += gi;
                        }
                    }
                }
            }),
            OpKind::Maxout => acc(adj, inputs[0], &|s| {
                for r in 0..g.rows() {
                    let src = x.row(r);
                    let srow = s.row_mut(r);
                    for (j, &gi) in g.row(r).iter().enumerate() {
                        // ties go to the lower index
                        let pick = if src[2 * j] >= src[2 * j + 1] { 2 * j } else { 2 * j + 1 };
                        srow[pick] += gi;
                    }
                }
            }),
            OpKind::Reshape { .. } => acc(adj, inputs[0], &|s| {
                for (o, &gi) in s.data_mut().iter_mut().zip(g.data()) {
                    *o += gi;
                }
            }),
            OpKind::MaskSelect(mask) => {
                let (a, b) = (inputs[0], inputs[1]);
                if self.wants(a) {
                    acc(adj, a, &|s| {
                        for (r, &m) in mask.iter().enumerate() {
                            if m {
                                for (o, &gi) in s.row_mut(r).iter_mut().zip(g.row(r)) {
                                    *o += gi;
                                }
                            }
                        }
                    });
                }
                if self.wants(b) {
                    acc(adj, b, &|s| {
                        for (r, &m) in mask.iter().enumerate() {
                            if !m {
                                for (o, &gi) in s.row_mut(r).iter_mut().zip(g.row(r)) {
                                    *o += gi;
                                }
                            }
                        }
                    });
                }
            }
            OpKind::Attend => {
                let (alpha, ann) = (inputs[0], inputs[1]);
                let annv = self.value(ann);
                let (b, t) = x.shape();
                if self.wants(alpha) {
                    acc(adj, alpha, &|s| {
                        for bi in 0..b {
                            for j in 0..t {
                                let v = dot(g.row(bi), annv.row(bi * t + j));
                                let cur = s.get(bi, j);
                                s.set(bi, j, cur + v);
                            }
                        }
                    });
                }
                if self.wants(ann) {
                    acc(adj, ann, &|s| {
                        for bi in 0..b {
                            for j in 0..t {
                                let a = x.get(bi, j);
                                if a != T::zero() {
                                    for (o, &gi) in s.row_mut(bi * t + j).iter_mut().zip(g.row(bi)) {
                                        *o += a * gi;
                                    }
                                }
                            }
                        }
                    });
                }
            }
            OpKind::Interpolate => {
                let (z, prev, prop) = (inputs[0], inputs[1], inputs[2]);
                let (pv, qv) = (self.value(prev), self.value(prop));
                if self.wants(z) {
                    acc(adj, z, &|s| {
                        for (((o, &gi), &p), &q) in s.data_mut().iter_mut().zip(g.data()).zip(pv.data()).zip(qv.data()) {
                            *o += gi * (q - p);
                        }
                    });
                }
                if self.wants(prev) {
                    acc(adj, prev, &|s| zip3(s, g, x, |gi, zi| gi * (T::one() - zi)));
                }
                if self.wants(prop) {
                    acc(adj, prop, &|s| zip3(s, g, x, |gi, zi| gi * zi));
                }
            }
            OpKind::Nll { targets, weights } => {
                let up = g.item();
                acc(adj, inputs[0], &|s| {
                    let mut p = vec![T::zero(); x.cols()];
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        p.copy_from_slice(x.row(r));
                        softmax_in_place(&mut p);
                        p[t] -= T::one();
                        let scale = up * w;
                        for (o, &pi) in s.row_mut(r).iter_mut().zip(&p) {
                            *o += scale * pi;
                        }
                    }
                });
            }
        }
    }
}

fn masked_softmax<T: Scalar>(x: &[T], mask: &[T], out: &mut [T]) -> Result<()> {
    let mut max = T::neg_infinity();
    for (&v, &m) in x.iter().zip(mask) {
        if m != T::zero() {
            max = max.max(v);
        }
    }
    if max == T::neg_infinity() {
        return Err(Error::invalid("softmax_row: every position is masked"));
    }
    let mut total = T::zero();
    for ((o, &v), &m) in out.iter_mut().zip(x).zip(mask) {
        *o = if m != T::zero() { (v - max).exp() } else { T::zero() };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    Ok(())
}

#[inline]
fn zip2<T: Scalar>(s: &mut Tensor<T>, g: &Tensor<T>, f: impl Fn(T) -> T) {
    for (o, &gi) in s.data_mut().iter_mut().zip(g.data()) {
        *o += f(gi);
    }
}

#[inline]
fn zip3<T: Scalar>(s: &mut Tensor<T>, g: &Tensor<T>, h: &Tensor<T>, f: impl Fn(T, T) -> T) {
    for ((o, &gi), &hi) in s.data_mut().iter_mut().zip(g.data()).zip(h.data()) {
        *o += f(gi, hi);
    }
}

/// Central-difference gradient `(f(θ+h) − f(θ−h)) / 2h` for every coordinate
/// of every parameter. The verification oracle for [`Tape::backward`].
pub fn finite_diff_grad<F>(mut loss_fn: F, params: &NamedTensors<f64>, h: f64) -> Result<GradientSet<f64>>
where
    F: FnMut(&NamedTensors<f64>) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::invalid(format!("finite_diff_grad: step must be > 0, got {h}")));
    }
    let mut probe = params.clone();
    let mut grads = params.zeros_like();
    for p in 0..params.len() {
        for i in 0..params.at(p).len() {
            let orig = params.at(p).data()[i];
            probe.at_mut(p).data_mut()[i] = orig + h;
            let up = loss_fn(&probe)?;
            probe.at_mut(p).data_mut()[i] = orig - h;
            let down = loss_fn(&probe)?;
            probe.at_mut(p).data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss while probing {}[{i}]",
                    params.name(p)
                )));
            }
            grads.at_mut(p).data_mut()[i] = (up - down) / (2.0 * h);
        }
    }
    Ok(grads)
}

/// Max over coordinates of `|a − n| / max(1, |a|, |n|)`.
pub fn max_relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / 1f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    fn rand_t(rng: &mut RngState, r: usize, c: usize) -> Tensor<f64> {
        Tensor::gaussian_fill(rng, r, c, 0.0, 1.0).unwrap()
    }

    /// Builds a scalar loss from the op under test: `sum(op(inputs) ∘ probe)`
    /// with a fixed random probe so every output coordinate matters.
    fn check_op(
        inputs: Vec<Tensor<f64>>,
        build: impl Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
    ) -> f64 {
        let mut params = NamedTensors::new();
        for (i, t) in inputs.into_iter().enumerate() {
            params.insert(format!("x{i}"), t).unwrap();
        }
        let probe_shape = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = (0..params.len()).map(|i| tape.param(i, params.at(i))).collect();
            let out = build(&mut tape, &vars).unwrap();
            tape.value(out).shape()
        };
        let probe = Tensor::gaussian_fill(&mut RngState::new(99), probe_shape.0, probe_shape.1, 0.0, 1.0).unwrap();
        let loss = |p: &NamedTensors<f64>| -> Result<(f64, GradientSet<f64>)> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = (0..p.len()).map(|i| tape.param(i, p.at(i))).collect();
            let out = build(&mut tape, &vars)?;
            let pr = tape.constant(probe.clone());
            let prod = tape.mul(out, pr)?;
            let root = tape.sum(prod)?;
            let g = tape.backward(root, p)?;
            Ok((tape.value(root).item(), g))
        };
        let (_, analytic) = loss(&params).unwrap();
        let numeric = finite_diff_grad(|p| loss(p).map(|r| r.0), &params, 1e-5).unwrap();
        (0..params.len())
            .map(|i| max_relative_error(analytic.at(i), numeric.at(i)))
            .fold(0.0, f64::max)
    }

    const TOL: f64 = 1e-6;

    #[test]
    fn grad_matmul_family() {
        let mut r = RngState::new(1);
        let e = check_op(vec![rand_t(&mut r, 3, 4), rand_t(&mut r, 4, 2)], |t, v| t.matmul(v[0], v[1]));
        assert!(e <= TOL, "matmul {e}");
        let e = check_op(vec![rand_t(&mut r, 3, 4), rand_t(&mut r, 5, 4)], |t, v| t.matmul_nt(v[0], v[1]));
        assert!(e <= TOL, "matmul_nt {e}");
    }

    #[test]
    fn grad_elementwise() {
        let mut r = RngState::new(2);
        let (a, b) = (rand_t(&mut r, 3, 4), rand_t(&mut r, 3, 4));
        for (name, e) in [
            ("add", check_op(vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]))),
            ("add_row", check_op(vec![a.clone(), rand_t(&mut r, 1, 4)], |t, v| t.add(v[0], v[1]))),
            ("mul", check_op(vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]))),
            ("neg", check_op(vec![a.clone()], |t, v| t.neg(v[0]))),
            ("scale", check_op(vec![a.clone()], |t, v| t.scale(v[0], 2.5))),
            ("tanh", check_op(vec![a.clone()], |t, v| t.tanh(v[0]))),
            ("sigmoid", check_op(vec![a.clone()], |t, v| t.sigmoid(v[0]))),
            ("log", check_op(vec![a.map(|x| x.abs() + 0.5)], |t, v| t.log(v[0]))),
            ("sum", check_op(vec![a.clone()], |t, v| t.sum(v[0]))),
        ] {
            assert!(e <= TOL, "{name}: {e}");
        }
    }

    #[test]
    fn grad_softmax_family() {
        let mut r = RngState::new(3);
        let a = rand_t(&mut r, 3, 5);
        let e = check_op(vec![a.clone()], |t, v| t.softmax_rows(v[0], None));
        assert!(e <= TOL, "softmax {e}");
        let mask = Tensor::from_rows(&[&[1.0, 1.0, 0.0, 1.0, 0.0], &[1.0; 5], &[0.0, 1.0, 0.0, 0.0, 0.0]]);
        let e = check_op(vec![a.clone()], move |t, v| t.softmax_rows(v[0], Some(mask.clone())));
        assert!(e <= TOL, "masked softmax {e}");
        let e = check_op(vec![a.clone()], |t, v| t.log_softmax_rows(v[0]));
        assert!(e <= TOL, "log_softmax {e}");
        let e = check_op(vec![a], |t, v| t.nll(v[0], vec![4, 0, 2], vec![1.0, 0.0, 2.0]));
        assert!(e <= TOL, "nll {e}");
    }

    #[test]
    fn grad_structural() {
        let mut r = RngState::new(4);
        let (a, b) = (rand_t(&mut r, 3, 4), rand_t(&mut r, 3, 2));
        for (name, e) in [
            ("concat", check_op(vec![a.clone(), b.clone()], |t, v| t.concat(&[v[0], v[1], v[0]]))),
            ("slice", check_op(vec![a.clone()], |t, v| t.slice(v[0], 1, 2))),
            ("gather", check_op(vec![a.clone()], |t, v| t.gather_rows(v[0], vec![2, 0, 2, 1]))),
            ("lookup", check_op(vec![a.clone()], |t, v| t.lookup(v[0], vec![Some(3), None, Some(3), Some(0)]))),
            ("maxout", check_op(vec![a.clone()], |t, v| t.maxout(v[0]))),
            ("reshape", check_op(vec![a.clone()], |t, v| t.reshape(v[0], 2, 6))),
            (
                "mask_select",
                check_op(vec![a.clone(), rand_t(&mut r, 3, 4)], |t, v| {
                    t.mask_select(v[0], v[1], vec![true, false, true])
                }),
            ),
            (
                "interpolate",
                check_op(vec![rand_t(&mut r, 3, 4), rand_t(&mut r, 3, 4), rand_t(&mut r, 3, 4)], |t, v| {
                    let z = t.sigmoid(v[0])?;
                    t.interpolate(z, v[1], v[2])
                }),
            ),
            (
                "attend",
                check_op(vec![rand_t(&mut r, 2, 3), rand_t(&mut r, 6, 4)], |t, v| t.attend(v[0], v[1])),
            ),
        ] {
            assert!(e <= TOL, "{name}: {e}");
        }
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let z = Tensor::<f64>::zeros(1, 1);
        let mut tape = Tape::new();
        let x = tape.constant_ref(&z);
        let y = tape.tanh(x).unwrap();
        assert_eq!(tape.value(y).item(), 0.0);
    }

    #[test]
    fn add_shape_mismatch_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(3, 2));
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_weight_gradient_is_input_transpose_times_upstream() {
        let mut r = RngState::new(5);
        let x = rand_t(&mut r, 2, 3);
        let mut params = NamedTensors::new();
        params.insert("w", rand_t(&mut r, 3, 4)).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant_ref(&x);
        let w = tape.param(0, params.at(0));
        let y = tape.matmul(xv, w).unwrap();
        let root = tape.sum(y).unwrap();
        let g = tape.backward(root, &params).unwrap();
        let expected = x.matmul_tn(&Tensor::filled(2, 4, 1.0)).unwrap();
        assert!(g.at(0).max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn backward_edge_cases() {
        let mut params = NamedTensors::new();
        params.insert("w", Tensor::filled(2, 2, 0.7)).unwrap();
        params.insert("unused", Tensor::filled(1, 3, 1.0)).unwrap();

        let mut tape = Tape::new();
        let c = tape.constant(Tensor::filled(2, 2, 3.0));
        let root = tape.sum(c).unwrap();
        let g = tape.backward(root, &params).unwrap();
        assert_eq!(g.global_norm(), 0.0);

        let mut tape = Tape::new();
        let w = tape.param(0, params.at(0));
        let root = tape.sum(w).unwrap();
        let g = tape.backward(root, &params).unwrap();
        assert!(g.at(0).data().iter().all(|&v| v == 1.0));
        assert!(g.at(1).data().iter().all(|&v| v == 0.0));

        assert!(tape.backward(w, &params).is_err());
    }

    #[test]
    fn backward_is_linear_in_the_root() {
        let mut r = RngState::new(6);
        let mut params = NamedTensors::new();
        params.insert("w", rand_t(&mut r, 3, 3)).unwrap();
        let x = rand_t(&mut r, 2, 3);
        let run = |alpha: f64| {
            let mut tape = Tape::new();
            let xv = tape.constant_ref(&x);
            let w = tape.param(0, params.at(0));
            let h = tape.matmul_nt(xv, w).unwrap();
            let h = tape.tanh(h).unwrap();
            let s = tape.sum(h).unwrap();
            let root = tape.scale(s, alpha).unwrap();
            tape.backward(root, &params).unwrap()
        };
        let g1 = run(1.0);
        let g2 = run(2.0);
        assert!(g2.at(0).max_abs_diff(&g1.at(0).scale(2.0)) < 1e-14);
    }

    #[test]
    fn maxout_routes_to_lower_index_on_ties() {
        let mut params = NamedTensors::new();
        params.insert("x", Tensor::from_rows(&[&[2.0, 2.0, 1.0, 3.0]])).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(0, params.at(0));
        let m = tape.maxout(x).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0, 3.0]);
        let root = tape.sum(m).unwrap();
        let g = tape.backward(root, &params).unwrap();
        assert_eq!(g.at(0).data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn finite_diff_scalar_cases() {
        let mut params = NamedTensors::new();
        params.insert("t", Tensor::scalar(3.0)).unwrap();
        let g = finite_diff_grad(|p| Ok(p.at(0).item().powi(2)), &params, 1e-5).unwrap();
        assert!((g.at(0).item() - 6.0).abs() <= 1e-8);

        params.at_mut(0).data_mut()[0] = 0.0;
        let g = finite_diff_grad(|p| Ok(p.at(0).item().tanh()), &params, 1e-5).unwrap();
        assert!((g.at(0).item() - 1.0).abs() <= 1e-8);

        let err = finite_diff_grad(|p| Ok(1.0 / p.at(0).item() - 1.0 / p.at(0).item()), &params, 1e-5);
        assert!(err.is_ok());
        let err = finite_diff_grad(|_| Ok(f64::NAN), &params, 1e-5).unwrap_err();
        assert!(err.to_string().contains("t[0]"));
        assert!(finite_diff_grad(|_| Ok(0.0), &params, 0.0).is_err());
    }

    #[test]
    fn two_layer_composition_matches_oracle() {
        let mut r = RngState::new(7);
        let e = check_op(vec![rand_t(&mut r, 2, 3), rand_t(&mut r, 4, 3), rand_t(&mut r, 2, 4)], |t, v| {
            let h = t.matmul_nt(v[0], v[1])?;
            let h = t.tanh(h)?;
            let o = t.matmul_nt(h, v[2])?;
            t.sigmoid(o)
        });
        assert!(e <= TOL, "{e}");
    }

    #[test]
    fn replay_is_bitwise_identical() {
        let mut r = RngState::new(8);
        let x = rand_t(&mut r, 3, 4);
        let w = rand_t(&mut r, 5, 4);
        let run = || {
            let mut tape = Tape::new();
            let a = tape.constant_ref(&x);
            let b = tape.constant_ref(&w);
            let h = tape.matmul_nt(a, b).unwrap();
            let s = tape.softmax_rows(h, None).unwrap();
            tape.value(s).clone()
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn injected_fault_is_detectable() {
        let mut params = NamedTensors::new();
        params.insert("x", Tensor::from_rows(&[&[0.3, -0.2]])).unwrap();
        let grad = |fault: bool| {
            let mut tape = Tape::new();
            if fault {
                tape.inject_fault(Fault::TanhBackward);
            }
            let x = tape.param(0, params.at(0));
            let y = tape.tanh(x).unwrap();
            let root = tape.sum(y).unwrap();
            tape.backward(root, &params).unwrap()
        };
        let clean = grad(false);
        let bad = grad(true);
        assert!(max_relative_error(clean.at(0), bad.at(0)) > 1e-3);
    }
}
