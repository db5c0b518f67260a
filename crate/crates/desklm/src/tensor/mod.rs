//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation whose inputs require gradients; a
//! single [`Graph::backward`] pass then walks the tape in reverse and
//! accumulates gradients into the participating tensors. The op set is
//! fixed: exactly the kernels the model stack needs, each with its own
//! backward rule so the rules can be tested in isolation against finite
//! differences (see [`gradcheck`]).

pub(crate) mod kernels;

pub mod gradcheck;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

pub use gradcheck::grad_check;
pub use kernels::Element;

/// Epsilon added under the square root inside `rms_normalize`.
pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    LossNotScalar(Vec<usize>),
    #[error("graph already consumed by a backward pass")]
    GraphConsumed,
    #[error("token id {id} out of range for vocab {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("data length {len} does not match shape {shape:?}")]
    BadLength { len: usize, shape: Vec<usize> },
}

struct TensorInner<E: Element> {
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<E>>>,
}

/// Dense n-dimensional array handle. Clones share storage.
///
/// Scalars use the empty shape `[]` (one element). Data is immutable while a
/// recorded graph is alive; gradients accumulate additively across backward
/// passes until [`Tensor::zero_grad`].
pub struct Tensor<E: Element> {
    inner: Rc<TensorInner<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}

pub fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Element> Tensor<E> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<E>) -> Result<Self, TensorError> {
        if numel_of(&shape) != data.len() {
            return Err(TensorError::BadLength { len: data.len(), shape });
        }
        Ok(Tensor {
            inner: Rc::new(TensorInner {
                shape,
                data: RefCell::new(data),
                requires_grad: Cell::new(false),
                grad: RefCell::new(None),
            }),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel_of(&shape);
        Self::from_vec(shape, vec![E::zero(); n]).expect("consistent")
    }

    pub fn full(shape: Vec<usize>, value: E) -> Self {
        let n = numel_of(&shape);
        Self::from_vec(shape, vec![value; n]).expect("consistent")
    }

    pub fn scalar(value: E) -> Self {
        Self::from_vec(vec![], vec![value]).expect("consistent")
    }

    pub fn param(shape: Vec<usize>, data: Vec<E>) -> Result<Self, TensorError> {
        let t = Self::from_vec(shape, data)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.shape)
    }

    pub fn data(&self) -> Ref<'_, Vec<E>> {
        self.inner.data.borrow()
    }

    /// Mutable access to the raw buffer. Only valid between passes: mutating
    /// a tensor referenced by a live graph invalidates that graph.
    pub fn data_mut(&self) -> RefMut<'_, Vec<E>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.inner.data.borrow().clone()
    }

    /// Scalar value; panics if the tensor is not single-element.
    pub fn item(&self) -> E {
        let d = self.inner.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor with shape {:?}", self.inner.shape);
        d[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn set_requires_grad(&self, flag: bool) {
        self.inner.requires_grad.set(flag);
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Adds `contrib` into the gradient buffer, allocating zeros on first use.
    pub fn accumulate_grad(&self, contrib: &[E]) {
        debug_assert_eq!(contrib.len(), self.numel());
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (b, c) in buf.iter_mut().zip(contrib) {
                    *b = *b + *c;
                }
            }
            None => *g = Some(contrib.to_vec()),
        }
    }

    /// Scales the stored gradient in place (used by gradient accumulation).
    pub fn scale_grad(&self, factor: E) {
        if let Some(buf) = self.inner.grad.borrow_mut().as_mut() {
            for b in buf.iter_mut() {
                *b = *b * factor;
            }
        }
    }

    pub fn ptr_eq(&self, other: &Tensor<E>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Deep copy with no grad state.
    pub fn detached_copy(&self) -> Tensor<E> {
        Tensor::from_vec(self.inner.shape.clone(), self.to_vec()).expect("consistent")
    }

    fn seed_unit_grad(&self) {
        *self.inner.grad.borrow_mut() = Some(vec![E::one(); self.numel()]);
    }

    fn grad_ref(&self) -> Ref<'_, Option<Vec<E>>> {
        self.inner.grad.borrow()
    }
}

enum Op<E: Element> {
    Matmul,
    Add,
    Sub,
    Mul,
    Div,
    Scale { factor: E },
    Exp,
    Log,
    Sqrt,
    Square,
    Sigmoid,
    Silu,
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    RmsNorm { inv_rms: Vec<E> },
    CausalSoftmax,
    EmbedLookup { ids: Vec<usize> },
    Transpose,
    Reshape,
    Slice { axis: usize, start: usize },
    Concat { axis: usize },
    RotateHalf,
}

impl<E: Element> Op<E> {
    fn name(&self) -> &'static str {
        match self {
            Op::Matmul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale { .. } => "scale",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Square => "square",
            Op::Sigmoid => "sigmoid",
            Op::Silu => "silu",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::RmsNorm { .. } => "rms_normalize",
            Op::CausalSoftmax => "causal_softmax",
            Op::EmbedLookup { .. } => "embed_lookup",
            Op::Transpose => "transpose",
            Op::Reshape => "reshape",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::RotateHalf => "rotate_half",
        }
    }
}

struct Node<E: Element> {
    op: Op<E>,
    inputs: Vec<Tensor<E>>,
    output: Tensor<E>,
}

/// Append-only operation tape. Nodes are recorded in execution order, so the
/// list is already topologically sorted; backward walks it once in reverse.
pub struct Graph<E: Element> {
    nodes: RefCell<Vec<Node<E>>>,
    consumed: Cell<bool>,
    validate_finite: Cell<bool>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            // NaN/Inf screening on every op output: debug builds only unless
            // explicitly enabled.
            validate_finite: Cell::new(cfg!(debug_assertions)),
        }
    }

    pub fn set_validate_finite(&self, flag: bool) {
        self.validate_finite.set(flag);
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn finish(
        &self,
        op: Op<E>,
        inputs: &[&Tensor<E>],
        shape: Vec<usize>,
        data: Vec<E>,
    ) -> Result<Tensor<E>, TensorError> {
        if self.validate_finite.get() && data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let out = Tensor::from_vec(shape, data)?;
        if inputs.iter().any(|t| t.requires_grad()) {
            if self.consumed.get() {
                return Err(TensorError::GraphConsumed);
            }
            out.set_requires_grad(true);
            self.nodes.borrow_mut().push(Node {
                op,
                inputs: inputs.iter().map(|t| (*t).clone()).collect(),
                output: out.clone(),
            });
        }
        Ok(out)
    }

    // ── forward ops ─────────────────────────────────────────────────────

    /// C = A·B for rank-2 operands (m,k)·(k,n).
    pub fn matmul(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                details: format!("{ash:?} x {bsh:?}"),
            });
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let mut out = vec![E::zero(); m * n];
        kernels::gemm_rowmajor(m, k, n, &a.data(), &b.data(), &mut out, false);
        self.finish(Op::Matmul, &[a, b], vec![m, n], out)
    }

    pub fn add(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        self.binary(Op::Div, a, b, |x, y| x / y)
    }

    fn binary(
        &self,
        op: Op<E>,
        a: &Tensor<E>,
        b: &Tensor<E>,
        f: impl Fn(E, E) -> E,
    ) -> Result<Tensor<E>, TensorError> {
        let shape = kernels::broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
            TensorError::ShapeMismatch {
                op: op.name(),
                details: format!("{:?} vs {:?}", a.shape(), b.shape()),
            }
        })?;
        let (ad, bd) = (a.data(), b.data());
        let mut out = vec![E::zero(); numel_of(&shape)];
        kernels::for_each_broadcast2(&shape, a.shape(), b.shape(), |oi, ai, bi| {
            out[oi] = f(ad[ai], bd[bi]);
        });
        drop(ad);
        drop(bd);
        self.finish(op, &[a, b], shape, out)
    }

    /// Multiplication by a compile-time constant (not a learnable tensor).
    pub fn scale(&self, a: &Tensor<E>, factor: f64) -> Result<Tensor<E>, TensorError> {
        let f = E::from_f64(factor);
        let out = a.data().iter().map(|&x| x * f).collect();
        self.finish(Op::Scale { factor: f }, &[a], a.shape().to_vec(), out)
    }

    pub fn exp(&self, a: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        self.unary(Op::Exp, a, |x| x.exp())
    }

    pub fn log(&self, a: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        self.unary(Op::Log, a, |x| x.ln())
    }

    pub fn sqrt(&self, a: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        self.unary(Op::Sqrt, a, |x| x.sqrt())
    }

    pub fn square(&self, a: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        self.unary(Op::Square, a, |x| x * x)
    }

    pub fn sigmoid(&self, a: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        self.unary(Op::Sigmoid, a, kernels::sigmoid)
    }

    pub fn silu(&self, a: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        self.unary(Op::Silu, a, |x| x * kernels::sigmoid(x))
    }

    fn unary(
        &self,
        op: Op<E>,
        a: &Tensor<E>,
        f: impl Fn(E) -> E,
    ) -> Result<Tensor<E>, TensorError> {
        let out = a.data().iter().map(|&x| f(x)).collect();
        self.finish(op, &[a], a.shape().to_vec(), out)
    }

    /// Full reduction (`axis: None`, scalar output) or a single-axis
    /// reduction that keeps the reduced dimension with extent 1.
    pub fn sum(&self, a: &Tensor<E>, axis: Option<usize>) -> Result<Tensor<E>, TensorError> {
        let (shape, out) = kernels::reduce(a.shape(), &a.data(), axis, false)
            .ok_or_else(|| TensorError::ShapeMismatch {
                op: "sum",
                details: format!("axis {axis:?} for shape {:?}", a.shape()),
            })?;
        self.finish(Op::Sum { axis }, &[a], shape, out)
    }

    pub fn mean(&self, a: &Tensor<E>, axis: Option<usize>) -> Result<Tensor<E>, TensorError> {
        let (shape, out) = kernels::reduce(a.shape(), &a.data(), axis, true)
            .ok_or_else(|| TensorError::ShapeMismatch {
                op: "mean",
                details: format!("axis {axis:?} for shape {:?}", a.shape()),
            })?;
        self.finish(Op::Mean { axis }, &[a], shape, out)
    }

    /// Normalizes the last axis to unit RMS: `y = x / sqrt(mean(x²) + ε)`.
    pub fn rms_normalize(&self, a: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        let shape = a.shape().to_vec();
        let last = *shape.last().ok_or_else(|| TensorError::ShapeMismatch {
            op: "rms_normalize",
            details: "rank-0 input".into(),
        })?;
        let ad = a.data();
        let rows = ad.len() / last;
        let eps = E::from_f64(RMS_EPS);
        let mut out = vec![E::zero(); ad.len()];
        let mut inv_rms = vec![E::zero(); rows];
        let n = E::from_f64(last as f64);
        for r in 0..rows {
            let row = &ad[r * last..(r + 1) * last];
            let ms = row.iter().fold(E::zero(), |s, &x| s + x * x) / n;
            let r_inv = E::one() / (ms + eps).sqrt();
            inv_rms[r] = r_inv;
            for (o, &x) in out[r * last..(r + 1) * last].iter_mut().zip(row) {
                *o = x * r_inv;
            }
        }
        drop(ad);
        self.finish(Op::RmsNorm { inv_rms }, &[a], shape, out)
    }

    /// Row-wise softmax over a square (T,T) score matrix with a causal mask:
    /// row i distributes mass over columns j ≤ i; masked entries are exactly 0.
    pub fn causal_softmax(&self, a: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        let sh = a.shape();
        if sh.len() != 2 || sh[0] != sh[1] {
            return Err(TensorError::ShapeMismatch {
                op: "causal_softmax",
                details: format!("want square rank-2, got {sh:?}"),
            });
        }
        let t = sh[0];
        let ad = a.data();
        let mut out = vec![E::zero(); t * t];
        for i in 0..t {
            let row = &ad[i * t..i * t + i + 1];
            let max = row.iter().fold(row[0], |m, &x| if x > m { x } else { m });
            let mut z = E::zero();
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                out[i * t + j] = e;
                z = z + e;
            }
            for j in 0..=i {
                out[i * t + j] = out[i * t + j] / z;
            }
        }
        drop(ad);
        self.finish(Op::CausalSoftmax, &[a], sh.to_vec(), out)
    }

    /// Row gather from an embedding table (V,d); gradients scatter-add back.
    pub fn embed_lookup(
        &self,
        table: &Tensor<E>,
        ids: &[usize],
    ) -> Result<Tensor<E>, TensorError> {
        let sh = table.shape();
        if sh.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "embed_lookup",
                details: format!("table must be rank-2, got {sh:?}"),
            });
        }
        let (v, d) = (sh[0], sh[1]);
        let td = table.data();
        let mut out = vec![E::zero(); ids.len() * d];
        for (r, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(TensorError::TokenOutOfRange { id, vocab: v });
            }
            out[r * d..(r + 1) * d].copy_from_slice(&td[id * d..(id + 1) * d]);
        }
        drop(td);
        self.finish(Op::EmbedLookup { ids: ids.to_vec() }, &[table], vec![ids.len(), d], out)
    }

    pub fn transpose(&self, a: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        let sh = a.shape();
        if sh.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                details: format!("want rank-2, got {sh:?}"),
            });
        }
        let (m, n) = (sh[0], sh[1]);
        let ad = a.data();
        let mut out = vec![E::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ad[i * n + j];
            }
        }
        drop(ad);
        self.finish(Op::Transpose, &[a], vec![n, m], out)
    }

    pub fn reshape(
        &self,
        a: &Tensor<E>,
        new_shape: Vec<usize>,
    ) -> Result<Tensor<E>, TensorError> {
        if numel_of(&new_shape) != a.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                details: format!("{:?} -> {new_shape:?}", a.shape()),
            });
        }
        let out = a.to_vec();
        self.finish(Op::Reshape, &[a], new_shape, out)
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(
        &self,
        a: &Tensor<E>,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Tensor<E>, TensorError> {
        let sh = a.shape();
        if axis >= sh.len() || start + len > sh[axis] {
            return Err(TensorError::ShapeMismatch {
                op: "slice",
                details: format!("axis {axis} range {start}..{} of {sh:?}", start + len),
            });
        }
        let mut shape = sh.to_vec();
        shape[axis] = len;
        let lead: usize = sh[..axis].iter().product();
        let trail: usize = sh[axis + 1..].iter().product();
        let ad = a.data();
        let mut out = vec![E::zero(); lead * len * trail];
        for l in 0..lead {
            let src = l * sh[axis] * trail + start * trail;
            let dst = l * len * trail;
            out[dst..dst + len * trail].copy_from_slice(&ad[src..src + len * trail]);
        }
        drop(ad);
        self.finish(Op::Slice { axis, start }, &[a], shape, out)
    }

    pub fn concat(&self, parts: &[&Tensor<E>], axis: usize) -> Result<Tensor<E>, TensorError> {
        let first = parts.first().ok_or_else(|| TensorError::ShapeMismatch {
            op: "concat",
            details: "no inputs".into(),
        })?;
        let base = first.shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                details: format!("axis {axis} for rank {}", base.len()),
            });
        }
        let mut total = 0;
        for p in parts {
            let sh = p.shape();
            if sh.len() != base.len()
                || sh.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    details: format!("{sh:?} vs {base:?} on axis {axis}"),
                });
            }
            total += sh[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let lead: usize = base[..axis].iter().product();
        let trail: usize = base[axis + 1..].iter().product();
        let mut out = vec![E::zero(); lead * total * trail];
        let mut offset = 0;
        for p in parts {
            let ext = p.shape()[axis];
            let pd = p.data();
            for l in 0..lead {
                let src = l * ext * trail;
                let dst = l * total * trail + offset * trail;
                out[dst..dst + ext * trail].copy_from_slice(&pd[src..src + ext * trail]);
            }
            offset += ext;
        }
        self.finish(Op::Concat { axis }, parts, shape, out)
    }

    /// Pairwise quarter-turn along the last axis: `(x_{2i}, x_{2i+1}) ->
    /// (-x_{2i+1}, x_{2i})`. Combined with cos/sin tables this implements the
    /// per-pair rotations of rotary position embeddings.
    pub fn rotate_half(&self, a: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        let last = *a.shape().last().unwrap_or(&0);
        if last == 0 || !last.is_multiple_of(2) {
            return Err(TensorError::ShapeMismatch {
                op: "rotate_half",
                details: format!("last dim must be even, got {:?}", a.shape()),
            });
        }
        let ad = a.data();
        let mut out = vec![E::zero(); ad.len()];
        for p in 0..ad.len() / 2 {
            out[2 * p] = -ad[2 * p + 1];
            out[2 * p + 1] = ad[2 * p];
        }
        drop(ad);
        self.finish(Op::RotateHalf, &[a], a.shape().to_vec(), out)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar `loss`. Gradients are added into the
    /// `grad` buffer of every `requires_grad` tensor reachable on the tape;
    /// the graph is consumed and cannot record or replay afterwards.
    pub fn backward(&self, loss: &Tensor<E>) -> Result<(), TensorError> {
        if self.consumed.get() {
            return Err(TensorError::GraphConsumed);
        }
        if loss.numel() != 1 {
            return Err(TensorError::LossNotScalar(loss.shape().to_vec()));
        }
        self.consumed.set(true);
        loss.seed_unit_grad();
        let nodes = self.nodes.borrow();
        for node in nodes.iter().rev() {
            let og_guard = node.output.grad_ref();
            let Some(og) = og_guard.as_ref() else { continue };
            let contribs = self.input_grads(node, og)?;
            drop(og_guard);
            for (input, contrib) in node.inputs.iter().zip(&contribs) {
                if let Some(c) = contrib {
                    if input.requires_grad() {
                        input.accumulate_grad(c);
                    }
                }
            }
        }
        Ok(())
    }

    /// Per-input gradient contributions for one node. `None` skips an input
    /// that does not require grad (cheaper than materializing zeros).
    fn input_grads(
        &self,
        node: &Node<E>,
        og: &[E],
    ) -> Result<Vec<Option<Vec<E>>>, TensorError> {
        let want: Vec<bool> = node.inputs.iter().map(|t| t.requires_grad()).collect();
        let out = &node.output;
        let mut res: Vec<Option<Vec<E>>> = vec![None; node.inputs.len()];
        match &node.op {
            Op::Matmul => {
                let a = &node.inputs[0];
                let b = &node.inputs[1];
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if want[0] {
                    // dA = dC · Bᵀ
                    let mut da = vec![E::zero(); m * k];
                    kernels::gemm_strided(
                        m, n, k,
                        og, n as isize, 1,
                        &b.data(), 1, n as isize,
                        &mut da, k as isize, 1,
                    );
                    res[0] = Some(da);
                }
                if want[1] {
                    // dB = Aᵀ · dC
                    let mut db = vec![E::zero(); k * n];
                    kernels::gemm_strided(
                        k, m, n,
                        &a.data(), 1, k as isize,
                        og, n as isize, 1,
                        &mut db, n as isize, 1,
                    );
                    res[1] = Some(db);
                }
            }
            Op::Add | Op::Sub => {
                let sign = if matches!(node.op, Op::Sub) { -E::one() } else { E::one() };
                for (slot, input) in node.inputs.iter().enumerate() {
                    if !want[slot] {
                        continue;
                    }
                    let mut g = vec![E::zero(); input.numel()];
                    let s = if slot == 0 { E::one() } else { sign };
                    kernels::for_each_broadcast2(
                        out.shape(),
                        node.inputs[0].shape(),
                        node.inputs[1].shape(),
                        |oi, ai, bi| {
                            let idx = if slot == 0 { ai } else { bi };
                            g[idx] = g[idx] + s * og[oi];
                        },
                    );
                    res[slot] = Some(g);
                }
            }
            Op::Mul => {
                let (ad, bd) = (node.inputs[0].data(), node.inputs[1].data());
                let mut ga = want[0].then(|| vec![E::zero(); ad.len()]);
                let mut gb = want[1].then(|| vec![E::zero(); bd.len()]);
                kernels::for_each_broadcast2(
                    out.shape(),
                    node.inputs[0].shape(),
                    node.inputs[1].shape(),
                    |oi, ai, bi| {
                        if let Some(g) = ga.as_mut() {
                            g[ai] = g[ai] + og[oi] * bd[bi];
                        }
                        if let Some(g) = gb.as_mut() {
                            g[bi] = g[bi] + og[oi] * ad[ai];
                        }
                    },
                );
                res[0] = ga;
                res[1] = gb;
            }
            Op::Div => {
                let (ad, bd) = (node.inputs[0].data(), node.inputs[1].data());
                let mut ga = want[0].then(|| vec![E::zero(); ad.len()]);
                let mut gb = want[1].then(|| vec![E::zero(); bd.len()]);
                kernels::for_each_broadcast2(
                    out.shape(),
                    node.inputs[0].shape(),
                    node.inputs[1].shape(),
                    |oi, ai, bi| {
                        if let Some(g) = ga.as_mut() {
                            g[ai] = g[ai] + og[oi] / bd[bi];
                        }
                        if let Some(g) = gb.as_mut() {
                            g[bi] = g[bi] - og[oi] * ad[ai] / (bd[bi] * bd[bi]);
                        }
                    },
                );
                res[0] = ga;
                res[1] = gb;
            }
            Op::Scale { factor } => {
                if want[0] {
                    res[0] = Some(og.iter().map(|&g| g * *factor).collect());
                }
            }
            Op::Exp => {
                if want[0] {
                    let od = out.data();
                    res[0] = Some(og.iter().zip(od.iter()).map(|(&g, &y)| g * y).collect());
                }
            }
            Op::Log => {
                if want[0] {
                    let ad = node.inputs[0].data();
                    res[0] = Some(og.iter().zip(ad.iter()).map(|(&g, &x)| g / x).collect());
                }
            }
            Op::Sqrt => {
                if want[0] {
                    let od = out.data();
                    let two = E::from_f64(2.0);
                    res[0] =
                        Some(og.iter().zip(od.iter()).map(|(&g, &y)| g / (two * y)).collect());
                }
            }
            Op::Square => {
                if want[0] {
                    let ad = node.inputs[0].data();
                    let two = E::from_f64(2.0);
                    res[0] =
                        Some(og.iter().zip(ad.iter()).map(|(&g, &x)| two * x * g).collect());
                }
            }
            Op::Sigmoid => {
                if want[0] {
                    let od = out.data();
                    res[0] = Some(
                        og.iter()
                            .zip(od.iter())
                            .map(|(&g, &y)| g * y * (E::one() - y))
                            .collect(),
                    );
                }
            }
            Op::Silu => {
                if want[0] {
                    let ad = node.inputs[0].data();
                    res[0] = Some(
                        og.iter()
                            .zip(ad.iter())
                            .map(|(&g, &x)| {
                                let s = kernels::sigmoid(x);
                                g * (s + x * s * (E::one() - s))
                            })
                            .collect(),
                    );
                }
            }
            Op::Sum { axis } => {
                if want[0] {
                    res[0] = Some(kernels::spread_reduction(
                        node.inputs[0].shape(),
                        og,
                        *axis,
                        E::one(),
                    ));
                }
            }
            Op::Mean { axis } => {
                if want[0] {
                    let in_shape = node.inputs[0].shape();
                    let len = match axis {
                        None => numel_of(in_shape),
                        Some(ax) => in_shape[*ax],
                    };
                    let f = E::one() / E::from_f64(len as f64);
                    res[0] = Some(kernels::spread_reduction(in_shape, og, *axis, f));
                }
            }
            Op::RmsNorm { inv_rms } => {
                if want[0] {
                    let ad = node.inputs[0].data();
                    let last = *node.inputs[0].shape().last().unwrap();
                    let n = E::from_f64(last as f64);
                    let mut g = vec![E::zero(); ad.len()];
                    for (r, &ri) in inv_rms.iter().enumerate() {
                        let xs = &ad[r * last..(r + 1) * last];
                        let gs = &og[r * last..(r + 1) * last];
                        let dot = xs.iter().zip(gs).fold(E::zero(), |s, (&x, &gy)| s + x * gy);
                        let coef = ri * ri * ri / n * dot;
                        for j in 0..last {
                            g[r * last + j] = ri * gs[j] - coef * xs[j];
                        }
                    }
                    res[0] = Some(g);
                }
            }
            Op::CausalSoftmax => {
                if want[0] {
                    let pd = out.data();
                    let t = out.shape()[0];
                    let mut g = vec![E::zero(); t * t];
                    for i in 0..t {
                        let p = &pd[i * t..i * t + i + 1];
                        let gy = &og[i * t..i * t + i + 1];
                        let dot = p.iter().zip(gy).fold(E::zero(), |s, (&pj, &gj)| s + pj * gj);
                        for j in 0..=i {
                            g[i * t + j] = p[j] * (gy[j] - dot);
                        }
                    }
                    res[0] = Some(g);
                }
            }
            Op::EmbedLookup { ids } => {
                if want[0] {
                    let (v, d) = (node.inputs[0].shape()[0], node.inputs[0].shape()[1]);
                    let mut g = vec![E::zero(); v * d];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            g[id * d + j] = g[id * d + j] + og[r * d + j];
                        }
                    }
                    res[0] = Some(g);
                }
            }
            Op::Transpose => {
                if want[0] {
                    let (n, m) = (out.shape()[0], out.shape()[1]);
                    let mut g = vec![E::zero(); m * n];
                    for i in 0..n {
                        for j in 0..m {
                            g[j * n + i] = og[i * m + j];
                        }
                    }
                    res[0] = Some(g);
                }
            }
            Op::Reshape => {
                if want[0] {
                    res[0] = Some(og.to_vec());
                }
            }
            Op::Slice { axis, start } => {
                if want[0] {
                    let in_shape = node.inputs[0].shape();
                    let len = out.shape()[*axis];
                    let lead: usize = in_shape[..*axis].iter().product();
                    let trail: usize = in_shape[*axis + 1..].iter().product();
                    let mut g = vec![E::zero(); node.inputs[0].numel()];
                    for l in 0..lead {
                        let dst = l * in_shape[*axis] * trail + start * trail;
                        let src = l * len * trail;
                        g[dst..dst + len * trail].copy_from_slice(&og[src..src + len * trail]);
                    }
                    res[0] = Some(g);
                }
            }
            Op::Concat { axis } => {
                let total = out.shape()[*axis];
                let lead: usize = out.shape()[..*axis].iter().product();
                let trail: usize = out.shape()[*axis + 1..].iter().product();
                let mut offset = 0;
                for (slot, input) in node.inputs.iter().enumerate() {
                    let ext = input.shape()[*axis];
                    if want[slot] {
                        let mut g = vec![E::zero(); input.numel()];
                        for l in 0..lead {
                            let src = l * total * trail + offset * trail;
                            let dst = l * ext * trail;
                            g[dst..dst + ext * trail]
                                .copy_from_slice(&og[src..src + ext * trail]);
                        }
                        res[slot] = Some(g);
                    }
                    offset += ext;
                }
            }
            Op::RotateHalf => {
                if want[0] {
                    let mut g = vec![E::zero(); og.len()];
                    for p in 0..og.len() / 2 {
                        g[2 * p] = og[2 * p + 1];
                        g[2 * p + 1] = -og[2 * p];
                    }
                    res[0] = Some(g);
                }
            }
        }
        if self.validate_finite.get() {
            for c in res.iter().flatten() {
                if c.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite { op: node.op.name() });
                }
            }
        }
        Ok(res)
    }
}
