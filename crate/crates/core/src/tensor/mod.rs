//! Minimal dense-tensor arithmetic with reverse-mode differentiation.
//!
//! Tensors are row-major buffers of at most two dimensions, which is all the
//! toy encoders and losses need. A [`Tape`] records every operation eagerly
//! (values are computed at construction time); [`Tape::backward`] walks the
//! record in exact reverse order and accumulates gradients additively across
//! fan-out, returning one gradient per `requires_grad` leaf.
//!
//! Broadcasting is deliberately narrow: a binary op accepts equal shapes, a
//! `[1]`/`[1,1]` scalar on the right, a `[1,c]` row broadcast over rows, or
//! an `[r,1]` column broadcast over columns. Everything else is a shape
//! error.
//!
//! A tape is single-threaded; distinct tapes may live on distinct threads.

pub mod check;

use std::cell::RefCell;
use std::rc::Rc;

use thiserror::Error;

use crate::{lit, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid tensor construction: shape {shape:?} with {len} elements")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalarLoss { shape: Vec<usize> },
    #[error("backward already ran on this tape; call reset() first")]
    BackwardConsumed,
    #[error("tensors belong to different tapes")]
    TapeMismatch,
    #[error("row index {index} out of range for {rows} rows")]
    RowOutOfRange { index: usize, rows: usize },
    #[error("token id {id} exceeds vocabulary size {vocab}")]
    OutOfVocab { id: usize, vocab: usize },
    #[error("concat needs at least one input")]
    EmptyConcat,
    #[error("slice [{start}, {start}+{len}) out of bounds for extent {extent}")]
    SliceOutOfRange {
        start: usize,
        len: usize,
        extent: usize,
    },
}

pub type TensorResult<T> = Result<T, TensorError>;

/// A plain value buffer: contiguous row-major data plus its shape.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> RawTensor<S> {
    /// Up to three dimensions; 3-D buffers (images) are value-only and may
    /// not enter a tape.
    pub fn new(shape: &[usize], data: Vec<S>) -> TensorResult<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.len() > 3 || numel != data.len() {
            return Err(TensorError::BadShape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::new(shape, vec![S::zero(); numel]).expect("consistent shape")
    }

    pub fn scalar(v: S) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// (rows, cols) view: 1-D tensors count as a single row. Panics on 3-D
    /// buffers, which are value-only.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("3-D tensors cannot be used in tape operations"),
        }
    }

    pub fn item(&self) -> S {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn row(&self, r: usize) -> &[S] {
        let (_, cols) = self.dims2();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Cast between scalar types (used by the f32 checkpoint container).
    pub fn cast<T: Scalar>(&self) -> RawTensor<T> {
        RawTensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| T::from_f64(v.to_f64().expect("finite")).expect("representable"))
                .collect(),
        }
    }
}

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Cosh(usize),
    Sinh(usize),
    Acosh(usize),
    Asin(usize),
    Acos(usize),
    Gelu(usize),
    Sinhc(usize),
    AddConst(usize, S),
    MulConst(usize, S),
    Clamp {
        x: usize,
        lo: Option<S>,
        hi: Option<S>,
    },
    Matmul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Transpose(usize),
    Sum(usize),
    Mean(usize),
    MaxAll(usize),
    SumRows(usize),
    RowNorm {
        x: usize,
        eps: S,
    },
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    GatherRows {
        x: usize,
        idx: Vec<usize>,
    },
    SliceRows {
        x: usize,
        start: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        eps: S,
    },
    EmbeddingLookup {
        table: usize,
        ids: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<S: Scalar> {
    value: RawTensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

struct TapeInner<S: Scalar> {
    nodes: Vec<Node<S>>,
    params: Vec<(usize, usize)>, // (param slot, node index)
    consumed: bool,
}

/// Records operations for one forward/backward cycle.
#[derive(Clone)]
pub struct Tape<S: Scalar> {
    inner: Rc<RefCell<TapeInner<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// A handle to one recorded value on a tape. Cloning is cheap.
#[derive(Clone)]
pub struct Tensor<S: Scalar> {
    tape: Tape<S>,
    idx: usize,
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("idx", &self.idx)
            .field("value", &self.value())
            .finish()
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<RawTensor<S>>>,
    params: Vec<(usize, usize)>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to a tensor, if that tensor required one.
    pub fn wrt(&self, t: &Tensor<S>) -> Option<&RawTensor<S>> {
        self.grads.get(t.idx).and_then(|g| g.as_ref())
    }

    /// Gradient for a registered parameter slot.
    pub fn param(&self, slot: usize) -> Option<&RawTensor<S>> {
        self.params
            .iter()
            .find(|(s, _)| *s == slot)
            .and_then(|(_, node)| self.grads[*node].as_ref())
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                params: Vec::new(),
                consumed: false,
            })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Allow a further backward pass after one has run.
    pub fn reset(&self) {
        self.inner.borrow_mut().consumed = false;
    }

    pub fn leaf(&self, value: RawTensor<S>, requires_grad: bool) -> Tensor<S> {
        assert!(
            value.shape().len() <= 2,
            "tape tensors are at most 2-D, got {:?}",
            value.shape()
        );
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: RawTensor<S>) -> Tensor<S> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, v: S) -> Tensor<S> {
        self.constant(RawTensor::scalar(v))
    }

    /// Leaf tied to an external parameter slot so its gradient can be
    /// retrieved by slot id after backward.
    pub fn param_leaf(&self, value: RawTensor<S>, slot: usize, trainable: bool) -> Tensor<S> {
        let t = self.leaf(value, trainable);
        self.inner.borrow_mut().params.push((slot, t.idx));
        t
    }

    fn push(&self, value: RawTensor<S>, op: Op<S>, needs_grad: bool) -> Tensor<S> {
        debug_assert!(
            value.is_finite(),
            "non-finite value produced by {:?}",
            op_name(&op)
        );
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Tensor {
            tape: self.clone(),
            idx: inner.nodes.len() - 1,
        }
    }

    fn same_tape(&self, other: &Tape<S>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Reverse pass from a scalar loss. Errors if the loss is non-scalar or
    /// if this tape already ran a backward without [`Tape::reset`].
    pub fn backward(&self, loss: &Tensor<S>) -> TensorResult<Gradients<S>> {
        if !self.same_tape(&loss.tape) {
            return Err(TensorError::TapeMismatch);
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(TensorError::BackwardConsumed);
        }
        if inner.nodes[loss.idx].value.numel() != 1 {
            return Err(TensorError::NotScalarLoss {
                shape: inner.nodes[loss.idx].value.shape().to_vec(),
            });
        }
        inner.consumed = true;

        let mut grads: Vec<Option<RawTensor<S>>> = vec![None; inner.nodes.len()];
        grads[loss.idx] = Some(RawTensor::new(
            inner.nodes[loss.idx].value.shape(),
            vec![S::one()],
        )?);

        for i in (0..=loss.idx).rev() {
            if !inner.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_one(&inner.nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }

        Ok(Gradients {
            grads,
            params: inner.params.clone(),
        })
    }
}

fn op_name<S: Scalar>(op: &Op<S>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Neg(_) => "neg",
        Op::Exp(_) => "exp",
        Op::Log(_) => "log",
        Op::Sqrt(_) => "sqrt",
        Op::Cosh(_) => "cosh",
        Op::Sinh(_) => "sinh",
        Op::Acosh(_) => "acosh",
        Op::Asin(_) => "asin",
        Op::Acos(_) => "acos",
        Op::Gelu(_) => "gelu",
        Op::Sinhc(_) => "sinhc",
        Op::AddConst(..) => "add_const",
        Op::MulConst(..) => "mul_const",
        Op::Clamp { .. } => "clamp",
        Op::Matmul { .. } => "matmul",
        Op::Transpose(_) => "transpose",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::MaxAll(_) => "max",
        Op::SumRows(_) => "sum_rows",
        Op::RowNorm { .. } => "row_norm",
        Op::SoftmaxRows(_) => "softmax_rows",
        Op::LogSoftmaxRows(_) => "log_softmax_rows",
        Op::GatherRows { .. } => "gather_rows",
        Op::SliceRows { .. } => "slice_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::Concat { .. } => "concat",
        Op::LayerNorm { .. } => "layer_norm",
        Op::EmbeddingLookup { .. } => "embedding_lookup",
    }
}

// ---------------------------------------------------------------------------
// Broadcasting
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Debug)]
enum Broadcast {
    None,
    Scalar,
    Row, // rhs is [1, c], repeated across rows
    Col, // rhs is [r, 1], repeated across columns
}

fn broadcast_kind(lhs: (usize, usize), rhs: (usize, usize)) -> Option<Broadcast> {
    if lhs == rhs {
        Some(Broadcast::None)
    } else if rhs == (1, 1) {
        Some(Broadcast::Scalar)
    } else if rhs.0 == 1 && rhs.1 == lhs.1 {
        Some(Broadcast::Row)
    } else if rhs.1 == 1 && rhs.0 == lhs.0 {
        Some(Broadcast::Col)
    } else {
        None
    }
}

#[inline]
fn rhs_index(bc: Broadcast, r: usize, c: usize, cols: usize) -> usize {
    match bc {
        Broadcast::None => r * cols + c,
        Broadcast::Scalar => 0,
        Broadcast::Row => c,
        Broadcast::Col => r,
    }
}

// ---------------------------------------------------------------------------
// GEMM helpers
// ---------------------------------------------------------------------------

/// C[m,n] = A[m,k] * B[k,n]
fn gemm_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (l, av) in arow.iter().enumerate() {
            let av = *av;
            let brow = &b[l * n..(l + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * *bv;
            }
        }
    }
    c
}

/// C[m,n] = A[m,k] * B[n,k]^T
fn gemm_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c.push(arow.iter().zip(brow).map(|(x, y)| *x * *y).sum());
        }
    }
    c
}

/// C[k,n] = A[m,k]^T * B[m,n]
fn gemm_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (l, av) in arow.iter().enumerate() {
            let av = *av;
            let crow = &mut c[l * n..(l + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * *bv;
            }
        }
    }
    c
}

// ---------------------------------------------------------------------------
// Forward ops
// ---------------------------------------------------------------------------

impl<S: Scalar> Tensor<S> {
    /// The tape this tensor is recorded on.
    pub fn tape(&self) -> Tape<S> {
        self.tape.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.idx]
            .value
            .shape()
            .to_vec()
    }

    pub fn dims2(&self) -> (usize, usize) {
        self.tape.inner.borrow().nodes[self.idx].value.dims2()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().nodes[self.idx].value.numel()
    }

    /// Copy of the current value.
    pub fn value(&self) -> RawTensor<S> {
        self.tape.inner.borrow().nodes[self.idx].value.clone()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> S {
        self.tape.inner.borrow().nodes[self.idx].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.idx].needs_grad
    }

    fn with<R>(&self, f: impl FnOnce(&RawTensor<S>) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.idx].value)
    }

    fn unary(&self, op: Op<S>, f: impl Fn(S) -> S) -> Tensor<S> {
        let (shape, data) = self.with(|v| (v.shape().to_vec(), v.data().iter().map(|x| f(*x)).collect()));
        let needs = self.requires_grad();
        self.tape
            .push(RawTensor::new(&shape, data).expect("shape preserved"), op, needs)
    }

    fn binary(
        &self,
        rhs: &Tensor<S>,
        name: &'static str,
        op: Op<S>,
        f: impl Fn(S, S) -> S,
    ) -> TensorResult<Tensor<S>> {
        if !self.tape.same_tape(&rhs.tape) {
            return Err(TensorError::TapeMismatch);
        }
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.idx].value;
        let b = &inner.nodes[rhs.idx].value;
        let (rows, cols) = a.dims2();
        let Some(bc) = broadcast_kind((rows, cols), b.dims2()) else {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        };
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(a.data()[r * cols + c], b.data()[rhs_index(bc, r, c, cols)]));
            }
        }
        let shape = a.shape().to_vec();
        let needs = inner.nodes[self.idx].needs_grad || inner.nodes[rhs.idx].needs_grad;
        drop(inner);
        Ok(self
            .tape
            .push(RawTensor::new(&shape, data).expect("lhs shape"), op, needs))
    }

    pub fn add(&self, rhs: &Tensor<S>) -> TensorResult<Tensor<S>> {
        self.binary(rhs, "add", Op::Add(self.idx, rhs.idx), |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor<S>) -> TensorResult<Tensor<S>> {
        self.binary(rhs, "sub", Op::Sub(self.idx, rhs.idx), |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor<S>) -> TensorResult<Tensor<S>> {
        self.binary(rhs, "mul", Op::Mul(self.idx, rhs.idx), |a, b| a * b)
    }

    pub fn div(&self, rhs: &Tensor<S>) -> TensorResult<Tensor<S>> {
        self.binary(rhs, "div", Op::Div(self.idx, rhs.idx), |a, b| a / b)
    }

    pub fn neg(&self) -> Tensor<S> {
        self.unary(Op::Neg(self.idx), |x| -x)
    }

    pub fn exp(&self) -> Tensor<S> {
        self.unary(Op::Exp(self.idx), |x| x.exp())
    }

    pub fn log(&self) -> Tensor<S> {
        self.unary(Op::Log(self.idx), |x| x.ln())
    }

    pub fn sqrt(&self) -> Tensor<S> {
        self.unary(Op::Sqrt(self.idx), |x| x.sqrt())
    }

    pub fn cosh(&self) -> Tensor<S> {
        self.unary(Op::Cosh(self.idx), |x| x.cosh())
    }

    pub fn sinh(&self) -> Tensor<S> {
        self.unary(Op::Sinh(self.idx), |x| x.sinh())
    }

    pub fn acosh(&self) -> Tensor<S> {
        self.unary(Op::Acosh(self.idx), |x| x.acosh())
    }

    pub fn asin(&self) -> Tensor<S> {
        self.unary(Op::Asin(self.idx), |x| x.asin())
    }

    pub fn acos(&self) -> Tensor<S> {
        self.unary(Op::Acos(self.idx), |x| x.acos())
    }

    pub fn gelu(&self) -> Tensor<S> {
        self.unary(Op::Gelu(self.idx), gelu_fwd)
    }

    /// `sinh(x)/x` extended through zero; the radial factor of the
    /// exponential map.
    pub fn sinhc(&self) -> Tensor<S> {
        self.unary(Op::Sinhc(self.idx), crate::lorentz::sinhc)
    }

    pub fn add_const(&self, c: S) -> Tensor<S> {
        self.unary(Op::AddConst(self.idx, c), |x| x + c)
    }

    pub fn mul_const(&self, c: S) -> Tensor<S> {
        self.unary(Op::MulConst(self.idx, c), |x| x * c)
    }

    /// Hard clamp: values outside the interval are cut off and their
    /// gradient is zero; inside, the gradient passes through unchanged.
    pub fn clamp(&self, lo: Option<S>, hi: Option<S>) -> Tensor<S> {
        self.unary(Op::Clamp { x: self.idx, lo, hi }, |x| {
            let mut v = x;
            if let Some(l) = lo {
                v = v.max(l);
            }
            if let Some(h) = hi {
                v = v.min(h);
            }
            v
        })
    }

    pub fn relu(&self) -> Tensor<S> {
        self.clamp(Some(S::zero()), None)
    }

    fn matmul_impl(&self, rhs: &Tensor<S>, trans_b: bool) -> TensorResult<Tensor<S>> {
        if !self.tape.same_tape(&rhs.tape) {
            return Err(TensorError::TapeMismatch);
        }
        let inner = self.tape.inner.borrow();
        let a = &inner.nodes[self.idx].value;
        let b = &inner.nodes[rhs.idx].value;
        let (m, k) = a.dims2();
        let (br, bc) = b.dims2();
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(TensorError::ShapeMismatch {
                op: if trans_b { "matmul_t" } else { "matmul" },
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = if trans_b {
            gemm_nt(a.data(), b.data(), m, k, n)
        } else {
            gemm_nn(a.data(), b.data(), m, k, n)
        };
        let needs = inner.nodes[self.idx].needs_grad || inner.nodes[rhs.idx].needs_grad;
        drop(inner);
        Ok(self.tape.push(
            RawTensor::new(&[m, n], data).expect("gemm shape"),
            Op::Matmul {
                a: self.idx,
                b: rhs.idx,
                trans_b,
            },
            needs,
        ))
    }

    /// `self [m,k] @ rhs [k,n]`.
    pub fn matmul(&self, rhs: &Tensor<S>) -> TensorResult<Tensor<S>> {
        self.matmul_impl(rhs, false)
    }

    /// `self [m,k] @ rhs[n,k]^T`.
    pub fn matmul_t(&self, rhs: &Tensor<S>) -> TensorResult<Tensor<S>> {
        self.matmul_impl(rhs, true)
    }

    pub fn transpose(&self) -> Tensor<S> {
        let (rows, cols, data) = self.with(|v| {
            let (r, c) = v.dims2();
            let mut out = vec![S::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = v.data()[i * c + j];
                }
            }
            (r, c, out)
        });
        let needs = self.requires_grad();
        self.tape.push(
            RawTensor::new(&[cols, rows], data).expect("transposed shape"),
            Op::Transpose(self.idx),
            needs,
        )
    }

    pub fn sum(&self) -> Tensor<S> {
        let total = self.with(|v| v.data().iter().copied().sum());
        let needs = self.requires_grad();
        self.tape
            .push(RawTensor::scalar(total), Op::Sum(self.idx), needs)
    }

    pub fn mean(&self) -> Tensor<S> {
        let m = self.with(|v| v.data().iter().copied().sum::<S>() / lit(v.numel() as f64));
        let needs = self.requires_grad();
        self.tape
            .push(RawTensor::scalar(m), Op::Mean(self.idx), needs)
    }

    /// Maximum over all elements; the gradient routes to the first argmax.
    pub fn max_all(&self) -> Tensor<S> {
        let m = self.with(|v| {
            v.data()
                .iter()
                .copied()
                .fold(S::neg_infinity(), |a, b| a.max(b))
        });
        let needs = self.requires_grad();
        self.tape
            .push(RawTensor::scalar(m), Op::MaxAll(self.idx), needs)
    }

    /// Row-wise sum: `[r,c] -> [r,1]`.
    pub fn sum_rows(&self) -> Tensor<S> {
        let (rows, data) = self.with(|v| {
            let (r, c) = v.dims2();
            (
                r,
                (0..r)
                    .map(|i| v.data()[i * c..(i + 1) * c].iter().copied().sum())
                    .collect::<Vec<S>>(),
            )
        });
        let needs = self.requires_grad();
        self.tape.push(
            RawTensor::new(&[rows, 1], data).expect("row sums"),
            Op::SumRows(self.idx),
            needs,
        )
    }

    /// Row-wise Euclidean norm `[r,c] -> [r,1]`; the backward divides by
    /// `max(norm, eps)` so the zero row stays finite.
    pub fn row_norm(&self, eps: S) -> Tensor<S> {
        let (rows, data) = self.with(|v| {
            let (r, c) = v.dims2();
            (
                r,
                (0..r)
                    .map(|i| {
                        v.data()[i * c..(i + 1) * c]
                            .iter()
                            .map(|x| *x * *x)
                            .sum::<S>()
                            .sqrt()
                    })
                    .collect::<Vec<S>>(),
            )
        });
        let needs = self.requires_grad();
        self.tape.push(
            RawTensor::new(&[rows, 1], data).expect("row norms"),
            Op::RowNorm { x: self.idx, eps },
            needs,
        )
    }

    pub fn softmax_rows(&self) -> Tensor<S> {
        let (shape, data) = self.with(|v| {
            let (r, c) = v.dims2();
            let mut out = Vec::with_capacity(r * c);
            for i in 0..r {
                let row = &v.data()[i * c..(i + 1) * c];
                let mx = row.iter().copied().fold(S::neg_infinity(), |a, b| a.max(b));
                let exps: Vec<S> = row.iter().map(|x| (*x - mx).exp()).collect();
                let denom: S = exps.iter().copied().sum();
                out.extend(exps.iter().map(|e| *e / denom));
            }
            (v.shape().to_vec(), out)
        });
        let needs = self.requires_grad();
        self.tape.push(
            RawTensor::new(&shape, data).expect("softmax shape"),
            Op::SoftmaxRows(self.idx),
            needs,
        )
    }

    pub fn log_softmax_rows(&self) -> Tensor<S> {
        let (shape, data) = self.with(|v| {
            let (r, c) = v.dims2();
            let mut out = Vec::with_capacity(r * c);
            for i in 0..r {
                let row = &v.data()[i * c..(i + 1) * c];
                let mx = row.iter().copied().fold(S::neg_infinity(), |a, b| a.max(b));
                let lse = row.iter().map(|x| (*x - mx).exp()).sum::<S>().ln() + mx;
                out.extend(row.iter().map(|x| *x - lse));
            }
            (v.shape().to_vec(), out)
        });
        let needs = self.requires_grad();
        self.tape.push(
            RawTensor::new(&shape, data).expect("log softmax shape"),
            Op::LogSoftmaxRows(self.idx),
            needs,
        )
    }

    /// Select rows by index (duplicates allowed); gradient scatter-adds.
    pub fn gather_rows(&self, idx: &[usize]) -> TensorResult<Tensor<S>> {
        let inner = self.tape.inner.borrow();
        let v = &inner.nodes[self.idx].value;
        let (rows, cols) = v.dims2();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::RowOutOfRange { index: bad, rows });
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(&v.data()[i * cols..(i + 1) * cols]);
        }
        let needs = inner.nodes[self.idx].needs_grad;
        drop(inner);
        Ok(self.tape.push(
            RawTensor::new(&[idx.len(), cols], data).expect("gathered shape"),
            Op::GatherRows {
                x: self.idx,
                idx: idx.to_vec(),
            },
            needs,
        ))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> TensorResult<Tensor<S>> {
        let inner = self.tape.inner.borrow();
        let v = &inner.nodes[self.idx].value;
        let (rows, cols) = v.dims2();
        if start + len > rows {
            return Err(TensorError::SliceOutOfRange {
                start,
                len,
                extent: rows,
            });
        }
        let data = v.data()[start * cols..(start + len) * cols].to_vec();
        let needs = inner.nodes[self.idx].needs_grad;
        drop(inner);
        Ok(self.tape.push(
            RawTensor::new(&[len, cols], data).expect("row slice"),
            Op::SliceRows {
                x: self.idx,
                start,
            },
            needs,
        ))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> TensorResult<Tensor<S>> {
        let inner = self.tape.inner.borrow();
        let v = &inner.nodes[self.idx].value;
        let (rows, cols) = v.dims2();
        if start + len > cols {
            return Err(TensorError::SliceOutOfRange {
                start,
                len,
                extent: cols,
            });
        }
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&v.data()[i * cols + start..i * cols + start + len]);
        }
        let needs = inner.nodes[self.idx].needs_grad;
        drop(inner);
        Ok(self.tape.push(
            RawTensor::new(&[rows, len], data).expect("col slice"),
            Op::SliceCols {
                x: self.idx,
                start,
            },
            needs,
        ))
    }
}

/// Concatenate along `axis` (0 = stack rows, 1 = widen columns).
pub fn concat<S: Scalar>(parts: &[Tensor<S>], axis: usize) -> TensorResult<Tensor<S>> {
    let Some(first) = parts.first() else {
        return Err(TensorError::EmptyConcat);
    };
    let tape = first.tape.clone();
    if !parts.iter().all(|p| tape.same_tape(&p.tape)) {
        return Err(TensorError::TapeMismatch);
    }
    let inner = tape.inner.borrow();
    let dims: Vec<(usize, usize)> = parts
        .iter()
        .map(|p| inner.nodes[p.idx].value.dims2())
        .collect();
    let (r0, c0) = dims[0];
    let (out_rows, out_cols) = match axis {
        0 => {
            if dims.iter().any(|(_, c)| *c != c0) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![r0, c0],
                    rhs: dims.iter().find(|(_, c)| *c != c0).map(|d| vec![d.0, d.1]).unwrap(),
                });
            }
            (dims.iter().map(|(r, _)| r).sum(), c0)
        }
        _ => {
            if dims.iter().any(|(r, _)| *r != r0) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![r0, c0],
                    rhs: dims.iter().find(|(r, _)| *r != r0).map(|d| vec![d.0, d.1]).unwrap(),
                });
            }
            (r0, dims.iter().map(|(_, c)| c).sum())
        }
    };
    let mut data = Vec::with_capacity(out_rows * out_cols);
    if axis == 0 {
        for p in parts {
            data.extend_from_slice(inner.nodes[p.idx].value.data());
        }
    } else {
        for r in 0..out_rows {
            for (p, (_, c)) in parts.iter().zip(&dims) {
                let v = inner.nodes[p.idx].value.data();
                data.extend_from_slice(&v[r * c..(r + 1) * c]);
            }
        }
    }
    let needs = parts.iter().any(|p| inner.nodes[p.idx].needs_grad);
    drop(inner);
    Ok(tape.push(
        RawTensor::new(&[out_rows, out_cols], data).expect("concat shape"),
        Op::Concat {
            parts: parts.iter().map(|p| p.idx).collect(),
            axis: if axis == 0 { 0 } else { 1 },
        },
        needs,
    ))
}

/// Row-wise layer normalization with learnable gain and bias (`[1, c]`).
pub fn layer_norm<S: Scalar>(
    x: &Tensor<S>,
    gain: &Tensor<S>,
    bias: &Tensor<S>,
    eps: S,
) -> TensorResult<Tensor<S>> {
    let tape = x.tape.clone();
    if !tape.same_tape(&gain.tape) || !tape.same_tape(&bias.tape) {
        return Err(TensorError::TapeMismatch);
    }
    let inner = tape.inner.borrow();
    let xv = &inner.nodes[x.idx].value;
    let gv = &inner.nodes[gain.idx].value;
    let bv = &inner.nodes[bias.idx].value;
    let (rows, cols) = xv.dims2();
    if gv.numel() != cols || bv.numel() != cols {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            lhs: xv.shape().to_vec(),
            rhs: gv.shape().to_vec(),
        });
    }
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let row = &xv.data()[i * cols..(i + 1) * cols];
        let mean = row.iter().copied().sum::<S>() / lit(cols as f64);
        let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<S>() / lit(cols as f64);
        let inv = S::one() / (var + eps).sqrt();
        for j in 0..cols {
            data.push((row[j] - mean) * inv * gv.data()[j] + bv.data()[j]);
        }
    }
    let needs = inner.nodes[x.idx].needs_grad
        || inner.nodes[gain.idx].needs_grad
        || inner.nodes[bias.idx].needs_grad;
    let shape = xv.shape().to_vec();
    drop(inner);
    Ok(tape.push(
        RawTensor::new(&shape, data).expect("layer norm shape"),
        Op::LayerNorm {
            x: x.idx,
            gain: gain.idx,
            bias: bias.idx,
            eps,
        },
        needs,
    ))
}

/// Look up embedding rows for a token id sequence; gradient scatter-adds
/// into the table.
pub fn embedding_lookup<S: Scalar>(table: &Tensor<S>, ids: &[usize]) -> TensorResult<Tensor<S>> {
    let inner = table.tape.inner.borrow();
    let tv = &inner.nodes[table.idx].value;
    let (vocab, dim) = tv.dims2();
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(TensorError::OutOfVocab { id: bad, vocab });
    }
    let mut data = Vec::with_capacity(ids.len() * dim);
    for &i in ids {
        data.extend_from_slice(&tv.data()[i * dim..(i + 1) * dim]);
    }
    let needs = inner.nodes[table.idx].needs_grad;
    drop(inner);
    Ok(table.tape.push(
        RawTensor::new(&[ids.len(), dim], data).expect("lookup shape"),
        Op::EmbeddingLookup {
            table: table.idx,
            ids: ids.to_vec(),
        },
        needs,
    ))
}

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let a: S = lit(0.7978845608028654); // sqrt(2/pi)
    let b: S = lit(0.044715);
    let u = a * (x + b * x * x * x);
    lit::<S>(0.5) * x * (S::one() + u.tanh())
}

fn gelu_bwd<S: Scalar>(x: S) -> S {
    let a: S = lit(0.7978845608028654);
    let b: S = lit(0.044715);
    let u = a * (x + b * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    lit::<S>(0.5) * (S::one() + t)
        + lit::<S>(0.5) * x * sech2 * a * (S::one() + lit::<S>(3.0) * b * x * x)
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

fn acc_into<S: Scalar>(
    grads: &mut [Option<RawTensor<S>>],
    nodes: &[Node<S>],
    idx: usize,
    contribution: impl FnOnce(&mut [S]),
) {
    if !nodes[idx].needs_grad {
        return;
    }
    let slot = &mut grads[idx];
    if slot.is_none() {
        *slot = Some(RawTensor::zeros(nodes[idx].value.shape()));
    }
    contribution(slot.as_mut().unwrap().data_mut());
}

/// Accumulate an upstream gradient into one side of a broadcast binary op,
/// reducing over the broadcast dimensions.
fn acc_binary_side<S: Scalar>(
    grads: &mut [Option<RawTensor<S>>],
    nodes: &[Node<S>],
    idx: usize,
    out_dims: (usize, usize),
    per_element: impl Fn(usize, usize) -> S,
) {
    if !nodes[idx].needs_grad {
        return;
    }
    let bc = broadcast_kind(out_dims, nodes[idx].value.dims2()).expect("validated in forward");
    let (rows, cols) = out_dims;
    acc_into(grads, nodes, idx, |g| {
        for r in 0..rows {
            for c in 0..cols {
                g[rhs_index(bc, r, c, cols)] += per_element(r, c);
            }
        }
    });
}

fn backprop_one<S: Scalar>(
    nodes: &[Node<S>],
    at: usize,
    g: &RawTensor<S>,
    grads: &mut [Option<RawTensor<S>>],
) {
    let gd = g.data();
    match &nodes[at].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            let dims = nodes[*a].value.dims2();
            let (_, cols) = dims;
            acc_binary_side(grads, nodes, *a, dims, |r, c| gd[r * cols + c]);
            acc_binary_side(grads, nodes, *b, dims, |r, c| gd[r * cols + c]);
        }
        Op::Sub(a, b) => {
            let dims = nodes[*a].value.dims2();
            let (_, cols) = dims;
            acc_binary_side(grads, nodes, *a, dims, |r, c| gd[r * cols + c]);
            acc_binary_side(grads, nodes, *b, dims, |r, c| -gd[r * cols + c]);
        }
        Op::Mul(a, b) => {
            let dims = nodes[*a].value.dims2();
            let (_, cols) = dims;
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            let bc = broadcast_kind(dims, nodes[*b].value.dims2()).expect("validated");
            acc_binary_side(grads, nodes, *a, dims, |r, c| {
                gd[r * cols + c] * bv[rhs_index(bc, r, c, cols)]
            });
            acc_binary_side(grads, nodes, *b, dims, |r, c| {
                gd[r * cols + c] * av[r * cols + c]
            });
        }
        Op::Div(a, b) => {
            let dims = nodes[*a].value.dims2();
            let (_, cols) = dims;
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            let bc = broadcast_kind(dims, nodes[*b].value.dims2()).expect("validated");
            acc_binary_side(grads, nodes, *a, dims, |r, c| {
                gd[r * cols + c] / bv[rhs_index(bc, r, c, cols)]
            });
            acc_binary_side(grads, nodes, *b, dims, |r, c| {
                let bi = bv[rhs_index(bc, r, c, cols)];
                -gd[r * cols + c] * av[r * cols + c] / (bi * bi)
            });
        }
        Op::Neg(a) => acc_into(grads, nodes, *a, |dst| {
            for (d, gi) in dst.iter_mut().zip(gd) {
                *d -= *gi;
            }
        }),
        Op::Exp(a) => {
            let yv = nodes[at].value.data();
            acc_into(grads, nodes, *a, |dst| {
                for i in 0..dst.len() {
                    dst[i] += gd[i] * yv[i];
                }
            });
        }
        Op::Log(a) => {
            let xv = nodes[*a].value.data();
            acc_into(grads, nodes, *a, |dst| {
                for i in 0..dst.len() {
                    dst[i] += gd[i] / xv[i];
                }
            });
        }
        Op::Sqrt(a) => {
            let yv = nodes[at].value.data();
            acc_into(grads, nodes, *a, |dst| {
                for i in 0..dst.len() {
                    dst[i] += gd[i] / (yv[i] + yv[i]);
                }
            });
        }
        Op::Cosh(a) => {
            let xv = nodes[*a].value.data();
            acc_into(grads, nodes, *a, |dst| {
                for i in 0..dst.len() {
                    dst[i] += gd[i] * xv[i].sinh();
                }
            });
        }
        Op::Sinh(a) => {
            let xv = nodes[*a].value.data();
            acc_into(grads, nodes, *a, |dst| {
                for i in 0..dst.len() {
                    dst[i] += gd[i] * xv[i].cosh();
                }
            });
        }
        Op::Acosh(a) => {
            let xv = nodes[*a].value.data();
            acc_into(grads, nodes, *a, |dst| {
                for i in 0..dst.len() {
                    dst[i] += gd[i] / (xv[i] * xv[i] - S::one()).sqrt();
                }
            });
        }
        Op::Asin(a) => {
            let xv = nodes[*a].value.data();
            acc_into(grads, nodes, *a, |dst| {
                for i in 0..dst.len() {
                    dst[i] += gd[i] / (S::one() - xv[i] * xv[i]).sqrt();
                }
            });
        }
        Op::Acos(a) => {
            let xv = nodes[*a].value.data();
            acc_into(grads, nodes, *a, |dst| {
                for i in 0..dst.len() {
                    dst[i] -= gd[i] / (S::one() - xv[i] * xv[i]).sqrt();
                }
            });
        }
        Op::Gelu(a) => {
            let xv = nodes[*a].value.data();
            acc_into(grads, nodes, *a, |dst| {
                for i in 0..dst.len() {
                    dst[i] += gd[i] * gelu_bwd(xv[i]);
                }
            });
        }
        Op::Sinhc(a) => {
            let xv = nodes[*a].value.data();
            acc_into(grads, nodes, *a, |dst| {
                for i in 0..dst.len() {
                    dst[i] += gd[i] * crate::lorentz::sinhc_prime(xv[i]);
                }
            });
        }
        Op::AddConst(a, _) => acc_into(grads, nodes, *a, |dst| {
            for (d, gi) in dst.iter_mut().zip(gd) {
                *d += *gi;
            }
        }),
        Op::MulConst(a, k) => {
            let k = *k;
            acc_into(grads, nodes, *a, |dst| {
                for (d, gi) in dst.iter_mut().zip(gd) {
                    *d += *gi * k;
                }
            });
        }
        Op::Clamp { x, lo, hi } => {
            let xv = nodes[*x].value.data();
            let (lo, hi) = (*lo, *hi);
            acc_into(grads, nodes, *x, |dst| {
                for i in 0..dst.len() {
                    let inside =
                        lo.map_or(true, |l| xv[i] >= l) && hi.map_or(true, |h| xv[i] <= h);
                    if inside {
                        dst[i] += gd[i];
                    }
                }
            });
        }
        Op::Matmul { a, b, trans_b } => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            let (m, k) = nodes[*a].value.dims2();
            let n = nodes[at].value.dims2().1;
            if *trans_b {
                // C = A @ B^T, B is [n,k]: dA = G @ B, dB = G^T @ A.
                let da = gemm_nn(gd, bv, m, n, k);
                acc_into(grads, nodes, *a, |dst| {
                    for (d, v) in dst.iter_mut().zip(&da) {
                        *d += *v;
                    }
                });
                let db = gemm_tn(gd, av, m, n, k);
                acc_into(grads, nodes, *b, |dst| {
                    for (d, v) in dst.iter_mut().zip(&db) {
                        *d += *v;
                    }
                });
            } else {
                // C = A @ B, B is [k,n]: dA = G @ B^T, dB = A^T @ G.
                let da = gemm_nt(gd, bv, m, n, k);
                acc_into(grads, nodes, *a, |dst| {
                    for (d, v) in dst.iter_mut().zip(&da) {
                        *d += *v;
                    }
                });
                let db = gemm_tn(av, gd, m, k, n);
                acc_into(grads, nodes, *b, |dst| {
                    for (d, v) in dst.iter_mut().zip(&db) {
                        *d += *v;
                    }
                });
            }
        }
        Op::Transpose(a) => {
            let (rows, cols) = nodes[*a].value.dims2();
            acc_into(grads, nodes, *a, |dst| {
                for i in 0..rows {
                    for j in 0..cols {
                        dst[i * cols + j] += gd[j * rows + i];
                    }
                }
            });
        }
        Op::Sum(a) => {
            let g0 = gd[0];
            acc_into(grads, nodes, *a, |dst| {
                for d in dst.iter_mut() {
                    *d += g0;
                }
            });
        }
        Op::Mean(a) => {
            let n = nodes[*a].value.numel();
            let g0 = gd[0] / lit(n as f64);
            acc_into(grads, nodes, *a, |dst| {
                for d in dst.iter_mut() {
                    *d += g0;
                }
            });
        }
        Op::MaxAll(a) => {
            let xv = nodes[*a].value.data();
            let mut arg = 0;
            for (i, v) in xv.iter().enumerate() {
                if *v > xv[arg] {
                    arg = i;
                }
            }
            let g0 = gd[0];
            acc_into(grads, nodes, *a, |dst| {
                dst[arg] += g0;
            });
        }
        Op::SumRows(a) => {
            let (rows, cols) = nodes[*a].value.dims2();
            acc_into(grads, nodes, *a, |dst| {
                for r in 0..rows {
                    for c in 0..cols {
                        dst[r * cols + c] += gd[r];
                    }
                }
            });
        }
        Op::RowNorm { x, eps } => {
            let xv = nodes[*x].value.data();
            let yv = nodes[at].value.data();
            let (rows, cols) = nodes[*x].value.dims2();
            let eps = *eps;
            acc_into(grads, nodes, *x, |dst| {
                for r in 0..rows {
                    let denom = yv[r].max(eps).max(S::min_positive_value());
                    for c in 0..cols {
                        dst[r * cols + c] += gd[r] * xv[r * cols + c] / denom;
                    }
                }
            });
        }
        Op::SoftmaxRows(a) => {
            let yv = nodes[at].value.data();
            let (rows, cols) = nodes[*a].value.dims2();
            acc_into(grads, nodes, *a, |dst| {
                for r in 0..rows {
                    let dot: S = (0..cols).map(|c| gd[r * cols + c] * yv[r * cols + c]).sum();
                    for c in 0..cols {
                        let i = r * cols + c;
                        dst[i] += yv[i] * (gd[i] - dot);
                    }
                }
            });
        }
        Op::LogSoftmaxRows(a) => {
            let yv = nodes[at].value.data();
            let (rows, cols) = nodes[*a].value.dims2();
            acc_into(grads, nodes, *a, |dst| {
                for r in 0..rows {
                    let gsum: S = (0..cols).map(|c| gd[r * cols + c]).sum();
                    for c in 0..cols {
                        let i = r * cols + c;
                        dst[i] += gd[i] - yv[i].exp() * gsum;
                    }
                }
            });
        }
        Op::GatherRows { x, idx } => {
            let cols = nodes[*x].value.dims2().1;
            acc_into(grads, nodes, *x, |dst| {
                for (k, &src) in idx.iter().enumerate() {
                    for c in 0..cols {
                        dst[src * cols + c] += gd[k * cols + c];
                    }
                }
            });
        }
        Op::SliceRows { x, start } => {
            let cols = nodes[*x].value.dims2().1;
            let offset = start * cols;
            acc_into(grads, nodes, *x, |dst| {
                for (i, gi) in gd.iter().enumerate() {
                    dst[offset + i] += *gi;
                }
            });
        }
        Op::SliceCols { x, start } => {
            let (rows, cols) = nodes[*x].value.dims2();
            let len = nodes[at].value.dims2().1;
            let start = *start;
            acc_into(grads, nodes, *x, |dst| {
                for r in 0..rows {
                    for c in 0..len {
                        dst[r * cols + start + c] += gd[r * len + c];
                    }
                }
            });
        }
        Op::Concat { parts, axis } => {
            if *axis == 0 {
                let mut row_off = 0;
                for &p in parts {
                    let (pr, pc) = nodes[p].value.dims2();
                    let base = row_off * pc;
                    acc_into(grads, nodes, p, |dst| {
                        for (i, d) in dst.iter_mut().enumerate() {
                            *d += gd[base + i];
                        }
                    });
                    row_off += pr;
                }
            } else {
                let out_cols = nodes[at].value.dims2().1;
                let mut col_off = 0;
                for &p in parts {
                    let (pr, pc) = nodes[p].value.dims2();
                    let off = col_off;
                    acc_into(grads, nodes, p, |dst| {
                        for r in 0..pr {
                            for c in 0..pc {
                                dst[r * pc + c] += gd[r * out_cols + off + c];
                            }
                        }
                    });
                    col_off += pc;
                }
            }
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let xv = nodes[*x].value.data();
            let gv = nodes[*gain].value.data();
            let (rows, cols) = nodes[*x].value.dims2();
            let colsf: S = lit(cols as f64);
            // Recompute per-row statistics; cheaper than saving them.
            let mut dx = vec![S::zero(); rows * cols];
            let mut dgain = vec![S::zero(); cols];
            let mut dbias = vec![S::zero(); cols];
            for r in 0..rows {
                let row = &xv[r * cols..(r + 1) * cols];
                let mean = row.iter().copied().sum::<S>() / colsf;
                let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<S>() / colsf;
                let inv = S::one() / (var + *eps).sqrt();
                let mut m1 = S::zero();
                let mut m2 = S::zero();
                for c in 0..cols {
                    let xhat = (row[c] - mean) * inv;
                    let dxhat = gd[r * cols + c] * gv[c];
                    m1 += dxhat;
                    m2 += dxhat * xhat;
                    dgain[c] += gd[r * cols + c] * xhat;
                    dbias[c] += gd[r * cols + c];
                }
                m1 /= colsf;
                m2 /= colsf;
                for c in 0..cols {
                    let xhat = (row[c] - mean) * inv;
                    dx[r * cols + c] = inv * (gd[r * cols + c] * gv[c] - m1 - xhat * m2);
                }
            }
            acc_into(grads, nodes, *x, |dst| {
                for (d, v) in dst.iter_mut().zip(&dx) {
                    *d += *v;
                }
            });
            acc_into(grads, nodes, *gain, |dst| {
                for (d, v) in dst.iter_mut().zip(&dgain) {
                    *d += *v;
                }
            });
            acc_into(grads, nodes, *bias, |dst| {
                for (d, v) in dst.iter_mut().zip(&dbias) {
                    *d += *v;
                }
            });
        }
        Op::EmbeddingLookup { table, ids } => {
            let dim = nodes[*table].value.dims2().1;
            acc_into(grads, nodes, *table, |dst| {
                for (k, &id) in ids.iter().enumerate() {
                    for c in 0..dim {
                        dst[id * dim + c] += gd[k * dim + c];
                    }
                }
            });
        }
    }
}

#[cfg(test)]
mod tests;
