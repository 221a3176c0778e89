//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, which is a topological order by construction. [`Graph::backward`]
//! walks the record in reverse and returns per-parameter gradients. Graphs
//! are built fresh for every example and thrown away afterwards.
//!
//! Binary elementwise operations broadcast a `1 x n`, `m x 1` or `1 x 1`
//! operand against an `m x n` one. Nothing more general is supported.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dropout::dropout_mask;
use super::error::TensorError;
use super::params::{Gradients, ParamId, ParamStore};
use super::scalar::Scalar;
use super::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: T },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Ln { x: Var, floor: T },
    Clamp { x: Var, lo: T, hi: T },
    SoftmaxRows(Var),
    SumRows(Var),
    MeanRows(Var),
    SumCols(Var),
    MeanCols(Var),
    SumAll(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ShiftRows { x: Var, offset: isize },
    RepeatRows(Var),
    Gather { table: Var, ids: Vec<usize> },
    Pick { x: Var, row: usize, col: usize },
    ScatterCols { x: Var, ids: Vec<usize> },
    PadCols(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Ln { .. } => "ln",
            Op::Clamp { .. } => "clamp",
            Op::SoftmaxRows(_) => "softmax",
            Op::SumRows(_) => "sum_rows",
            Op::MeanRows(_) => "mean_rows",
            Op::SumCols(_) => "sum_cols",
            Op::MeanCols(_) => "mean_cols",
            Op::SumAll(_) => "sum_all",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::ShiftRows { .. } => "shift_rows",
            Op::RepeatRows(_) => "repeat_rows",
            Op::Gather { .. } => "gather",
            Op::Pick { .. } => "pick",
            Op::ScatterCols { .. } => "scatter_cols",
            Op::PadCols(_) => "pad_cols",
        }
    }
}

#[derive(Clone, Debug)]
enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Value<T>,
    op: Op<T>,
}

struct DropoutCtx {
    keep_prob: f64,
    rng: ChaCha8Rng,
}

/// Computation record for one forward pass.
pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    dropout: Option<DropoutCtx>,
    backward_done: bool,
    non_finite: Option<TensorError>,
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

fn broadcast_shape(op: &'static str, a: [usize; 2], b: [usize; 2]) -> Result<[usize; 2], TensorError> {
    match (broadcast_dim(a[0], b[0]), broadcast_dim(a[1], b[1])) {
        (Some(r), Some(c)) => Ok([r, c]),
        _ => Err(TensorError::ShapeMismatch {
            op,
            left: a,
            right: b,
        }),
    }
}

fn zip_broadcast<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, shape: [usize; 2], f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(shape[0], shape[1], data).expect("same-shape zip");
    }
    let (ar, ac) = (a.rows() > 1, a.cols() > 1);
    let (br, bc) = (b.rows() > 1, b.cols() > 1);
    Tensor::from_fn(shape[0], shape[1], |r, c| {
        let x = a.get(if ar { r } else { 0 }, if ac { c } else { 0 });
        let y = b.get(if br { r } else { 0 }, if bc { c } else { 0 });
        f(x, y)
    })
}

/// Sums `g` down to `shape` over the broadcast dimensions.
fn reduce_to<T: Scalar>(g: Tensor<T>, shape: [usize; 2]) -> Tensor<T> {
    if g.shape() == shape {
        return g;
    }
    let mut out = Tensor::zeros(shape[0], shape[1]);
    let (keep_r, keep_c) = (shape[0] > 1, shape[1] > 1);
    for r in 0..g.rows() {
        for c in 0..g.cols() {
            let (rr, cc) = (if keep_r { r } else { 0 }, if keep_c { c } else { 0 });
            let v = out.get(rr, cc) + g.get(r, c);
            out.set(rr, cc, v);
        }
    }
    out
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// Inference-mode graph: dropout is the identity.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(1024),
            param_vars: vec![None; params.len()],
            dropout: None,
            backward_done: false,
            non_finite: None,
        }
    }

    /// Training-mode graph applying inverted dropout with `keep_prob`.
    pub fn training(params: &'p ParamStore<T>, keep_prob: f64, seed: u64) -> Result<Self, TensorError> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(TensorError::InvalidArgument(format!(
                "keep probability must be in (0, 1], got {keep_prob}"
            )));
        }
        let mut g = Self::new(params);
        g.dropout = Some(DropoutCtx {
            keep_prob,
            rng: ChaCha8Rng::seed_from_u64(seed),
        });
        Ok(g)
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.value(v).shape()
    }

    /// Position to roll back to with [`Graph::truncate`].
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drops every node created after `mark`. Used by decoders that run many
    /// forward-only steps on top of a shared encoding.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        for slot in &mut self.param_vars {
            if matches!(slot, Some(v) if v.0 >= mark) {
                *slot = None;
            }
        }
        if matches!(self.non_finite, Some(TensorError::NonFinite { node, .. }) if node >= mark) {
            self.non_finite = None;
        }
    }

    /// First non-finite value recorded in the forward pass, if any.
    pub fn non_finite(&self) -> Option<&TensorError> {
        self.non_finite.as_ref()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let idx = self.nodes.len();
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(TensorError::NonFinite {
                op: op.name(),
                node: idx,
            });
        }
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(idx)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Tensor::zeros(rows, cols))
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
        });
        self.param_vars[id.0] = Some(Var(idx));
        Var(idx)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: ta.shape(),
                right: tb.shape(),
            });
        }
        let out = ta.matmul(tb);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(name, ta.shape(), tb.shape())?;
        let out = zip_broadcast(ta, tb, shape, f);
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, Op::Affine { x, scale })
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -T::one(), T::one())
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        self.push(out, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.exp());
        self.push(out, Op::Exp(x))
    }

    /// Natural log.
    pub fn ln(&mut self, x: Var) -> Var {
        self.ln_floored(x, T::zero())
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn ln_floored(&mut self, x: Var, floor: T) -> Var {
        let out = self.value(x).map(|v| if v > floor { v.ln() } else { floor.ln() });
        self.push(out, Op::Ln { x, floor })
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(out, Op::Clamp { x, lo, hi })
    }

    /// Softmax over each row.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let cols = t.cols();
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(cols) {
            softmax_in_place(row);
        }
        self.push(out, Op::SoftmaxRows(x))
    }

    /// Sum over rows: `m x n -> 1 x n`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::from_fn(1, t.cols(), |_, c| (0..t.rows()).map(|r| t.get(r, c)).sum());
        self.push(out, Op::SumRows(x))
    }

    /// Mean over rows: `m x n -> 1 x n`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = T::lit(t.rows() as f64);
        let out = Tensor::from_fn(1, t.cols(), |_, c| (0..t.rows()).map(|r| t.get(r, c)).sum::<T>() / n);
        self.push(out, Op::MeanRows(x))
    }

    /// Sum over columns: `m x n -> m x 1`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::from_fn(t.rows(), 1, |r, _| t.row_slice(r).iter().copied().sum());
        self.push(out, Op::SumCols(x))
    }

    /// Mean over columns: `m x n -> m x 1`.
    pub fn mean_cols(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = T::lit(t.cols() as f64);
        let out = Tensor::from_fn(t.rows(), 1, |r, _| t.row_slice(r).iter().copied().sum::<T>() / n);
        self.push(out, Op::MeanCols(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::SumAll(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat_cols of nothing".into()))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(*first),
                    right: s,
                });
            }
            cols += s[1];
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let out = Tensor::new(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat_rows of nothing".into()))?;
        let cols = self.value(*first).cols();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[1] != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(*first),
                    right: s,
                });
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        if len == 0 || start + len > t.cols() {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: t.cols(),
            });
        }
        let out = Tensor::from_fn(t.rows(), len, |r, c| t.get(r, start + c));
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        if len == 0 || start + len > t.rows() {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                bound: t.rows(),
            });
        }
        let cols = t.cols();
        let out = Tensor::new(len, cols, t.data()[start * cols..(start + len) * cols].to_vec())?;
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    pub fn row(&mut self, x: Var, r: usize) -> Result<Var, TensorError> {
        self.slice_rows(x, r, 1)
    }

    /// `out[t] = x[t - offset]`, zero where `t - offset` falls outside.
    pub fn shift_rows(&mut self, x: Var, offset: isize) -> Var {
        let t = self.value(x);
        let rows = t.rows() as isize;
        let out = Tensor::from_fn(t.rows(), t.cols(), |r, c| {
            let src = r as isize - offset;
            if src >= 0 && src < rows {
                t.get(src as usize, c)
            } else {
                T::zero()
            }
        });
        self.push(out, Op::ShiftRows { x, offset })
    }

    /// Stacks a `1 x n` row `times` times.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.rows() != 1 || times == 0 {
            return Err(TensorError::InvalidArgument(format!(
                "repeat_rows needs a non-empty 1 x n input, got {:?} x{times}",
                t.shape()
            )));
        }
        let out = Tensor::from_fn(times, t.cols(), |_, c| t.get(0, c));
        Ok(self.push(out, Op::RepeatRows(x)))
    }

    /// Row lookup: `out[i] = table[ids[i]]` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(table);
        if ids.is_empty() {
            return Err(TensorError::InvalidArgument("gather with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather",
                index: bad,
                bound: t.rows(),
            });
        }
        let cols = t.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::new(ids.len(), cols, data)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Single element as a `1 x 1` node.
    pub fn pick(&mut self, x: Var, row: usize, col: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        if row >= t.rows() || col >= t.cols() {
            return Err(TensorError::IndexOutOfRange {
                op: "pick",
                index: row * t.cols() + col,
                bound: t.len(),
            });
        }
        let out = Tensor::scalar(t.get(row, col));
        Ok(self.push(out, Op::Pick { x, row, col }))
    }

    /// Scatter-add of a `1 x n` row onto a `1 x width` row at columns `ids`.
    pub fn scatter_cols(&mut self, x: Var, ids: &[usize], width: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.rows() != 1 || t.cols() != ids.len() {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_cols",
                left: t.shape(),
                right: [1, ids.len()],
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= width) {
            return Err(TensorError::IndexOutOfRange {
                op: "scatter_cols",
                index: bad,
                bound: width,
            });
        }
        let mut out = Tensor::zeros(1, width);
        for (j, &i) in ids.iter().enumerate() {
            let v = out.get(0, i) + t.get(0, j);
            out.set(0, i, v);
        }
        Ok(self.push(
            out,
            Op::ScatterCols {
                x,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Zero-extends columns up to `width`.
    pub fn pad_cols(&mut self, x: Var, width: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        if width < t.cols() {
            return Err(TensorError::IndexOutOfRange {
                op: "pad_cols",
                index: t.cols(),
                bound: width,
            });
        }
        let out = Tensor::from_fn(t.rows(), width, |r, c| {
            if c < t.cols() {
                t.get(r, c)
            } else {
                T::zero()
            }
        });
        Ok(self.push(out, Op::PadCols(x)))
    }

    /// Inverted dropout in training graphs, identity otherwise.
    pub fn dropout(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x);
        let mask = match &mut self.dropout {
            Some(ctx) if ctx.keep_prob < 1.0 => dropout_mask::<T>(shape[0], shape[1], ctx.keep_prob, &mut ctx.rng)?,
            _ => return Ok(x),
        };
        let m = self.constant(mask);
        self.mul(x, m)
    }

    /// Reverse pass from a `1 x 1` loss.
    ///
    /// May run once per graph. Parameters the loss does not reach come back
    /// as zero gradients.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(TensorError::NotScalar(shape));
        }
        if let Some(err) = &self.non_finite {
            return Err(err.clone());
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        let mut out = Gradients::empty(self.params.len());

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let y = self.value(Var(i));
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(id) => match &mut out.grads[id.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    let sb = self.shape(*b);
                    accumulate(&mut grads, *b, reduce_to(g.clone(), sb));
                    accumulate(&mut grads, *a, reduce_to(g, self.shape(*a)));
                }
                Op::Sub(a, b) => {
                    let sb = self.shape(*b);
                    accumulate(&mut grads, *b, reduce_to(g.map(|v| -v), sb));
                    accumulate(&mut grads, *a, reduce_to(g, self.shape(*a)));
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let shape = g.shape();
                    let ga = zip_broadcast(&g, tb, shape, |x, y| x * y);
                    let gb = zip_broadcast(&g, ta, shape, |x, y| x * y);
                    accumulate(&mut grads, *a, reduce_to(ga, ta.shape()));
                    accumulate(&mut grads, *b, reduce_to(gb, tb.shape()));
                }
                Op::Affine { x, scale } => {
                    let s = *scale;
                    accumulate(&mut grads, *x, g.map(|v| v * s));
                }
                Op::Sigmoid(x) => {
                    let gx = zip_broadcast(&g, y, g.shape(), |gv, yv| gv * yv * (T::one() - yv));
                    accumulate(&mut grads, *x, gx);
                }
                Op::Tanh(x) => {
                    let gx = zip_broadcast(&g, y, g.shape(), |gv, yv| gv * (T::one() - yv * yv));
                    accumulate(&mut grads, *x, gx);
                }
                Op::Relu(x) => {
                    let gx = zip_broadcast(&g, self.value(*x), g.shape(), |gv, xv| {
                        if xv > T::zero() {
                            gv
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Exp(x) => {
                    let gx = zip_broadcast(&g, y, g.shape(), |gv, yv| gv * yv);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Ln { x, floor } => {
                    let f = *floor;
                    let gx = zip_broadcast(&g, self.value(*x), g.shape(), |gv, xv| {
                        if xv > f {
                            gv / xv
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Clamp { x, lo, hi } => {
                    let (lo, hi) = (*lo, *hi);
                    let gx = zip_broadcast(&g, self.value(*x), g.shape(), |gv, xv| {
                        if xv >= lo && xv <= hi {
                            gv
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::SoftmaxRows(x) => {
                    let cols = y.cols();
                    let mut gx = g.clone();
                    for (r, grow) in gx.data_mut().chunks_mut(cols).enumerate() {
                        let yrow = y.row_slice(r);
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for (gv, &yv) in grow.iter_mut().zip(yrow) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SumRows(x) | Op::MeanRows(x) => {
                    let [rows, cols] = self.shape(*x);
                    let k = match self.nodes[i].op {
                        Op::MeanRows(_) => T::one() / T::lit(rows as f64),
                        _ => T::one(),
                    };
                    let gx = Tensor::from_fn(rows, cols, |_, c| g.get(0, c) * k);
                    accumulate(&mut grads, *x, gx);
                }
                Op::SumCols(x) | Op::MeanCols(x) => {
                    let [rows, cols] = self.shape(*x);
                    let k = match self.nodes[i].op {
                        Op::MeanCols(_) => T::one() / T::lit(cols as f64),
                        _ => T::one(),
                    };
                    let gx = Tensor::from_fn(rows, cols, |r, _| g.get(r, 0) * k);
                    accumulate(&mut grads, *x, gx);
                }
                Op::SumAll(x) => {
                    let [rows, cols] = self.shape(*x);
                    accumulate(&mut grads, *x, Tensor::filled(rows, cols, g.item()));
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let [rows, cols] = self.shape(p);
                        let gp = Tensor::from_fn(rows, cols, |r, c| g.get(r, offset + c));
                        offset += cols;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    let width = g.cols();
                    for &p in parts {
                        let [rows, cols] = self.shape(p);
                        let gp = Tensor::new(rows, cols, g.data()[offset * width..(offset + rows) * width].to_vec())?;
                        offset += rows;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::SliceCols { x, start } => {
                    let [rows, cols] = self.shape(*x);
                    let (start, len) = (*start, g.cols());
                    let gx = Tensor::from_fn(rows, cols, |r, c| {
                        if c >= start && c < start + len {
                            g.get(r, c - start)
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::SliceRows { x, start } => {
                    let [rows, cols] = self.shape(*x);
                    let mut gx = Tensor::zeros(rows, cols);
                    gx.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *x, gx);
                }
                Op::ShiftRows { x, offset } => {
                    let [rows, cols] = self.shape(*x);
                    let off = *offset;
                    let gx = Tensor::from_fn(rows, cols, |s, c| {
                        let dst = s as isize + off;
                        if dst >= 0 && dst < rows as isize {
                            g.get(dst as usize, c)
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::RepeatRows(x) => {
                    let gx = Tensor::from_fn(1, g.cols(), |_, c| (0..g.rows()).map(|r| g.get(r, c)).sum());
                    accumulate(&mut grads, *x, gx);
                }
                Op::Gather { table, ids } => {
                    let [rows, cols] = self.shape(*table);
                    let mut gt = Tensor::zeros(rows, cols);
                    for (k, &id) in ids.iter().enumerate() {
                        let src = g.row_slice(k);
                        let dst = &mut gt.data_mut()[id * cols..(id + 1) * cols];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::Pick { x, row, col } => {
                    let [rows, cols] = self.shape(*x);
                    let mut gx = Tensor::zeros(rows, cols);
                    gx.set(*row, *col, g.item());
                    accumulate(&mut grads, *x, gx);
                }
                Op::ScatterCols { x, ids } => {
                    let gx = Tensor::from_fn(1, ids.len(), |_, j| g.get(0, ids[j]));
                    accumulate(&mut grads, *x, gx);
                }
                Op::PadCols(x) => {
                    let [rows, cols] = self.shape(*x);
                    let gx = Tensor::from_fn(rows, cols, |r, c| g.get(r, c));
                    accumulate(&mut grads, *x, gx);
                }
            }
        }
        Ok(out)
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
