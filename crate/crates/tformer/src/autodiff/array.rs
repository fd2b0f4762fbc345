//! Differentiable dense arrays and the reverse-mode graph.
//!
//! A [`DiffArray`] is a cheap handle onto a graph node holding row-major
//! values, an optional gradient buffer, and the operation that produced it.
//! Forward methods build the graph; [`DiffArray::backward`] walks it once in
//! reverse topological order, accumulating gradients into every reachable
//! node that requires them. Gradients of interior nodes are dropped as soon
//! as they have been consumed; leaf gradients accumulate across calls until
//! an optimizer step clears them.

use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use super::scalar::Scalar;
use super::linalg;
use crate::geometry::KnnGraph;

/// Buffers at least this large get rayon-parallel elementwise loops.
const PAR_ELEMWISE: usize = 1 << 16;

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {a:?} vs {b:?}")]
    ShapeMismatch {
        op: &'static str,
        a: Vec<usize>,
        b: Vec<usize>,
    },
    #[error("non-finite input to {op}")]
    NonFiniteInput { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("parameter {name} has no gradient")]
    MissingGrad { name: String },
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

enum Op<T: Scalar> {
    Add(DiffArray<T>, DiffArray<T>),
    AddBias(DiffArray<T>, DiffArray<T>),
    Sub(DiffArray<T>, DiffArray<T>),
    Mul(DiffArray<T>, DiffArray<T>),
    ScalarMul(DiffArray<T>, T),
    Neg(DiffArray<T>),
    Relu(DiffArray<T>),
    Log(DiffArray<T>),
    PowScalar(DiffArray<T>, T),
    Clamp(DiffArray<T>, T, T),
    Matmul(DiffArray<T>, DiffArray<T>),
    MatmulNt(DiffArray<T>, DiffArray<T>),
    Softmax(DiffArray<T>),
    Concat(Vec<DiffArray<T>>, usize),
    GatherRows(DiffArray<T>, Rc<Vec<u32>>),
    NeighborGather(DiffArray<T>, Rc<KnnGraph>),
    RowsRepeat(DiffArray<T>, usize),
    GroupMax(DiffArray<T>, usize, Vec<u32>),
    MaxAxis0(DiffArray<T>, Vec<u32>),
    MeanAxis0(DiffArray<T>),
    BroadcastRows(DiffArray<T>, usize),
    SumAll(DiffArray<T>),
    MeanAll(DiffArray<T>),
    BatchNorm {
        x: DiffArray<T>,
        scale: DiffArray<T>,
        shift: DiffArray<T>,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout(DiffArray<T>, Vec<T>),
}

struct NodeInner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    values: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    op: Option<Op<T>>,
    requires_grad: bool,
}

/// Handle to one node of the computation graph.
pub struct DiffArray<T: Scalar> {
    inner: Rc<NodeInner<T>>,
}

impl<T: Scalar> Clone for DiffArray<T> {
    fn clone(&self) -> Self {
        Self {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for DiffArray<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffArray")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn shape_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> DiffArray<T> {
    fn make(shape: Vec<usize>, values: Vec<T>, op: Option<Op<T>>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape_len(&shape), values.len());
        Self {
            inner: Rc::new(NodeInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                values: RefCell::new(values),
                grad: RefCell::new(None),
                op,
                requires_grad,
            }),
        }
    }

    fn from_op(shape: Vec<usize>, values: Vec<T>, op: Op<T>) -> Self {
        let requires_grad = op.parents().iter().any(|p| p.inner.requires_grad);
        Self::make(shape, values, Some(op), requires_grad)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(shape: Vec<usize>, values: Vec<T>) -> Self {
        Self::make(shape, values, None, false)
    }

    /// A leaf that accumulates gradients (parameters, gradcheck inputs).
    pub fn variable(shape: Vec<usize>, values: Vec<T>) -> Self {
        Self::make(shape, values, None, true)
    }

    pub fn scalar(v: T) -> Self {
        Self::constant(vec![], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        shape_len(&self.inner.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn values(&self) -> Ref<'_, Vec<T>> {
        self.inner.values.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.values.borrow().clone()
    }

    /// Current value of a rank-0 (or single-element) array.
    pub fn scalar_value(&self) -> T {
        let v = self.inner.values.borrow();
        debug_assert_eq!(v.len(), 1);
        v[0]
    }

    /// Replaces the stored values; shape must be unchanged. Used by
    /// optimizers and finite-difference probes.
    pub fn set_values(&self, values: &[T]) {
        let mut v = self.inner.values.borrow_mut();
        assert_eq!(v.len(), values.len(), "set_values length");
        v.copy_from_slice(values);
    }

    pub fn set_value_at(&self, idx: usize, value: T) {
        self.inner.values.borrow_mut()[idx] = value;
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Applies `value -= lr * grad` and clears the gradient.
    /// Returns false when no gradient is present.
    pub fn apply_sgd(&self, lr: T) -> bool {
        let mut grad = self.inner.grad.borrow_mut();
        match grad.take() {
            Some(g) => {
                let mut v = self.inner.values.borrow_mut();
                for (v, g) in v.iter_mut().zip(&g) {
                    *v = *v - lr * *g;
                }
                true
            }
            None => false,
        }
    }

    fn rows_cols(&self, op: &'static str) -> Result<(usize, usize), DiffError> {
        match self.inner.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(DiffError::ShapeMismatch {
                op,
                a: other.to_vec(),
                b: vec![0, 0],
            }),
        }
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<(), DiffError> {
        if self.inner.shape == other.inner.shape {
            Ok(())
        } else {
            Err(DiffError::ShapeMismatch {
                op,
                a: self.inner.shape.clone(),
                b: other.inner.shape.clone(),
            })
        }
    }

    // ----- elementwise -----

    pub fn add(&self, other: &Self) -> Result<Self, DiffError> {
        self.same_shape(other, "add")?;
        let values = zip_map(&self.values(), &other.values(), |a, b| a + b);
        Ok(Self::from_op(
            self.inner.shape.clone(),
            values,
            Op::Add(self.clone(), other.clone()),
        ))
    }

    /// Adds a rank-1 bias of length `d` to every row of an `n x d` matrix.
    pub fn add_bias(&self, bias: &Self) -> Result<Self, DiffError> {
        let (_, d) = self.rows_cols("add_bias")?;
        if bias.inner.shape != [d] {
            return Err(DiffError::ShapeMismatch {
                op: "add_bias",
                a: self.inner.shape.clone(),
                b: bias.inner.shape.clone(),
            });
        }
        let b = bias.values();
        let values = self
            .values()
            .chunks(d)
            .flat_map(|row| row.iter().zip(b.iter()).map(|(x, y)| *x + *y).collect::<Vec<_>>())
            .collect();
        Ok(Self::from_op(
            self.inner.shape.clone(),
            values,
            Op::AddBias(self.clone(), bias.clone()),
        ))
    }

    pub fn sub(&self, other: &Self) -> Result<Self, DiffError> {
        self.same_shape(other, "sub")?;
        let values = zip_map(&self.values(), &other.values(), |a, b| a - b);
        Ok(Self::from_op(
            self.inner.shape.clone(),
            values,
            Op::Sub(self.clone(), other.clone()),
        ))
    }

    pub fn mul(&self, other: &Self) -> Result<Self, DiffError> {
        self.same_shape(other, "mul")?;
        let values = zip_map(&self.values(), &other.values(), |a, b| a * b);
        Ok(Self::from_op(
            self.inner.shape.clone(),
            values,
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    pub fn scalar_mul(&self, s: T) -> Self {
        let values = map_buf(&self.values(), |x| x * s);
        Self::from_op(
            self.inner.shape.clone(),
            values,
            Op::ScalarMul(self.clone(), s),
        )
    }

    pub fn neg(&self) -> Self {
        let values = map_buf(&self.values(), |x| -x);
        Self::from_op(self.inner.shape.clone(), values, Op::Neg(self.clone()))
    }

    pub fn relu(&self) -> Self {
        let zero = T::zero();
        let values = map_buf(&self.values(), |x| if x > zero { x } else { zero });
        Self::from_op(self.inner.shape.clone(), values, Op::Relu(self.clone()))
    }

    pub fn log(&self) -> Self {
        let values = map_buf(&self.values(), |x| x.ln());
        Self::from_op(self.inner.shape.clone(), values, Op::Log(self.clone()))
    }

    /// Elementwise `x^p` for a scalar exponent.
    pub fn pow_scalar(&self, p: T) -> Self {
        let values = map_buf(&self.values(), |x| x.powf(p));
        Self::from_op(
            self.inner.shape.clone(),
            values,
            Op::PowScalar(self.clone(), p),
        )
    }

    /// Hard clamp; gradient is passed through strictly inside the bounds.
    pub fn clamp(&self, lo: T, hi: T) -> Self {
        let values = map_buf(&self.values(), |x| if x < lo { lo } else if x > hi { hi } else { x });
        Self::from_op(
            self.inner.shape.clone(),
            values,
            Op::Clamp(self.clone(), lo, hi),
        )
    }

    // ----- linear algebra -----

    pub fn matmul(&self, other: &Self) -> Result<Self, DiffError> {
        let (m, k) = self.rows_cols("matmul")?;
        let (k2, n) = other.rows_cols("matmul")?;
        if k != k2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                a: self.inner.shape.clone(),
                b: other.inner.shape.clone(),
            });
        }
        let values = linalg::matmul(&self.values(), &other.values(), m, k, n);
        Ok(Self::from_op(
            vec![m, n],
            values,
            Op::Matmul(self.clone(), other.clone()),
        ))
    }

    /// `self * otherᵀ`; `other` is `n x k`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self, DiffError> {
        let (m, k) = self.rows_cols("matmul_nt")?;
        let (n, k2) = other.rows_cols("matmul_nt")?;
        if k != k2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul_nt",
                a: self.inner.shape.clone(),
                b: other.inner.shape.clone(),
            });
        }
        let values = linalg::matmul_nt(&self.values(), &other.values(), m, k, n);
        Ok(Self::from_op(
            vec![m, n],
            values,
            Op::MatmulNt(self.clone(), other.clone()),
        ))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&self) -> Result<Self, DiffError> {
        let (_, d) = self.rows_cols("softmax")?;
        {
            let v = self.values();
            if v.iter().any(|x| !x.is_finite()) {
                return Err(DiffError::NonFiniteInput { op: "softmax" });
            }
        }
        let src = self.values();
        let mut values = vec![T::zero(); src.len()];
        let rows: Vec<(&[T], &mut [T])> = src.chunks(d).zip(values.chunks_mut(d)).collect();
        let run = |(input, out): (&[T], &mut [T])| {
            let max = input.iter().fold(T::neg_infinity(), |m, &x| if x > m { x } else { m });
            let mut denom = 0.0f64;
            for (o, &x) in out.iter_mut().zip(input) {
                let e = (x - max).exp();
                *o = e;
                denom += e.into_f64();
            }
            let inv = T::from_f64(1.0 / denom);
            for o in out.iter_mut() {
                *o = *o * inv;
            }
        };
        if src.len() >= PAR_ELEMWISE {
            rows.into_par_iter().for_each(run);
        } else {
            rows.into_iter().for_each(run);
        }
        drop(src);
        Ok(Self::from_op(
            self.inner.shape.clone(),
            values,
            Op::Softmax(self.clone()),
        ))
    }

    /// Concatenation along `axis` (0 = rows, 1 = columns).
    pub fn concat(parts: &[Self], axis: usize) -> Result<Self, DiffError> {
        assert!(!parts.is_empty(), "concat of nothing");
        let (r0, c0) = parts[0].rows_cols("concat")?;
        let mut rows = r0;
        let mut cols = c0;
        for p in &parts[1..] {
            let (r, c) = p.rows_cols("concat")?;
            match axis {
                0 => {
                    if c != c0 {
                        return Err(DiffError::ShapeMismatch {
                            op: "concat",
                            a: parts[0].inner.shape.clone(),
                            b: p.inner.shape.clone(),
                        });
                    }
                    rows += r;
                }
                _ => {
                    if r != r0 {
                        return Err(DiffError::ShapeMismatch {
                            op: "concat",
                            a: parts[0].inner.shape.clone(),
                            b: p.inner.shape.clone(),
                        });
                    }
                    cols += c;
                }
            }
        }
        let mut values = Vec::with_capacity(rows * cols);
        if axis == 0 {
            for p in parts {
                values.extend_from_slice(&p.values());
            }
        } else {
            for r in 0..rows {
                for p in parts {
                    let pc = p.inner.shape[1];
                    let v = p.values();
                    values.extend_from_slice(&v[r * pc..(r + 1) * pc]);
                }
            }
        }
        Ok(Self::from_op(
            vec![rows, cols],
            values,
            Op::Concat(parts.to_vec(), axis),
        ))
    }

    /// Selects rows by index; duplicate indices are allowed and their
    /// gradients accumulate.
    pub fn gather_rows(&self, indices: Rc<Vec<u32>>) -> Result<Self, DiffError> {
        let (rows, d) = self.rows_cols("gather_rows")?;
        let v = self.values();
        let mut values = Vec::with_capacity(indices.len() * d);
        for &i in indices.iter() {
            assert!((i as usize) < rows, "gather_rows index {i} out of range");
            values.extend_from_slice(&v[i as usize * d..(i as usize + 1) * d]);
        }
        drop(v);
        Ok(Self::from_op(
            vec![indices.len(), d],
            values,
            Op::GatherRows(self.clone(), indices),
        ))
    }

    /// Expands `n x d` to `(n*k) x d` by stacking each point's k nearest
    /// neighbors' rows: output row `i*k + t` is row `knn[i][t]`.
    pub fn neighbor_gather(&self, knn: Rc<KnnGraph>) -> Result<Self, DiffError> {
        let (rows, d) = self.rows_cols("neighbor_gather")?;
        assert_eq!(knn.len(), rows, "knn graph size vs rows");
        let v = self.values();
        let k = knn.k;
        let mut values = vec![T::zero(); rows * k * d];
        let chunks: Vec<(usize, &mut [T])> = values.chunks_mut(k * d).enumerate().collect();
        let run = |(i, out): (usize, &mut [T])| {
            for (t, &j) in knn.row(i).iter().enumerate() {
                out[t * d..(t + 1) * d].copy_from_slice(&v[j as usize * d..(j as usize + 1) * d]);
            }
        };
        if rows * k * d >= PAR_ELEMWISE {
            chunks.into_par_iter().for_each(run);
        } else {
            chunks.into_iter().for_each(run);
        }
        drop(v);
        Ok(Self::from_op(
            vec![rows * k, d],
            values,
            Op::NeighborGather(self.clone(), knn),
        ))
    }

    /// Repeats every row `k` times: `n x d` to `(n*k) x d`.
    pub fn rows_repeat(&self, k: usize) -> Result<Self, DiffError> {
        let (rows, d) = self.rows_cols("rows_repeat")?;
        let v = self.values();
        let mut values = Vec::with_capacity(rows * k * d);
        for r in 0..rows {
            for _ in 0..k {
                values.extend_from_slice(&v[r * d..(r + 1) * d]);
            }
        }
        drop(v);
        Ok(Self::from_op(
            vec![rows * k, d],
            values,
            Op::RowsRepeat(self.clone(), k),
        ))
    }

    /// Feature-wise max over each group of `k` consecutive rows; gradient
    /// routes to the first argmax row on ties.
    pub fn group_max(&self, k: usize) -> Result<Self, DiffError> {
        let (rows, d) = self.rows_cols("group_max")?;
        assert!(k > 0 && rows % k == 0, "group_max: {rows} rows not divisible by {k}");
        let n = rows / k;
        let v = self.values();
        let mut values = vec![T::zero(); n * d];
        let mut argmax = vec![0u32; n * d];
        for i in 0..n {
            let base = i * k;
            let out = &mut values[i * d..(i + 1) * d];
            let arg = &mut argmax[i * d..(i + 1) * d];
            out.copy_from_slice(&v[base * d..(base + 1) * d]);
            for a in arg.iter_mut() {
                *a = base as u32;
            }
            for t in 1..k {
                let row = &v[(base + t) * d..(base + t + 1) * d];
                for c in 0..d {
                    if row[c] > out[c] {
                        out[c] = row[c];
                        arg[c] = (base + t) as u32;
                    }
                }
            }
        }
        drop(v);
        Ok(Self::from_op(
            vec![n, d],
            values,
            Op::GroupMax(self.clone(), k, argmax),
        ))
    }

    /// Column-wise max over all rows -> `1 x d`; first argmax wins ties.
    pub fn max_axis0(&self) -> Result<Self, DiffError> {
        let (rows, d) = self.rows_cols("max_axis0")?;
        assert!(rows > 0);
        let v = self.values();
        let mut values = v[..d].to_vec();
        let mut argmax = vec![0u32; d];
        for r in 1..rows {
            let row = &v[r * d..(r + 1) * d];
            for c in 0..d {
                if row[c] > values[c] {
                    values[c] = row[c];
                    argmax[c] = r as u32;
                }
            }
        }
        drop(v);
        Ok(Self::from_op(
            vec![1, d],
            values,
            Op::MaxAxis0(self.clone(), argmax),
        ))
    }

    /// Column-wise mean over all rows -> `1 x d`, accumulated in f64 so the
    /// result is independent of row order at f64 precision.
    pub fn mean_axis0(&self) -> Result<Self, DiffError> {
        let (rows, d) = self.rows_cols("mean_axis0")?;
        assert!(rows > 0);
        let v = self.values();
        let mut sums = vec![0.0f64; d];
        for row in v.chunks(d) {
            for (s, &x) in sums.iter_mut().zip(row) {
                *s += x.into_f64();
            }
        }
        drop(v);
        let values = sums
            .iter()
            .map(|&s| T::from_f64(s / rows as f64))
            .collect();
        Ok(Self::from_op(
            vec![1, d],
            values,
            Op::MeanAxis0(self.clone()),
        ))
    }

    /// Repeats a `1 x d` row `n` times.
    pub fn broadcast_rows(&self, n: usize) -> Result<Self, DiffError> {
        let (one, d) = self.rows_cols("broadcast_rows")?;
        assert_eq!(one, 1, "broadcast_rows expects a single row");
        let v = self.values();
        let mut values = Vec::with_capacity(n * d);
        for _ in 0..n {
            values.extend_from_slice(&v);
        }
        drop(v);
        Ok(Self::from_op(
            vec![n, d],
            values,
            Op::BroadcastRows(self.clone(), n),
        ))
    }

    /// Sum of all entries as a rank-0 scalar (f64 accumulation).
    pub fn sum_all(&self) -> Self {
        let total: f64 = self.values().iter().map(|x| x.into_f64()).sum();
        Self::from_op(vec![], vec![T::from_f64(total)], Op::SumAll(self.clone()))
    }

    /// Mean of all entries as a rank-0 scalar (f64 accumulation).
    pub fn mean_all(&self) -> Self {
        let n = self.len();
        let total: f64 = self.values().iter().map(|x| x.into_f64()).sum();
        Self::from_op(
            vec![],
            vec![T::from_f64(total / n as f64)],
            Op::MeanAll(self.clone()),
        )
    }

    /// Training-mode batch normalization over the row axis with per-channel
    /// scale/shift. Batch statistics are computed in f64; running statistics
    /// are updated in place on the provided arrays with
    /// `running = momentum * running + (1 - momentum) * batch`.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm_train(
        &self,
        scale: &Self,
        shift: &Self,
        running_mean: &Self,
        running_var: &Self,
        momentum: f64,
        eps: f64,
    ) -> Result<Self, DiffError> {
        let (rows, d) = self.rows_cols("batch_norm")?;
        for p in [scale, shift, running_mean, running_var] {
            if p.inner.shape != [d] {
                return Err(DiffError::ShapeMismatch {
                    op: "batch_norm",
                    a: self.inner.shape.clone(),
                    b: p.inner.shape.clone(),
                });
            }
        }
        let v = self.values();
        let mut mean = vec![0.0f64; d];
        let mut var = vec![0.0f64; d];
        for row in v.chunks(d) {
            for (m, &x) in mean.iter_mut().zip(row) {
                *m += x.into_f64();
            }
        }
        for m in &mut mean {
            *m /= rows as f64;
        }
        for row in v.chunks(d) {
            for c in 0..d {
                let delta = row[c].into_f64() - mean[c];
                var[c] += delta * delta;
            }
        }
        for s in &mut var {
            *s /= rows as f64;
        }

        let inv_std: Vec<T> = var
            .iter()
            .map(|&s| T::from_f64(1.0 / (s + eps).sqrt()))
            .collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64(m)).collect();

        let mut xhat = vec![T::zero(); rows * d];
        for (xrow, hrow) in v.chunks(d).zip(xhat.chunks_mut(d)) {
            for c in 0..d {
                hrow[c] = (xrow[c] - mean_t[c]) * inv_std[c];
            }
        }
        drop(v);

        let sc = scale.values();
        let sh = shift.values();
        let mut values = vec![T::zero(); rows * d];
        for (hrow, orow) in xhat.chunks(d).zip(values.chunks_mut(d)) {
            for c in 0..d {
                orow[c] = sc[c] * hrow[c] + sh[c];
            }
        }
        drop(sc);
        drop(sh);

        {
            let mut rm = running_mean.inner.values.borrow_mut();
            let mut rv = running_var.inner.values.borrow_mut();
            let m = T::from_f64(momentum);
            let one_m = T::from_f64(1.0 - momentum);
            for c in 0..d {
                rm[c] = m * rm[c] + one_m * T::from_f64(mean[c]);
                rv[c] = m * rv[c] + one_m * T::from_f64(var[c]);
            }
        }

        Ok(Self::from_op(
            vec![rows, d],
            values,
            Op::BatchNorm {
                x: self.clone(),
                scale: scale.clone(),
                shift: shift.clone(),
                xhat,
                inv_std,
            },
        ))
    }

    /// Inference-mode batch normalization: a pure affine transform using the
    /// frozen running statistics. Produces a leaf (no backward).
    pub fn batch_norm_eval(
        &self,
        scale: &Self,
        shift: &Self,
        running_mean: &Self,
        running_var: &Self,
        eps: f64,
    ) -> Result<Self, DiffError> {
        let (rows, d) = self.rows_cols("batch_norm")?;
        let sc = scale.values();
        let sh = shift.values();
        let rm = running_mean.values();
        let rv = running_var.values();
        let inv_std: Vec<T> = rv
            .iter()
            .map(|&s| T::from_f64(1.0 / (s.into_f64() + eps).sqrt()))
            .collect();
        let v = self.values();
        let mut values = vec![T::zero(); rows * d];
        for (xrow, orow) in v.chunks(d).zip(values.chunks_mut(d)) {
            for c in 0..d {
                orow[c] = sc[c] * (xrow[c] - rm[c]) * inv_std[c] + sh[c];
            }
        }
        drop(v);
        Ok(Self::constant(vec![rows, d], values))
    }

    /// Training-mode inverted dropout with the mask drawn from `rng`;
    /// evaluation mode simply omits this call.
    pub fn dropout_train(&self, rate: f64, rng: &mut impl rand::Rng) -> Self {
        let keep = 1.0 - rate;
        let scale = T::from_f64(1.0 / keep);
        let mask: Vec<T> = (0..self.len())
            .map(|_| {
                if rng.gen_range(0.0..1.0) < keep {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect();
        let values = zip_map(&self.values(), &mask, |x, m| x * m);
        Self::from_op(
            self.inner.shape.clone(),
            values,
            Op::Dropout(self.clone(), mask),
        )
    }

    // ----- backward -----

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
    /// reachable node with `requires_grad`; repeated calls without clearing
    /// keep accumulating.
    pub fn backward(&self) -> Result<(), DiffError> {
        if !self.inner.shape.is_empty() && self.len() != 1 {
            return Err(DiffError::NonScalarLoss {
                shape: self.inner.shape.clone(),
            });
        }
        // Topological order via iterative post-order DFS.
        let mut order: Vec<DiffArray<T>> = Vec::new();
        let mut visited: std::collections::HashSet<u64> = std::collections::HashSet::new();
        let mut stack: Vec<(DiffArray<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.inner.id) || !node.inner.requires_grad {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(op) = &node.inner.op {
                for p in op.parents() {
                    stack.push((p, false));
                }
            }
        }

        accumulate(self, &[T::one()]);
        for node in order.iter().rev() {
            let Some(op) = &node.inner.op else { continue };
            // Interior gradients are consumed exactly once; taking them frees
            // memory as the sweep proceeds.
            let g = node.inner.grad.borrow_mut().take();
            let Some(g) = g else { continue };
            op.backward(node, &g);
        }
        Ok(())
    }
}

/// Adds `delta` into the node's gradient buffer (allocating zeros first).
fn accumulate<T: Scalar>(node: &DiffArray<T>, delta: &[T]) {
    if !node.inner.requires_grad {
        return;
    }
    let mut slot = node.inner.grad.borrow_mut();
    let g = slot.get_or_insert_with(|| vec![T::zero(); node.len()]);
    debug_assert_eq!(g.len(), delta.len());
    for (gi, &d) in g.iter_mut().zip(delta) {
        *gi += d;
    }
}

fn map_buf<T: Scalar>(src: &[T], f: impl Fn(T) -> T + Sync + Send) -> Vec<T> {
    if src.len() >= PAR_ELEMWISE {
        src.par_iter().map(|&x| f(x)).collect()
    } else {
        src.iter().map(|&x| f(x)).collect()
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T + Sync + Send) -> Vec<T> {
    debug_assert_eq!(a.len(), b.len());
    if a.len() >= PAR_ELEMWISE {
        a.par_iter().zip(b.par_iter()).map(|(&x, &y)| f(x, y)).collect()
    } else {
        a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
    }
}

impl<T: Scalar> Op<T> {
    fn parents(&self) -> Vec<DiffArray<T>> {
        match self {
            Op::Add(a, b) | Op::AddBias(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![a.clone(), b.clone()]
            }
            Op::Matmul(a, b) | Op::MatmulNt(a, b) => vec![a.clone(), b.clone()],
            Op::ScalarMul(x, _)
            | Op::Neg(x)
            | Op::Relu(x)
            | Op::Log(x)
            | Op::PowScalar(x, _)
            | Op::Clamp(x, _, _)
            | Op::Softmax(x)
            | Op::GatherRows(x, _)
            | Op::NeighborGather(x, _)
            | Op::RowsRepeat(x, _)
            | Op::GroupMax(x, _, _)
            | Op::MaxAxis0(x, _)
            | Op::MeanAxis0(x)
            | Op::BroadcastRows(x, _)
            | Op::SumAll(x)
            | Op::MeanAll(x)
            | Op::Dropout(x, _) => vec![x.clone()],
            Op::Concat(parts, _) => parts.clone(),
            Op::BatchNorm { x, scale, shift, .. } => {
                vec![x.clone(), scale.clone(), shift.clone()]
            }
        }
    }

    fn backward(&self, out: &DiffArray<T>, g: &[T]) {
        match self {
            Op::Add(a, b) => {
                accumulate(a, g);
                accumulate(b, g);
            }
            Op::AddBias(x, bias) => {
                accumulate(x, g);
                if bias.inner.requires_grad {
                    let d = bias.len();
                    let mut gb = vec![T::zero(); d];
                    for row in g.chunks(d) {
                        for (s, &v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    accumulate(bias, &gb);
                }
            }
            Op::Sub(a, b) => {
                accumulate(a, g);
                if b.inner.requires_grad {
                    let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                    accumulate(b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if a.inner.requires_grad {
                    let ga = zip_map(g, &b.values(), |gi, bi| gi * bi);
                    accumulate(a, &ga);
                }
                if b.inner.requires_grad {
                    let gb = zip_map(g, &a.values(), |gi, ai| gi * ai);
                    accumulate(b, &gb);
                }
            }
            Op::ScalarMul(x, s) => {
                if x.inner.requires_grad {
                    let gx = map_buf(g, |gi| gi * *s);
                    accumulate(x, &gx);
                }
            }
            Op::Neg(x) => {
                if x.inner.requires_grad {
                    let gx = map_buf(g, |gi| -gi);
                    accumulate(x, &gx);
                }
            }
            Op::Relu(x) => {
                if x.inner.requires_grad {
                    let gx = zip_map(g, &x.values(), |gi, xi| {
                        if xi > T::zero() {
                            gi
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(x, &gx);
                }
            }
            Op::Log(x) => {
                if x.inner.requires_grad {
                    let gx = zip_map(g, &x.values(), |gi, xi| gi / xi);
                    accumulate(x, &gx);
                }
            }
            Op::PowScalar(x, p) => {
                if x.inner.requires_grad && *p != T::zero() {
                    let pm1 = *p - T::one();
                    let gx = zip_map(g, &x.values(), |gi, xi| gi * *p * xi.powf(pm1));
                    accumulate(x, &gx);
                }
            }
            Op::Clamp(x, lo, hi) => {
                if x.inner.requires_grad {
                    let gx = zip_map(g, &x.values(), |gi, xi| {
                        if xi > *lo && xi < *hi {
                            gi
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(x, &gx);
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (a.inner.shape[0], a.inner.shape[1]);
                let n = b.inner.shape[1];
                if a.inner.requires_grad {
                    let mut ga = vec![T::zero(); m * k];
                    linalg::matmul_nt_into(&mut ga, g, &b.values(), m, n, k);
                    accumulate(a, &ga);
                }
                if b.inner.requires_grad {
                    let mut gb = vec![T::zero(); k * n];
                    linalg::matmul_tn_into(&mut gb, &a.values(), g, k, m, n);
                    accumulate(b, &gb);
                }
            }
            Op::MatmulNt(a, b) => {
                // out = a * bᵀ with a: m x k, b: n x k.
                let (m, k) = (a.inner.shape[0], a.inner.shape[1]);
                let n = b.inner.shape[0];
                if a.inner.requires_grad {
                    let mut ga = vec![T::zero(); m * k];
                    linalg::matmul_into(&mut ga, g, &b.values(), m, n, k);
                    accumulate(a, &ga);
                }
                if b.inner.requires_grad {
                    let mut gb = vec![T::zero(); n * k];
                    linalg::matmul_tn_into(&mut gb, g, &a.values(), n, m, k);
                    accumulate(b, &gb);
                }
            }
            Op::Softmax(x) => {
                if x.inner.requires_grad {
                    let y = out.values();
                    let d = out.inner.shape[1];
                    let mut gx = vec![T::zero(); g.len()];
                    let rows: Vec<((&[T], &[T]), &mut [T])> =
                        y.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)).collect();
                    let run = |((yrow, grow), orow): ((&[T], &[T]), &mut [T])| {
                        let mut dot = 0.0f64;
                        for (&yv, &gv) in yrow.iter().zip(grow) {
                            dot += (yv * gv).into_f64();
                        }
                        let dot = T::from_f64(dot);
                        for c in 0..yrow.len() {
                            orow[c] = yrow[c] * (grow[c] - dot);
                        }
                    };
                    if g.len() >= PAR_ELEMWISE {
                        rows.into_par_iter().for_each(run);
                    } else {
                        rows.into_iter().for_each(run);
                    }
                    drop(y);
                    accumulate(x, &gx);
                }
            }
            Op::Concat(parts, axis) => {
                if *axis == 0 {
                    let mut offset = 0;
                    for p in parts {
                        let len = p.len();
                        if p.inner.requires_grad {
                            accumulate(p, &g[offset..offset + len]);
                        }
                        offset += len;
                    }
                } else {
                    let rows = out.inner.shape[0];
                    let total_cols = out.inner.shape[1];
                    let mut col_offset = 0;
                    for p in parts {
                        let pc = p.inner.shape[1];
                        if p.inner.requires_grad {
                            let mut gp = vec![T::zero(); rows * pc];
                            for r in 0..rows {
                                gp[r * pc..(r + 1) * pc].copy_from_slice(
                                    &g[r * total_cols + col_offset..r * total_cols + col_offset + pc],
                                );
                            }
                            accumulate(p, &gp);
                        }
                        col_offset += pc;
                    }
                }
            }
            Op::GatherRows(x, indices) => {
                if x.inner.requires_grad {
                    let d = x.inner.shape[1];
                    let mut gx = vec![T::zero(); x.len()];
                    for (r, &i) in indices.iter().enumerate() {
                        let dst = &mut gx[i as usize * d..(i as usize + 1) * d];
                        for (s, &v) in dst.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *s += v;
                        }
                    }
                    accumulate(x, &gx);
                }
            }
            Op::NeighborGather(x, knn) => {
                if x.inner.requires_grad {
                    let d = x.inner.shape[1];
                    let k = knn.k;
                    let mut gx = vec![T::zero(); x.len()];
                    for i in 0..knn.len() {
                        for (t, &j) in knn.row(i).iter().enumerate() {
                            let src = &g[(i * k + t) * d..(i * k + t + 1) * d];
                            let dst = &mut gx[j as usize * d..(j as usize + 1) * d];
                            for (s, &v) in dst.iter_mut().zip(src) {
                                *s += v;
                            }
                        }
                    }
                    accumulate(x, &gx);
                }
            }
            Op::RowsRepeat(x, k) => {
                if x.inner.requires_grad {
                    let d = x.inner.shape[1];
                    let rows = x.inner.shape[0];
                    let mut gx = vec![T::zero(); rows * d];
                    for i in 0..rows {
                        let dst = &mut gx[i * d..(i + 1) * d];
                        for t in 0..*k {
                            let src = &g[(i * k + t) * d..(i * k + t + 1) * d];
                            for (s, &v) in dst.iter_mut().zip(src) {
                                *s += v;
                            }
                        }
                    }
                    accumulate(x, &gx);
                }
            }
            Op::GroupMax(x, _, argmax) => {
                if x.inner.requires_grad {
                    let d = out.inner.shape[1];
                    let mut gx = vec![T::zero(); x.len()];
                    for (oc, (&src_row, &gv)) in argmax.iter().zip(g).enumerate() {
                        let c = oc % d;
                        gx[src_row as usize * d + c] += gv;
                    }
                    accumulate(x, &gx);
                }
            }
            Op::MaxAxis0(x, argmax) => {
                if x.inner.requires_grad {
                    let d = x.inner.shape[1];
                    let mut gx = vec![T::zero(); x.len()];
                    for (c, (&row, &gv)) in argmax.iter().zip(g).enumerate() {
                        gx[row as usize * d + c] += gv;
                    }
                    accumulate(x, &gx);
                }
            }
            Op::MeanAxis0(x) => {
                if x.inner.requires_grad {
                    let d = x.inner.shape[1];
                    let rows = x.inner.shape[0];
                    let scale = T::from_f64(1.0 / rows as f64);
                    let mut gx = vec![T::zero(); rows * d];
                    for row in gx.chunks_mut(d) {
                        for (s, &gv) in row.iter_mut().zip(g) {
                            *s = gv * scale;
                        }
                    }
                    accumulate(x, &gx);
                }
            }
            Op::BroadcastRows(x, n) => {
                if x.inner.requires_grad {
                    let d = x.inner.shape[1];
                    let mut gx = vec![T::zero(); d];
                    for r in 0..*n {
                        for (s, &gv) in gx.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *s += gv;
                        }
                    }
                    accumulate(x, &gx);
                }
            }
            Op::SumAll(x) => {
                if x.inner.requires_grad {
                    let gv = g[0];
                    let gx = vec![gv; x.len()];
                    accumulate(x, &gx);
                }
            }
            Op::MeanAll(x) => {
                if x.inner.requires_grad {
                    let gv = g[0] * T::from_f64(1.0 / x.len() as f64);
                    let gx = vec![gv; x.len()];
                    accumulate(x, &gx);
                }
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            } => {
                let d = x.inner.shape[1];
                let rows = x.inner.shape[0];
                if shift.inner.requires_grad {
                    let mut gsh = vec![T::zero(); d];
                    for row in g.chunks(d) {
                        for (s, &gv) in gsh.iter_mut().zip(row) {
                            *s += gv;
                        }
                    }
                    accumulate(shift, &gsh);
                }
                // Column sums needed for both scale and input gradients.
                let mut sum_g = vec![0.0f64; d];
                let mut sum_g_xhat = vec![0.0f64; d];
                for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                    for c in 0..d {
                        sum_g[c] += grow[c].into_f64();
                        sum_g_xhat[c] += (grow[c] * hrow[c]).into_f64();
                    }
                }
                if scale.inner.requires_grad {
                    let gsc: Vec<T> = sum_g_xhat.iter().map(|&s| T::from_f64(s)).collect();
                    accumulate(scale, &gsc);
                }
                if x.inner.requires_grad {
                    let sc = scale.values();
                    let n = T::from_f64(rows as f64);
                    let inv_n = T::from_f64(1.0 / rows as f64);
                    let mut gx = vec![T::zero(); rows * d];
                    for ((grow, hrow), orow) in
                        g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d))
                    {
                        for c in 0..d {
                            let sg = T::from_f64(sum_g[c]);
                            let sgx = T::from_f64(sum_g_xhat[c]);
                            orow[c] = sc[c] * inv_std[c] * inv_n
                                * (n * grow[c] - sg - hrow[c] * sgx);
                        }
                    }
                    drop(sc);
                    accumulate(x, &gx);
                }
            }
            Op::Dropout(x, mask) => {
                if x.inner.requires_grad {
                    let gx = zip_map(g, mask, |gi, m| gi * m);
                    accumulate(x, &gx);
                }
            }
        }
    }
}
