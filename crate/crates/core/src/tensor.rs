//! Dense row-major tensors and the numeric kernels the rest of the engine is
//! built on.
//!
//! Storage is shared behind an `Arc`, so cloning a tensor (for example when a
//! graph node saves an activation) never copies data. Tensors are immutable
//! once constructed.

use std::fmt::{self, Debug, Display};
use std::sync::Arc;

use num_traits::Float;
use rayon::prelude::*;
use thiserror::Error;

/// Errors raised by tensor construction and kernels.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} elements but {actual} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape {0:?} has a zero-length axis")]
    EmptyAxis(Vec<usize>),
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    DimMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for axis extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("{op}: indices must be strictly increasing, found {prev} followed by {next}")]
    NonIncreasing {
        op: &'static str,
        prev: usize,
        next: usize,
    },
    #[error("{op}: non-finite value at flat offset {offset}")]
    NonFinite { op: &'static str, offset: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Anything that can be stored in a [`Tensor`].
pub trait Element: Copy + Send + Sync + Debug + PartialEq + 'static {
    fn is_finite_elem(self) -> bool;
}

impl Element for usize {
    fn is_finite_elem(self) -> bool {
        true
    }
}

impl Element for u32 {
    fn is_finite_elem(self) -> bool {
        true
    }
}

/// Engine-wide floating point precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::F32 => f.write_str("f32"),
            Precision::F64 => f.write_str("f64"),
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            other => Err(format!("unknown precision `{other}` (expected f32 or f64)")),
        }
    }
}

/// Real scalar type the numeric kernels operate on.
pub trait Scalar:
    Element
    + Float
    + Default
    + Display
    + PartialOrd
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
{
    const PRECISION: Precision;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c = a * b + beta * c` on raw strided operands.
    ///
    /// # Safety
    /// All strided accesses implied by the extents must be in bounds.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Element for f32 {
    fn is_finite_elem(self) -> bool {
        self.is_finite()
    }
}

impl Element for f64 {
    fn is_finite_elem(self) -> bool {
        self.is_finite()
    }
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;

    fn from_f64(x: f64) -> Self {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Dense n-dimensional array, row-major and contiguous.
#[derive(Clone, PartialEq)]
pub struct Tensor<E = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
}

impl<E: Debug> Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("len", &self.data.len())
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite<E: Element>(op: &'static str, data: &[E]) -> Result<()> {
    match data.iter().position(|x| !x.is_finite_elem()) {
        Some(offset) => Err(TensorError::NonFinite { op, offset }),
        None => Ok(()),
    }
}

fn check_indices(op: &'static str, keep: &[usize], extent: usize) -> Result<()> {
    for w in keep.windows(2) {
        if w[1] <= w[0] {
            return Err(TensorError::NonIncreasing {
                op,
                prev: w[0],
                next: w[1],
            });
        }
    }
    if let Some(&last) = keep.last() {
        if last >= extent {
            return Err(TensorError::IndexOutOfRange {
                op,
                index: last,
                extent,
            });
        }
    }
    Ok(())
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let expected = numel(&shape);
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if shape.contains(&0) {
            return Err(TensorError::EmptyAxis(shape));
        }
        check_finite("new", &data)?;
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    /// Builds a tensor from kernel output that is known to be well-formed.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<E>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn filled(shape: Vec<usize>, value: E) -> Result<Self> {
        let n = numel(&shape);
        Self::new(shape, vec![value; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<E> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// True when both tensors share the same storage.
    pub fn shares_storage(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<()> {
        if axis >= self.rank() {
            return Err(TensorError::AxisOutOfRange {
                op,
                axis,
                shape: self.shape.clone(),
            });
        }
        Ok(())
    }

    /// Metadata-only reshape.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        if numel(&shape) != self.numel() {
            return Err(TensorError::DimMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        if shape.contains(&0) {
            return Err(TensorError::EmptyAxis(shape));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    /// Swaps two axes, materializing the result contiguously.
    pub fn transpose(&self, a0: usize, a1: usize) -> Result<Self> {
        self.check_axis("transpose", a0)?;
        self.check_axis("transpose", a1)?;
        if a0 == a1 {
            return Ok(self.clone());
        }
        let (lo, hi) = if a0 < a1 { (a0, a1) } else { (a1, a0) };
        let s = &self.shape;
        let pre = numel(&s[..lo]);
        let d_lo = s[lo];
        let mid = numel(&s[lo + 1..hi]);
        let d_hi = s[hi];
        let post = numel(&s[hi + 1..]);
        let src = &self.data;
        let mut out = Vec::with_capacity(src.len());
        // output layout: [pre, d_hi, mid, d_lo, post]
        for p in 0..pre {
            for h in 0..d_hi {
                for m in 0..mid {
                    for l in 0..d_lo {
                        let off = (((p * d_lo + l) * mid + m) * d_hi + h) * post;
                        out.extend_from_slice(&src[off..off + post]);
                    }
                }
            }
        }
        let mut shape = s.clone();
        shape.swap(lo, hi);
        Ok(Tensor::from_parts(shape, out))
    }

    /// Copies the slices at `keep` (strictly increasing) along `axis`.
    pub fn gather_axis(&self, axis: usize, keep: &[usize]) -> Result<Self> {
        self.check_axis("gather_axis", axis)?;
        check_indices("gather_axis", keep, self.shape[axis])?;
        if keep.is_empty() {
            let mut shape = self.shape.clone();
            shape[axis] = 0;
            return Err(TensorError::EmptyAxis(shape));
        }
        let (outer, extent, inner) = split_at_axis(&self.shape, axis);
        let mut out = Vec::with_capacity(outer * keep.len() * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            for &k in keep {
                let off = base + k * inner;
                out.extend_from_slice(&self.data[off..off + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = keep.len();
        Ok(Tensor::from_parts(shape, out))
    }

    /// Gathers along `axis` with a separate index list for every position of
    /// `batch_axis`. All lists must have the same length.
    pub fn gather_axis_batched(
        &self,
        batch_axis: usize,
        axis: usize,
        keep: &[Vec<usize>],
    ) -> Result<Self> {
        self.gather_batched_impl("gather_axis_batched", batch_axis, &[axis], keep)
    }

    /// Like [`Tensor::gather_axis_batched`] but applies the same per-batch
    /// lists to every axis in `axes` at once (e.g. both key and query axes of
    /// an attention matrix).
    pub fn gather_axes_batched(
        &self,
        batch_axis: usize,
        axes: &[usize],
        keep: &[Vec<usize>],
    ) -> Result<Self> {
        self.gather_batched_impl("gather_axes_batched", batch_axis, axes, keep)
    }

    fn gather_batched_impl(
        &self,
        op: &'static str,
        batch_axis: usize,
        axes: &[usize],
        keep: &[Vec<usize>],
    ) -> Result<Self> {
        self.check_axis(op, batch_axis)?;
        if keep.len() != self.shape[batch_axis] {
            return Err(TensorError::DimMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: vec![keep.len()],
            });
        }
        for &axis in axes {
            self.check_axis(op, axis)?;
            if axis <= batch_axis {
                return Err(TensorError::AxisOutOfRange {
                    op,
                    axis,
                    shape: self.shape.clone(),
                });
            }
        }
        let width = keep.first().map_or(0, Vec::len);
        for list in keep {
            if list.len() != width {
                return Err(TensorError::DimMismatch {
                    op,
                    lhs: vec![width],
                    rhs: vec![list.len()],
                });
            }
            for &axis in axes {
                check_indices(op, list, self.shape[axis])?;
            }
        }
        let mut out_shape = self.shape.clone();
        for &axis in axes {
            out_shape[axis] = width;
        }
        if width == 0 {
            return Err(TensorError::EmptyAxis(out_shape));
        }
        let outer = numel(&self.shape[..batch_axis]);
        let in_block = numel(&self.shape[batch_axis + 1..]);
        let out_block = numel(&out_shape[batch_axis + 1..]);
        let sub_in = &self.shape[batch_axis + 1..];
        let mut reduce = vec![false; sub_in.len()];
        for &a in axes {
            reduce[a - batch_axis - 1] = true;
        }
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for (b, list) in keep.iter().enumerate() {
                let base = (o * keep.len() + b) * in_block;
                gather_block(
                    &self.data[base..base + in_block],
                    sub_in,
                    &reduce,
                    list,
                    &mut out,
                );
            }
        }
        debug_assert_eq!(out.len(), outer * keep.len() * out_block);
        Ok(Tensor::from_parts(out_shape, out))
    }

    /// Inverse of [`Tensor::gather_axis_batched`]: places this tensor's slices
    /// at `keep` positions of an axis of length `extent`, filling the rest with
    /// `fill`.
    pub fn scatter_axis_batched(
        &self,
        batch_axis: usize,
        axis: usize,
        keep: &[Vec<usize>],
        extent: usize,
        fill: E,
    ) -> Result<Self> {
        const OP: &str = "scatter_axis_batched";
        self.check_axis(OP, batch_axis)?;
        self.check_axis(OP, axis)?;
        if axis <= batch_axis || keep.len() != self.shape[batch_axis] {
            return Err(TensorError::DimMismatch {
                op: OP,
                lhs: self.shape.clone(),
                rhs: vec![keep.len()],
            });
        }
        for list in keep {
            if list.len() != self.shape[axis] {
                return Err(TensorError::DimMismatch {
                    op: OP,
                    lhs: self.shape.clone(),
                    rhs: vec![list.len()],
                });
            }
            check_indices(OP, list, extent)?;
        }
        let mut out_shape = self.shape.clone();
        out_shape[axis] = extent;
        let outer = numel(&self.shape[..batch_axis]);
        let bsz = keep.len();
        let mid = numel(&self.shape[batch_axis + 1..axis]);
        let inner = numel(&self.shape[axis + 1..]);
        let kept = self.shape[axis];
        let mut out = vec![fill; numel(&out_shape)];
        for o in 0..outer {
            for (b, list) in keep.iter().enumerate() {
                for m in 0..mid {
                    let src_base = ((o * bsz + b) * mid + m) * kept * inner;
                    let dst_base = ((o * bsz + b) * mid + m) * extent * inner;
                    for (j, &pos) in list.iter().enumerate() {
                        let s = src_base + j * inner;
                        let d = dst_base + pos * inner;
                        out[d..d + inner].copy_from_slice(&self.data[s..s + inner]);
                    }
                }
            }
        }
        Ok(Tensor::from_parts(out_shape, out))
    }

    /// Inverse of [`Tensor::gather_axis`].
    pub fn scatter_axis(
        &self,
        axis: usize,
        keep: &[usize],
        extent: usize,
        fill: E,
    ) -> Result<Self> {
        const OP: &str = "scatter_axis";
        self.check_axis(OP, axis)?;
        if keep.len() != self.shape[axis] {
            return Err(TensorError::DimMismatch {
                op: OP,
                lhs: self.shape.clone(),
                rhs: vec![keep.len()],
            });
        }
        check_indices(OP, keep, extent)?;
        let (outer, kept, inner) = split_at_axis(&self.shape, axis);
        let mut out_shape = self.shape.clone();
        out_shape[axis] = extent;
        let mut out = vec![fill; numel(&out_shape)];
        for o in 0..outer {
            for (j, &pos) in keep.iter().enumerate() {
                let s = (o * kept + j) * inner;
                let d = (o * extent + pos) * inner;
                out[d..d + inner].copy_from_slice(&self.data[s..s + inner]);
            }
        }
        Ok(Tensor::from_parts(out_shape, out))
    }

    /// Copies `len` slices starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        self.check_axis("narrow", axis)?;
        let extent = self.shape[axis];
        if len == 0 || start + len > extent {
            return Err(TensorError::IndexOutOfRange {
                op: "narrow",
                index: start + len,
                extent,
            });
        }
        let keep: Vec<usize> = (start..start + len).collect();
        self.gather_axis(axis, &keep)
    }
}

fn gather_block<E: Element>(
    src: &[E],
    shape: &[usize],
    reduce: &[bool],
    keep: &[usize],
    out: &mut Vec<E>,
) {
    // Recursive copy over the leading axis of `shape`.
    let Some(last) = reduce.iter().rposition(|&r| r) else {
        out.extend_from_slice(src);
        return;
    };
    let inner = numel(&shape[1..]);
    if last == 0 {
        for &k in keep {
            out.extend_from_slice(&src[k * inner..(k + 1) * inner]);
        }
        return;
    }
    if last == 1 && inner == shape[1] {
        // trailing reduced axis: element gather per row
        let rows = keep.len() * usize::from(reduce[0]) + shape[0] * usize::from(!reduce[0]);
        out.reserve(rows * keep.len());
        let mut row = |i: usize| {
            let r = &src[i * inner..(i + 1) * inner];
            out.extend(keep.iter().map(|&k| r[k]));
        };
        if reduce[0] {
            keep.iter().for_each(|&i| row(i));
        } else {
            (0..shape[0]).for_each(row);
        }
        return;
    }
    let mut visit = |i: usize| {
        gather_block(
            &src[i * inner..(i + 1) * inner],
            &shape[1..],
            &reduce[1..],
            keep,
            out,
        )
    };
    if reduce[0] {
        keep.iter().for_each(|&i| visit(i));
    } else {
        (0..shape[0]).for_each(visit);
    }
}

/// Row-major operand view passed to the GEMM driver.
#[derive(Clone, Copy)]
struct MatView<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    transposed: bool,
}

impl<'a, T> MatView<'a, T> {
    fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatView {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    fn t(self) -> Self {
        MatView {
            transposed: !self.transposed,
            ..self
        }
    }

    /// Logical (rows, cols) after the optional transpose.
    fn dims(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    /// Strides of the logical matrix.
    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

fn softmax_row<T: Scalar>(r: &mut [T]) {
    let mx = r.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut total = T::zero();
    for x in r.iter_mut() {
        *x = (*x - mx).exp();
        total += *x;
    }
    let inv = T::one() / total;
    for x in r.iter_mut() {
        *x *= inv;
    }
}

/// Below this many multiply-adds a GEMM runs on the calling thread.
const PAR_GEMM_MIN_WORK: usize = 1 << 22;

fn gemm_into<T: Scalar>(a: MatView<'_, T>, b: MatView<'_, T>, c: &mut [T], accumulate: bool) {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    debug_assert_eq!(k, k2);
    debug_assert_eq!(c.len(), m * n);
    assert!(a.data.len() >= a.rows * a.cols && b.data.len() >= b.rows * b.cols);
    let beta = if accumulate { T::one() } else { T::zero() };
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let threads = rayon::current_num_threads();
    if threads <= 1 || m * n * k < PAR_GEMM_MIN_WORK || m < 2 * threads {
        // SAFETY: extents were checked against slice lengths above.
        unsafe {
            T::gemm_raw(
                m,
                k,
                n,
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        return;
    }
    // Row blocks of C are independent; each element's accumulation order is
    // the same regardless of how rows are split.
    let rows_per = m.div_ceil(threads);
    c.par_chunks_mut(rows_per * n)
        .enumerate()
        .for_each(|(i, chunk)| {
            let r0 = i * rows_per;
            let rows = chunk.len() / n;
            let a_off = r0 as isize * rsa;
            // SAFETY: row block [r0, r0 + rows) lies inside A; chunk is exactly rows x n.
            unsafe {
                T::gemm_raw(
                    rows,
                    k,
                    n,
                    a.data.as_ptr().offset(a_off),
                    rsa,
                    csa,
                    b.data.as_ptr(),
                    rsb,
                    csb,
                    beta,
                    chunk.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        });
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        Self::filled(shape, T::zero())
    }

    pub fn scalar(value: T) -> Result<Self> {
        Self::new(vec![], vec![value])
    }

    pub fn eye(n: usize) -> Result<Self> {
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = T::one();
        }
        Self::new(vec![n, n], data)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    fn finish(op: &'static str, shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_finite(op, &data)?;
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        check_finite(op, &self.data)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    fn matrix_view(&self, op: &'static str, transposed: bool) -> Result<MatView<'_, T>> {
        if self.rank() != 2 {
            return Err(TensorError::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            });
        }
        Ok(MatView {
            data: &self.data,
            rows: self.shape[0],
            cols: self.shape[1],
            transposed,
        })
    }

    fn gemm2d(op: &'static str, a: &Self, ta: bool, b: &Self, tb: bool) -> Result<Self> {
        let va = a.matrix_view(op, ta)?;
        let vb = b.matrix_view(op, tb)?;
        let (m, k) = va.dims();
        let (k2, n) = vb.dims();
        if k != k2 {
            return Err(TensorError::DimMismatch {
                op,
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm_into(va, vb, &mut out, false);
        Self::finish(op, vec![m, n], out)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        Self::gemm2d("matmul", self, false, rhs, false)
    }

    /// `selfᵀ x rhs` without materializing the transpose.
    pub fn matmul_tn(&self, rhs: &Self) -> Result<Self> {
        Self::gemm2d("matmul_tn", self, true, rhs, false)
    }

    /// `self x rhsᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, rhs: &Self) -> Result<Self> {
        Self::gemm2d("matmul_nt", self, false, rhs, true)
    }

    /// Batched product over leading axes with broadcasting of extent-1 axes.
    pub fn batched_matmul(&self, rhs: &Self) -> Result<Self> {
        self.batched_matmul_ex(false, rhs, false)
    }

    /// Batched product where either operand's last two axes may be
    /// transposed on the fly.
    pub fn batched_matmul_ex(&self, ta: bool, rhs: &Self, tb: bool) -> Result<Self> {
        const OP: &str = "batched_matmul";
        if self.rank() < 2 || rhs.rank() < 2 {
            return Err(TensorError::Rank {
                op: OP,
                expected: 3,
                shape: if self.rank() < 2 {
                    self.shape.clone()
                } else {
                    rhs.shape.clone()
                },
            });
        }
        let mismatch = || TensorError::DimMismatch {
            op: OP,
            lhs: self.shape.clone(),
            rhs: rhs.shape.clone(),
        };
        let (ar, ac) = (self.shape[self.rank() - 2], self.shape[self.rank() - 1]);
        let (br, bc) = (rhs.shape[rhs.rank() - 2], rhs.shape[rhs.rank() - 1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(mismatch());
        }
        let a_batch = &self.shape[..self.rank() - 2];
        let b_batch = &rhs.shape[..rhs.rank() - 2];
        let rank = a_batch.len().max(b_batch.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a_batch), pad(b_batch));
        let mut out_batch = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(mismatch());
            }
            out_batch.push(x.max(y));
        }
        let nb = numel(&out_batch);
        // flat batch offsets into each operand, honoring broadcast axes
        let offsets = |padded: &[usize]| -> Vec<usize> {
            let mut strides = vec![0usize; rank];
            let mut acc = 1;
            for i in (0..rank).rev() {
                strides[i] = if padded[i] == 1 { 0 } else { acc };
                acc *= padded[i];
            }
            (0..nb)
                .map(|mut flat| {
                    let mut off = 0;
                    for i in (0..rank).rev() {
                        let idx = flat % out_batch[i];
                        flat /= out_batch[i];
                        off += idx * strides[i];
                    }
                    off
                })
                .collect()
        };
        let (oa, ob) = (offsets(&pa), offsets(&pb));
        let (sa, sb) = (ar * ac, br * bc);
        let mut out = vec![T::zero(); nb * m * n];
        let job = |(i, chunk): (usize, &mut [T])| {
            let va = MatView {
                data: &self.data[oa[i] * sa..(oa[i] + 1) * sa],
                rows: ar,
                cols: ac,
                transposed: ta,
            };
            let vb = MatView {
                data: &rhs.data[ob[i] * sb..(ob[i] + 1) * sb],
                rows: br,
                cols: bc,
                transposed: tb,
            };
            gemm_into(va, vb, chunk, false);
        };
        if rayon::current_num_threads() > 1 && nb > 1 {
            out.par_chunks_mut(m * n).enumerate().for_each(job);
        } else {
            out.chunks_mut(m * n).enumerate().for_each(job);
        }
        let mut shape = out_batch;
        shape.extend_from_slice(&[m, n]);
        Self::finish(OP, shape, out)
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_lastdim(&self) -> Result<Self> {
        self.ensure_finite("softmax_lastdim")?;
        let width = *self.shape.last().unwrap_or(&1);
        let mut out = self.data.to_vec();
        let row = softmax_row::<T>;
        if rayon::current_num_threads() > 1 && out.len() > 1 << 16 {
            out.par_chunks_mut(width).for_each(row);
        } else {
            out.chunks_mut(width).for_each(row);
        }
        Self::finish("softmax_lastdim", self.shape.clone(), out)
    }

    fn attention_dims(
        op: &'static str,
        q: &Self,
        k: &Self,
        v: &Self,
    ) -> Result<(usize, usize, usize, usize)> {
        let r = q.rank();
        let bad = || TensorError::DimMismatch {
            op,
            lhs: q.shape.clone(),
            rhs: k.shape.clone(),
        };
        if r < 2
            || k.shape != v.shape
            || k.rank() != r
            || q.shape[..r - 2] != k.shape[..r - 2]
            || q.shape[r - 1] != k.shape[r - 1]
        {
            return Err(bad());
        }
        let (sq, sk, d) = (q.shape[r - 2], k.shape[r - 2], q.shape[r - 1]);
        Ok((numel(&q.shape[..r - 2]), sq, sk, d))
    }

    /// Scaled dot-product attention over the trailing `[s, d]` blocks of
    /// queries, keys and values. With `causal_fill`, that value is added above
    /// the diagonal of the scores before the softmax. Returns the
    /// probabilities `[.., sq, sk]` and the output `[.., sq, d]`.
    pub fn attention(
        q: &Self,
        k: &Self,
        v: &Self,
        scale: T,
        causal_fill: Option<T>,
    ) -> Result<(Self, Self)> {
        const OP: &str = "attention";
        let (nb, sq, sk, d) = Self::attention_dims(OP, q, k, v)?;
        let mut probs = vec![T::zero(); nb * sq * sk];
        let mut out = vec![T::zero(); nb * sq * d];
        let job = |(i, (p, o)): (usize, (&mut [T], &mut [T]))| {
            let qb = MatView::new(&q.data[i * sq * d..(i + 1) * sq * d], sq, d);
            let kb = MatView::new(&k.data[i * sk * d..(i + 1) * sk * d], sk, d);
            let vb = MatView::new(&v.data[i * sk * d..(i + 1) * sk * d], sk, d);
            gemm_into(qb, kb.t(), p, false);
            for (row, r) in p.chunks_mut(sk).enumerate() {
                for x in r.iter_mut() {
                    *x *= scale;
                }
                if let Some(fill) = causal_fill {
                    for x in r.iter_mut().skip(row + 1) {
                        *x += fill;
                    }
                }
                softmax_row(r);
            }
            gemm_into(MatView::new(p, sq, sk), vb, o, false);
        };
        if rayon::current_num_threads() > 1 && nb > 1 {
            probs
                .par_chunks_mut(sq * sk)
                .zip(out.par_chunks_mut(sq * d))
                .enumerate()
                .for_each(job);
        } else {
            probs
                .chunks_mut(sq * sk)
                .zip(out.chunks_mut(sq * d))
                .enumerate()
                .for_each(job);
        }
        let lead = &q.shape[..q.rank() - 2];
        let probs = Self::finish(OP, [lead, &[sq, sk]].concat(), probs)?;
        let out = Self::finish(OP, [lead, &[sq, d]].concat(), out)?;
        Ok((probs, out))
    }

    /// Gradients of [`Tensor::attention`] with respect to queries, keys and
    /// values, given the saved probabilities and the output gradient. Works
    /// one `[sq, sk]` block at a time.
    pub fn attention_backward(
        q: &Self,
        k: &Self,
        v: &Self,
        probs: &Self,
        grad: &Self,
        scale: T,
    ) -> Result<(Self, Self, Self)> {
        const OP: &str = "attention_backward";
        let (nb, sq, sk, d) = Self::attention_dims(OP, q, k, v)?;
        let lead = &q.shape[..q.rank() - 2];
        if probs.shape != [lead, &[sq, sk]].concat() || grad.shape != q.shape {
            return Err(TensorError::DimMismatch {
                op: OP,
                lhs: probs.shape.clone(),
                rhs: grad.shape.clone(),
            });
        }
        let mut gq = vec![T::zero(); nb * sq * d];
        let mut gk = vec![T::zero(); nb * sk * d];
        let mut gv = vec![T::zero(); nb * sk * d];
        let job = |(i, ((gq, gk), gv)): (usize, ((&mut [T], &mut [T]), &mut [T]))| {
            let qb = MatView::new(&q.data[i * sq * d..(i + 1) * sq * d], sq, d);
            let kb = MatView::new(&k.data[i * sk * d..(i + 1) * sk * d], sk, d);
            let vb = MatView::new(&v.data[i * sk * d..(i + 1) * sk * d], sk, d);
            let p = &probs.data[i * sq * sk..(i + 1) * sq * sk];
            let g = MatView::new(&grad.data[i * sq * d..(i + 1) * sq * d], sq, d);
            gemm_into(MatView::new(p, sq, sk).t(), g, gv, false);
            let mut gs = vec![T::zero(); sq * sk];
            gemm_into(g, vb.t(), &mut gs, false);
            for (gr, pr) in gs.chunks_mut(sk).zip(p.chunks(sk)) {
                let mut dot = T::zero();
                for (&pi, &gi) in pr.iter().zip(gr.iter()) {
                    dot += pi * gi;
                }
                for (gi, &pi) in gr.iter_mut().zip(pr) {
                    *gi = pi * (*gi - dot) * scale;
                }
            }
            let gs = MatView::new(&gs, sq, sk);
            gemm_into(gs, kb, gq, false);
            gemm_into(gs.t(), qb, gk, false);
        };
        if rayon::current_num_threads() > 1 && nb > 1 {
            gq.par_chunks_mut(sq * d)
                .zip(gk.par_chunks_mut(sk * d))
                .zip(gv.par_chunks_mut(sk * d))
                .enumerate()
                .for_each(job);
        } else {
            gq.chunks_mut(sq * d)
                .zip(gk.chunks_mut(sk * d))
                .zip(gv.chunks_mut(sk * d))
                .enumerate()
                .for_each(job);
        }
        Ok((
            Self::finish(OP, q.shape.clone(), gq)?,
            Self::finish(OP, k.shape.clone(), gk)?,
            Self::finish(OP, v.shape.clone(), gv)?,
        ))
    }

    /// Converts to another precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect();
        Tensor::new(self.shape.clone(), data).expect("same shape")
    }

    pub fn map(&self, op: &'static str, f: impl Fn(T) -> T + Sync) -> Result<Self> {
        let out: Vec<T> = self.data.iter().map(|&x| f(x)).collect();
        Self::finish(op, self.shape.clone(), out)
    }

    fn zip_same(&self, rhs: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != rhs.shape {
            return Err(TensorError::DimMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let out = self
            .data
            .iter()
            .zip(rhs.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::finish(op, self.shape.clone(), out)
    }

    /// Elementwise sum. `rhs` may also be a trailing suffix of `self`'s shape,
    /// in which case it is broadcast over the leading axes.
    pub fn add(&self, rhs: &Self) -> Result<Self> {
        if self.shape == rhs.shape {
            return self.zip_same(rhs, "add", |a, b| a + b);
        }
        let r = rhs.rank();
        if r > self.rank() || self.shape[self.rank() - r..] != rhs.shape[..] {
            return Err(TensorError::DimMismatch {
                op: "add",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let period = rhs.numel();
        let out = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &a)| a + rhs.data[i % period])
            .collect();
        Self::finish("add", self.shape.clone(), out)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.zip_same(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Self) -> Result<Self> {
        self.zip_same(rhs, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: T) -> Result<Self> {
        self.map("scale", |x| x * factor)
    }

    /// Sums away leading axes so the result has shape `target`, which must be
    /// a trailing suffix of this tensor's shape.
    pub fn sum_to_suffix(&self, target: &[usize]) -> Result<Self> {
        let r = target.len();
        if r > self.rank() || self.shape[self.rank() - r..] != target[..] {
            return Err(TensorError::DimMismatch {
                op: "sum_to_suffix",
                lhs: self.shape.clone(),
                rhs: target.to_vec(),
            });
        }
        let period = numel(target);
        let mut out = vec![T::zero(); period];
        for chunk in self.data.chunks(period) {
            for (o, &x) in out.iter_mut().zip(chunk) {
                *o += x;
            }
        }
        Self::finish("sum_to_suffix", target.to_vec(), out)
    }

    pub fn sum_all(&self) -> T {
        let mut acc = T::zero();
        for &x in self.data.iter() {
            acc += x;
        }
        acc
    }

    pub fn mean_all(&self) -> T {
        self.sum_all() / T::from_f64(self.numel() as f64)
    }

    /// Sum over the last axis.
    pub fn row_sum(&self) -> Result<Self> {
        let width = *self.shape.last().unwrap_or(&1);
        let out = self
            .data
            .chunks(width)
            .map(|r| r.iter().copied().sum())
            .collect();
        let shape = self.shape[..self.rank().saturating_sub(1)].to_vec();
        Self::finish("row_sum", shape, out)
    }

    /// Mean over the last axis.
    pub fn row_mean(&self) -> Result<Self> {
        let width = *self.shape.last().unwrap_or(&1);
        let inv = T::one() / T::from_f64(width as f64);
        self.row_sum()?.scale(inv)
    }

    /// Looks up rows of a `[vocab, dim]` table.
    pub fn embedding(&self, ids: &Tensor<usize>) -> Result<Self> {
        const OP: &str = "embedding";
        let table = self.matrix_view(OP, false)?;
        let (vocab, dim) = (table.rows, table.cols);
        let mut out = Vec::with_capacity(ids.numel() * dim);
        for &id in ids.data() {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: OP,
                    index: id,
                    extent: vocab,
                });
            }
            out.extend_from_slice(&self.data[id * dim..(id + 1) * dim]);
        }
        let mut shape = ids.shape.clone();
        shape.push(dim);
        Self::finish(OP, shape, out)
    }

    /// Accumulates rows of `grad` (`[..., dim]`) into a `[vocab, dim]` table
    /// at `ids`, in flat index order.
    pub fn index_add_rows(ids: &Tensor<usize>, grad: &Self, vocab: usize) -> Result<Self> {
        const OP: &str = "index_add_rows";
        let dim = *grad.shape.last().unwrap_or(&1);
        if grad.numel() != ids.numel() * dim {
            return Err(TensorError::DimMismatch {
                op: OP,
                lhs: ids.shape.clone(),
                rhs: grad.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); vocab * dim];
        for (row, &id) in grad.data.chunks(dim).zip(ids.data()) {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: OP,
                    index: id,
                    extent: vocab,
                });
            }
            for (o, &g) in out[id * dim..(id + 1) * dim].iter_mut().zip(row) {
                *o += g;
            }
        }
        Self::finish(OP, vec![vocab, dim], out)
    }
}
