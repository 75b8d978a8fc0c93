use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Element type of the autodiff engine.
///
/// Training and inference run in `f32`; the finite-difference gradient checks
/// build the same networks in `f64`.
pub trait Scalar:
    Float + AddAssign + SubAssign + MulAssign + Default + Debug + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` with explicit row/column strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n`
    /// matrices that do not alias `c`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
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

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major matrix operand for [`matmul`]: `rows x cols` as seen by the
/// product, optionally stored transposed.
#[derive(Clone, Copy)]
pub struct MatRef<'a, F> {
    pub data: &'a [F],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, F> MatRef<'a, F> {
    pub fn new(data: &'a [F], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, transposed: false }
    }

    /// Interprets `data` (stored as `cols x rows`) as its transpose.
    pub fn t(data: &'a [F], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, transposed: true }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out (+)= a * b`, with `out` a row-major `a.rows x b.cols` buffer.
pub fn matmul<F: Scalar>(a: MatRef<'_, F>, b: MatRef<'_, F>, out: &mut [F], accumulate: bool) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert!(a.data.len() >= a.rows * a.cols);
    assert!(b.data.len() >= b.rows * b.cols);
    assert!(out.len() >= a.rows * b.cols);
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: lengths checked above; `out` is a distinct mutable slice.
    unsafe {
        F::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            F::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

/// Dense NCHW tensor. Vectors and matrices use trailing unit dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    pub shape: [usize; 4],
    pub data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { shape, data: vec![F::zero(); shape.iter().product()] }
    }

    pub fn full(shape: [usize; 4], v: F) -> Self {
        Self { shape, data: vec![v; shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<F>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?} does not match data");
        Self { shape, data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    pub fn w(&self) -> usize {
        self.shape[3]
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn item(&self, n: usize) -> &[F] {
        let l = self.item_len();
        &self.data[n * l..(n + 1) * l]
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| G::of(v.as_f64())).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> F {
        self.data.iter().fold(F::zero(), |m, v| m.max(v.abs()))
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|v| v.as_f64()).sum::<f64>() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Stacks single-item tensors along the batch axis.
    pub fn stack(items: &[Tensor<F>]) -> Self {
        assert!(!items.is_empty(), "cannot stack zero tensors");
        let [_, c, h, w] = items[0].shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        for t in items {
            assert_eq!(&t.shape[1..], &[c, h, w], "stacked tensors must share item shape");
            data.extend_from_slice(&t.data);
        }
        let n = data.len() / (c * h * w);
        Self::from_vec([n, c, h, w], data)
    }

    /// Batch item `n` as a single-item tensor.
    pub fn select(&self, n: usize) -> Self {
        let [_, c, h, w] = self.shape;
        Self::from_vec([1, c, h, w], self.item(n).to_vec())
    }

    /// Mean absolute difference against `other`.
    pub fn l1_distance(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).sum();
        s / self.numel().max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_handles_transposed_operands() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        matmul(MatRef::new(&a, 2, 2), MatRef::new(&b, 2, 2), &mut out, false);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
        // a^T * b
        matmul(MatRef::t(&a, 2, 2), MatRef::new(&b, 2, 2), &mut out, false);
        assert_eq!(out, [26.0, 30.0, 38.0, 44.0]);
        // accumulate a * b^T
        matmul(MatRef::new(&a, 2, 2), MatRef::t(&b, 2, 2), &mut out, true);
        assert_eq!(out, [26.0 + 17.0, 30.0 + 23.0, 38.0 + 39.0, 44.0 + 53.0]);
    }

    #[test]
    fn stack_and_select_are_inverse() {
        let a = Tensor::<f32>::from_vec([1, 2, 1, 1], vec![1.0, 2.0]);
        let b = Tensor::<f32>::from_vec([1, 2, 1, 1], vec![3.0, 4.0]);
        let s = Tensor::stack(&[a.clone(), b.clone()]);
        assert_eq!(s.shape, [2, 2, 1, 1]);
        assert_eq!(s.select(0), a);
        assert_eq!(s.select(1), b);
    }
}
