//! Row-major dense matrices and the GEMM entry points everything else is built on.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating point element type. Training runs in `f32`; gradient checks use `f64`.
pub trait Scalar:
    Float + Default + Debug + Send + Sync + AddAssign + SubAssign + MulAssign + DivAssign + Sum + 'static
{
    /// `C <- alpha * A * B + beta * C` over strided operands.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, in-bounds matrices; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
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

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn from_f64(v: f64) -> f32 {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn from_f64(v: f64) -> f64 {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Mat<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![F::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: F) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec: {rows}x{cols} needs {} values", rows * cols);
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> F) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Stacks row slices (all of equal width) into a matrix.
    pub fn from_rows(rows: &[&[F]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols);
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[F] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<F> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: F) {
        self.data[r * self.cols + c] = v;
    }

    /// Copy of rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self::from_vec(end - start, self.cols, self.data[start * self.cols..end * self.cols].to_vec())
    }

    pub fn cast<G: Scalar>(&self) -> Mat<G> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| G::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn fill(&mut self, v: F) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_inplace(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale_inplace(&mut self, s: F) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }

    /// Adds `row` to every row.
    pub fn add_row_broadcast(&mut self, row: &[F]) {
        assert_eq!(row.len(), self.cols);
        for r in 0..self.rows {
            for (a, b) in self.row_mut(r).iter_mut().zip(row) {
                *a += *b;
            }
        }
    }

    /// Column sums accumulated into `out`.
    pub fn col_sums_into(&self, out: &mut [F]) {
        assert_eq!(out.len(), self.cols);
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += *v;
            }
        }
    }

    /// Vertical concatenation.
    pub fn vstack(parts: &[&Self]) -> Self {
        let cols = parts.first().map_or(0, |p| p.cols);
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        let mut rows = 0;
        for p in parts {
            assert_eq!(p.cols, cols, "vstack: column mismatch");
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Self { rows, cols, data }
    }
}

/// Strided read-only view used to feed GEMM without copying (transposes, head slices, im2col).
#[derive(Clone, Copy)]
pub struct View<'a, F> {
    data: &'a [F],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, F: Scalar> View<'a, F> {
    pub fn new(data: &'a [F], offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        if rows > 0 && cols > 0 {
            let last = offset + (rows - 1) * rs + (cols - 1) * cs;
            assert!(last < data.len(), "view out of bounds");
        }
        Self { data, offset, rows, cols, rs, cs }
    }

    pub fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[self.offset + r * self.rs + c * self.cs]
    }
}

impl<F: Scalar> Mat<F> {
    pub fn view(&self) -> View<'_, F> {
        View::new(&self.data, 0, self.rows, self.cols, self.cols, 1)
    }

    /// Columns `start..start+width` of every row.
    pub fn col_block(&self, start: usize, width: usize) -> View<'_, F> {
        View::new(&self.data, start, self.rows, width, self.cols, 1)
    }
}

/// Mutable strided destination for GEMM.
pub struct ViewMut<'a, F> {
    data: &'a mut [F],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, F: Scalar> ViewMut<'a, F> {
    pub fn of(m: &'a mut Mat<F>) -> Self {
        let (rows, cols) = m.shape();
        Self { data: &mut m.data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    pub fn col_block(m: &'a mut Mat<F>, start: usize, width: usize) -> Self {
        let (rows, cols) = m.shape();
        assert!(start + width <= cols);
        Self { data: &mut m.data, offset: start, rows, cols: width, rs: cols, cs: 1 }
    }
}

/// `C <- alpha * A * B + beta * C`.
pub fn gemm<F: Scalar>(alpha: F, a: View<'_, F>, b: View<'_, F>, beta: F, c: ViewMut<'_, F>) {
    assert_eq!(a.cols, b.rows, "gemm: inner dimension mismatch ({}x{} * {}x{})", a.rows, a.cols, b.rows, b.cols);
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "gemm: output shape mismatch");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        // k == 0: only the beta scaling applies.
        for r in 0..c.rows {
            for col in 0..c.cols {
                let idx = c.offset + r * c.rs + col * c.cs;
                c.data[idx] = if beta == F::zero() { F::zero() } else { beta * c.data[idx] };
            }
        }
        return;
    }
    let last = c.offset + (c.rows - 1) * c.rs + (c.cols - 1) * c.cs;
    assert!(last < c.data.len());
    // SAFETY: bounds checked in View::new / above; c is uniquely borrowed so it cannot alias a or b.
    unsafe {
        F::gemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// `A * B`
pub fn matmul<F: Scalar>(a: View<'_, F>, b: View<'_, F>) -> Mat<F> {
    let mut c = Mat::zeros(a.rows(), b.cols());
    gemm(F::one(), a, b, F::zero(), ViewMut::of(&mut c));
    c
}

/// `C += A * B`
pub fn matmul_acc<F: Scalar>(a: View<'_, F>, b: View<'_, F>, c: &mut Mat<F>) {
    gemm(F::one(), a, b, F::one(), ViewMut::of(c));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_naive_with_transposes() {
        let a = Mat::<f64>::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.5 - 1.0);
        let b = Mat::<f64>::from_fn(3, 5, |r, c| (r as f64 - c as f64) * 0.25);
        let c = matmul(a.view().t(), b.view());
        for i in 0..4 {
            for j in 0..5 {
                let want: f64 = (0..3).map(|k| a.get(k, i) * b.get(k, j)).sum();
                assert!((c.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col_block_views_select_heads() {
        let a = Mat::<f32>::from_fn(2, 6, |r, c| (r * 6 + c) as f32);
        let v = a.col_block(2, 2);
        assert_eq!(v.get(1, 1), 9.0);
        let mut out = Mat::<f32>::zeros(2, 6);
        let id = Mat::<f32>::from_fn(2, 2, |r, c| if r == c { 1.0 } else { 0.0 });
        gemm(1.0, v, id.view(), 0.0, ViewMut::col_block(&mut out, 4, 2));
        assert_eq!(out.row(0), &[0.0, 0.0, 0.0, 0.0, 2.0, 3.0]);
    }
}
