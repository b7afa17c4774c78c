use super::{join, Init, Params};
use crate::tensor::{gemm, matmul, matmul_acc, Mat, Scalar, ViewMut};

/// `y = x W + b` with `W` stored as `[in x out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<F> {
    pub w: Mat<F>,
    pub b: Mat<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn new(init: &mut Init, d_in: usize, d_out: usize) -> Self {
        Self { w: init.fan_in(d_in, d_in, d_out), b: Mat::zeros(1, d_out) }
    }

    pub fn d_in(&self) -> usize {
        self.w.rows()
    }

    pub fn d_out(&self) -> usize {
        self.w.cols()
    }

    pub fn forward(&self, x: &Mat<F>) -> Mat<F> {
        let mut y = matmul(x.view(), self.w.view());
        y.add_row_broadcast(self.b.row(0));
        y
    }

    /// Accumulates parameter gradients (if requested) and returns `dL/dx`.
    pub fn backward(&self, x: &Mat<F>, dy: &Mat<F>, grads: Option<&mut Self>) -> Mat<F> {
        self.grads_only(x, dy, grads);
        let mut dx = Mat::zeros(dy.rows(), self.d_in());
        gemm(F::one(), dy.view(), self.w.view().t(), F::zero(), ViewMut::of(&mut dx));
        dx
    }

    pub fn grads_only(&self, x: &Mat<F>, dy: &Mat<F>, grads: Option<&mut Self>) {
        if let Some(g) = grads {
            matmul_acc(x.view().t(), dy.view(), &mut g.w);
            dy.col_sums_into(g.b.row_mut(0));
        }
    }
}

impl<F: Scalar> Params<F> for Linear<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<F>)) {
        f(join(prefix, "w"), &self.w);
        f(join(prefix, "b"), &self.b);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<F>)) {
        f(join(prefix, "w"), &mut self.w);
        f(join(prefix, "b"), &mut self.b);
    }
}
