use super::{join, Init, Params};
use crate::tensor::{gemm, matmul_acc, Mat, Scalar, View, ViewMut};

/// Output length of an unpadded strided convolution, `None` if the input is shorter than the kernel.
pub fn conv_output_len(n: usize, kernel: usize, stride: usize) -> Option<usize> {
    if n < kernel || stride == 0 {
        None
    } else {
        Some((n - kernel) / stride + 1)
    }
}

/// 1-D convolution over a time-major `[L x C_in]` sequence, no padding.
///
/// The weight is laid out `[kernel * C_in x C_out]`, row `j * C_in + c` holding tap `j` of
/// input channel `c`. With that layout the im2col matrix is a strided view of the input.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d<F> {
    pub kernel: usize,
    pub stride: usize,
    pub w: Mat<F>,
    pub b: Mat<F>,
}

impl<F: Scalar> Conv1d<F> {
    pub fn new(init: &mut Init, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        assert!(kernel >= stride && stride >= 1);
        Self { kernel, stride, w: init.fan_in(kernel * c_in, kernel * c_in, c_out), b: Mat::zeros(1, c_out) }
    }

    pub fn c_in(&self) -> usize {
        self.w.rows() / self.kernel
    }

    pub fn c_out(&self) -> usize {
        self.w.cols()
    }

    fn cols_view<'a>(&self, x: &'a Mat<F>, t_out: usize) -> View<'a, F> {
        let c_in = x.cols();
        View::new(x.data(), 0, t_out, self.kernel * c_in, self.stride * c_in, 1)
    }

    /// Panics if `x` is shorter than the kernel; callers validate lengths first.
    pub fn forward(&self, x: &Mat<F>) -> Mat<F> {
        assert_eq!(x.cols(), self.c_in(), "conv: channel mismatch");
        let t_out = conv_output_len(x.rows(), self.kernel, self.stride).expect("conv input shorter than kernel");
        let mut y = Mat::zeros(t_out, self.c_out());
        gemm(F::one(), self.cols_view(x, t_out), self.w.view(), F::zero(), ViewMut::of(&mut y));
        y.add_row_broadcast(self.b.row(0));
        y
    }

    /// Returns `dL/dx` when `need_dx`; parameter gradients go to `grads`.
    pub fn backward(&self, x: &Mat<F>, dy: &Mat<F>, grads: Option<&mut Self>, need_dx: bool) -> Option<Mat<F>> {
        let t_out = dy.rows();
        if let Some(g) = grads {
            matmul_acc(self.cols_view(x, t_out).t(), dy.view(), &mut g.w);
            dy.col_sums_into(g.b.row_mut(0));
        }
        if !need_dx {
            return None;
        }
        let c_in = x.cols();
        let width = self.kernel * c_in;
        let mut dcols = Mat::zeros(t_out, width);
        gemm(F::one(), dy.view(), self.w.view().t(), F::zero(), ViewMut::of(&mut dcols));
        let mut dx = Mat::zeros(x.rows(), c_in);
        let dxd = dx.data_mut();
        for t in 0..t_out {
            let base = t * self.stride * c_in;
            for (o, &v) in dxd[base..base + width].iter_mut().zip(dcols.row(t)) {
                *o += v;
            }
        }
        Some(dx)
    }
}

impl<F: Scalar> Params<F> for Conv1d<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<F>)) {
        f(join(prefix, "w"), &self.w);
        f(join(prefix, "b"), &self.b);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<F>)) {
        f(join(prefix, "w"), &mut self.w);
        f(join(prefix, "b"), &mut self.b);
    }
}
