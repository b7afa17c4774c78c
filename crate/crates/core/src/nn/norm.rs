use super::{join, Params};
use crate::tensor::{Mat, Scalar};

const LN_EPS: f64 = 1e-5;

/// Layer normalization over the feature (column) axis.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<F> {
    pub gain: Mat<F>,
    pub bias: Mat<F>,
}

pub struct LnCache<F> {
    xhat: Mat<F>,
    rstd: Vec<F>,
}

impl<F: Scalar> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        Self { gain: Mat::filled(1, dim, F::one()), bias: Mat::zeros(1, dim) }
    }

    pub fn forward(&self, x: &Mat<F>) -> (Mat<F>, LnCache<F>) {
        let (rows, cols) = x.shape();
        let n = F::from_f64(cols as f64);
        let eps = F::from_f64(LN_EPS);
        let mut xhat = Mat::zeros(rows, cols);
        let mut y = Mat::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        let (g, b) = (self.gain.row(0), self.bias.row(0));
        for r in 0..rows {
            let xr = x.row(r);
            let mean = xr.iter().copied().sum::<F>() / n;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let rs = F::one() / (var + eps).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for c in 0..cols {
                xh[c] = (xr[c] - mean) * rs;
            }
            let yr = y.row_mut(r);
            for c in 0..cols {
                yr[c] = xhat.get(r, c) * g[c] + b[c];
            }
        }
        (y, LnCache { xhat, rstd })
    }

    /// Inference-only forward.
    pub fn apply(&self, x: &Mat<F>) -> Mat<F> {
        self.forward(x).0
    }

    pub fn backward(&self, cache: &LnCache<F>, dy: &Mat<F>, grads: Option<&mut Self>) -> Mat<F> {
        let (rows, cols) = dy.shape();
        let n = F::from_f64(cols as f64);
        let g = self.gain.row(0);
        if let Some(gr) = grads {
            for r in 0..rows {
                let (dyr, xh) = (dy.row(r), cache.xhat.row(r));
                let gg = gr.gain.row_mut(0);
                for c in 0..cols {
                    gg[c] += dyr[c] * xh[c];
                }
                let gb = gr.bias.row_mut(0);
                for c in 0..cols {
                    gb[c] += dyr[c];
                }
            }
        }
        let mut dx = Mat::zeros(rows, cols);
        let mut dxhat = vec![F::zero(); cols];
        for r in 0..rows {
            let (dyr, xh) = (dy.row(r), cache.xhat.row(r));
            let mut sum = F::zero();
            let mut sum_xh = F::zero();
            for c in 0..cols {
                dxhat[c] = dyr[c] * g[c];
                sum += dxhat[c];
                sum_xh += dxhat[c] * xh[c];
            }
            let k = cache.rstd[r] / n;
            let out = dx.row_mut(r);
            for c in 0..cols {
                out[c] = k * (n * dxhat[c] - sum - xh[c] * sum_xh);
            }
        }
        dx
    }
}

impl<F: Scalar> Params<F> for LayerNorm<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<F>)) {
        f(join(prefix, "gain"), &self.gain);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<F>)) {
        f(join(prefix, "gain"), &mut self.gain);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<F: Scalar>(x: &Mat<F>) -> Mat<F> {
    let (c, a, half) = (F::from_f64(GELU_C), F::from_f64(GELU_A), F::from_f64(0.5));
    let data = x.data().iter().map(|&v| half * v * (F::one() + (c * (v + a * v * v * v)).tanh())).collect();
    Mat::from_vec(x.rows(), x.cols(), data)
}

pub fn gelu_backward<F: Scalar>(x: &Mat<F>, dy: &Mat<F>) -> Mat<F> {
    let (c, a, half) = (F::from_f64(GELU_C), F::from_f64(GELU_A), F::from_f64(0.5));
    let three = F::from_f64(3.0);
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| {
            let t = (c * (v + a * v * v * v)).tanh();
            let dt = (F::one() - t * t) * c * (F::one() + three * a * v * v);
            g * (half * (F::one() + t) + half * v * dt)
        })
        .collect();
    Mat::from_vec(x.rows(), x.cols(), data)
}
