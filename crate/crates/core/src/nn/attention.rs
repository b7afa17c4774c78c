use super::{join, Init, Linear, Params};
use crate::tensor::{gemm, Mat, Scalar, View, ViewMut};

/// Multi-head self-attention. Q, K and V are projections of the same input tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention<F> {
    pub n_heads: usize,
    pub q: Linear<F>,
    pub k: Linear<F>,
    pub v: Linear<F>,
    pub o: Linear<F>,
}

pub struct AttnCache<F> {
    x: Mat<F>,
    q: Mat<F>,
    k: Mat<F>,
    v: Mat<F>,
    probs: Vec<Mat<F>>,
    ctx: Mat<F>,
}

impl<F> AttnCache<F> {
    /// Per-head attention weights, `[T x T]` each.
    pub fn probs(&self) -> &[Mat<F>] {
        &self.probs
    }
}

/// Keys and values of already-processed positions, for incremental decoding.
#[derive(Clone, Debug, Default)]
pub struct KvCache<F> {
    k: Vec<F>,
    v: Vec<F>,
    len: usize,
}

impl<F> KvCache<F> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Row-wise softmax over the first `valid(r)` columns; the remaining columns are zeroed.
fn softmax_rows<F: Scalar>(s: &mut Mat<F>, valid: impl Fn(usize) -> usize) {
    for r in 0..s.rows() {
        let n = valid(r);
        let row = s.row_mut(r);
        let mut max = F::neg_infinity();
        for &v in &row[..n] {
            if v > max {
                max = v;
            }
        }
        let mut sum = F::zero();
        for v in &mut row[..n] {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in &mut row[..n] {
            *v /= sum;
        }
        for v in &mut row[n..] {
            *v = F::zero();
        }
    }
}

impl<F: Scalar> Attention<F> {
    pub fn new(init: &mut Init, dim: usize, n_heads: usize) -> Self {
        assert!(n_heads > 0 && dim.is_multiple_of(n_heads), "dim {dim} not divisible by {n_heads} heads");
        Self {
            n_heads,
            q: Linear::new(init, dim, dim),
            k: Linear::new(init, dim, dim),
            v: Linear::new(init, dim, dim),
            o: Linear::new(init, dim, dim),
        }
    }

    fn head_dim(&self) -> usize {
        self.q.d_out() / self.n_heads
    }

    pub fn forward(&self, x: &Mat<F>, causal: bool) -> (Mat<F>, AttnCache<F>) {
        let t = x.rows();
        let dh = self.head_dim();
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let q = self.q.forward(x);
        let k = self.k.forward(x);
        let v = self.v.forward(x);
        let mut ctx = Mat::zeros(t, q.cols());
        let mut probs = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let mut s = Mat::zeros(t, t);
            gemm(scale, q.col_block(h * dh, dh), k.col_block(h * dh, dh).t(), F::zero(), ViewMut::of(&mut s));
            if causal {
                softmax_rows(&mut s, |r| r + 1);
            } else {
                softmax_rows(&mut s, |_| t);
            }
            gemm(F::one(), s.view(), v.col_block(h * dh, dh), F::zero(), ViewMut::col_block(&mut ctx, h * dh, dh));
            probs.push(s);
        }
        let out = self.o.forward(&ctx);
        (out, AttnCache { x: x.clone(), q, k, v, probs, ctx })
    }

    pub fn backward(&self, cache: &AttnCache<F>, dy: &Mat<F>, grads: Option<&mut Self>) -> Mat<F> {
        let t = dy.rows();
        let dh = self.head_dim();
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let (gq, gk, gv, go) = match grads {
            Some(g) => (Some(&mut g.q), Some(&mut g.k), Some(&mut g.v), Some(&mut g.o)),
            None => (None, None, None, None),
        };
        let dctx = self.o.backward(&cache.ctx, dy, go);
        let d = cache.q.cols();
        let mut dq = Mat::zeros(t, d);
        let mut dk = Mat::zeros(t, d);
        let mut dv = Mat::zeros(t, d);
        let mut dp = Mat::zeros(t, t);
        for h in 0..self.n_heads {
            let p = &cache.probs[h];
            let dctx_h = dctx.col_block(h * dh, dh);
            gemm(F::one(), dctx_h, cache.v.col_block(h * dh, dh).t(), F::zero(), ViewMut::of(&mut dp));
            gemm(F::one(), p.view().t(), dctx_h, F::zero(), ViewMut::col_block(&mut dv, h * dh, dh));
            // softmax backward, in place: dS = P * (dP - rowsum(P * dP))
            for r in 0..t {
                let pr = p.row(r);
                let dr = dp.row_mut(r);
                let dot: F = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for (g, &pv) in dr.iter_mut().zip(pr) {
                    *g = pv * (*g - dot);
                }
            }
            gemm(scale, dp.view(), cache.k.col_block(h * dh, dh), F::zero(), ViewMut::col_block(&mut dq, h * dh, dh));
            gemm(scale, dp.view().t(), cache.q.col_block(h * dh, dh), F::zero(), ViewMut::col_block(&mut dk, h * dh, dh));
        }
        let mut dx = self.q.backward(&cache.x, &dq, gq);
        dx.add_inplace(&self.k.backward(&cache.x, &dk, gk));
        dx.add_inplace(&self.v.backward(&cache.x, &dv, gv));
        dx
    }

    /// Causal attention for `x_new` appended after the positions already held in `kv`.
    pub fn forward_incremental(&self, x_new: &Mat<F>, kv: &mut KvCache<F>) -> Mat<F> {
        let n = x_new.rows();
        let d = self.q.d_out();
        let dh = self.head_dim();
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let q = self.q.forward(x_new);
        kv.k.extend_from_slice(self.k.forward(x_new).data());
        kv.v.extend_from_slice(self.v.forward(x_new).data());
        let past = kv.len;
        kv.len += n;
        let total = kv.len;
        let mut ctx = Mat::zeros(n, d);
        let mut s = Mat::zeros(n, total);
        for h in 0..self.n_heads {
            let keys = View::new(&kv.k, h * dh, total, dh, d, 1);
            let vals = View::new(&kv.v, h * dh, total, dh, d, 1);
            gemm(scale, q.col_block(h * dh, dh), keys.t(), F::zero(), ViewMut::of(&mut s));
            softmax_rows(&mut s, |r| past + r + 1);
            gemm(F::one(), s.view(), vals, F::zero(), ViewMut::col_block(&mut ctx, h * dh, dh));
        }
        self.o.forward(&ctx)
    }
}

impl<F: Scalar> Params<F> for Attention<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<F>)) {
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.o.visit(&join(prefix, "o"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<F>)) {
        self.q.visit_mut(&join(prefix, "q"), f);
        self.k.visit_mut(&join(prefix, "k"), f);
        self.v.visit_mut(&join(prefix, "v"), f);
        self.o.visit_mut(&join(prefix, "o"), f);
    }
}
