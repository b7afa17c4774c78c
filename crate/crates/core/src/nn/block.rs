use super::{gelu, gelu_backward, join, AttnCache, Attention, Init, KvCache, LayerNorm, Linear, LnCache, Params};
use crate::tensor::{Mat, Scalar};

/// Pre-norm transformer layer: `x + MSA(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<F> {
    pub ln1: LayerNorm<F>,
    pub attn: Attention<F>,
    pub ln2: LayerNorm<F>,
    pub ff1: Linear<F>,
    pub ff2: Linear<F>,
}

pub struct BlockCache<F> {
    ln1: LnCache<F>,
    attn: AttnCache<F>,
    ln2: LnCache<F>,
    f_in: Mat<F>,
    pre: Mat<F>,
    act: Mat<F>,
}

impl<F> BlockCache<F> {
    pub fn attn(&self) -> &AttnCache<F> {
        &self.attn
    }
}

pub type BlockKv<F> = KvCache<F>;

impl<F: Scalar> Block<F> {
    pub fn new(init: &mut Init, dim: usize, n_heads: usize, ffn_dim: usize) -> Self {
        Self {
            ln1: LayerNorm::new(dim),
            attn: Attention::new(init, dim, n_heads),
            ln2: LayerNorm::new(dim),
            ff1: Linear::new(init, dim, ffn_dim),
            ff2: Linear::new(init, ffn_dim, dim),
        }
    }

    pub fn forward(&self, x: &Mat<F>, causal: bool) -> (Mat<F>, BlockCache<F>) {
        let (a_in, ln1) = self.ln1.forward(x);
        let (a_out, attn) = self.attn.forward(&a_in, causal);
        let mut x2 = x.clone();
        x2.add_inplace(&a_out);
        let (f_in, ln2) = self.ln2.forward(&x2);
        let pre = self.ff1.forward(&f_in);
        let act = gelu(&pre);
        let mut y = self.ff2.forward(&act);
        y.add_inplace(&x2);
        (y, BlockCache { ln1, attn, ln2, f_in, pre, act })
    }

    pub fn backward(&self, cache: &BlockCache<F>, dy: &Mat<F>, grads: Option<&mut Self>) -> Mat<F> {
        let (g_ln1, g_attn, g_ln2, g_ff1, g_ff2) = match grads {
            Some(g) => (Some(&mut g.ln1), Some(&mut g.attn), Some(&mut g.ln2), Some(&mut g.ff1), Some(&mut g.ff2)),
            None => (None, None, None, None, None),
        };
        let d_act = self.ff2.backward(&cache.act, dy, g_ff2);
        let d_pre = gelu_backward(&cache.pre, &d_act);
        let d_fin = self.ff1.backward(&cache.f_in, &d_pre, g_ff1);
        let mut dx2 = self.ln2.backward(&cache.ln2, &d_fin, g_ln2);
        dx2.add_inplace(dy);
        let d_ain = self.attn.backward(&cache.attn, &dx2, g_attn);
        let mut dx = self.ln1.backward(&cache.ln1, &d_ain, g_ln1);
        dx.add_inplace(&dx2);
        dx
    }

    /// Causal forward of new rows, reusing cached keys/values of earlier rows.
    pub fn forward_incremental(&self, x_new: &Mat<F>, kv: &mut BlockKv<F>) -> Mat<F> {
        let a_in = self.ln1.apply(x_new);
        let a_out = self.attn.forward_incremental(&a_in, kv);
        let mut x2 = x_new.clone();
        x2.add_inplace(&a_out);
        let f_in = self.ln2.apply(&x2);
        let mut y = self.ff2.forward(&gelu(&self.ff1.forward(&f_in)));
        y.add_inplace(&x2);
        y
    }
}

impl<F: Scalar> Params<F> for Block<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<F>)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.ff1.visit(&join(prefix, "ff1"), f);
        self.ff2.visit(&join(prefix, "ff2"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<F>)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.ff1.visit_mut(&join(prefix, "ff1"), f);
        self.ff2.visit_mut(&join(prefix, "ff2"), f);
    }
}
