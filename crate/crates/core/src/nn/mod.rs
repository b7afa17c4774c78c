//! Layers with hand-derived backward passes.
//!
//! Every layer follows the same pattern: `forward` returns the output plus whatever it
//! needs to cache, and `backward` consumes that cache together with the upstream gradient.
//! Parameter gradients are accumulated into an optional twin of the layer (`grads`); passing
//! `None` skips them, which is how frozen groups are handled.

mod attention;
mod block;
mod conv;
mod linear;
mod loss;
mod norm;

pub use attention::{AttnCache, Attention, KvCache};
pub use block::{Block, BlockCache, BlockKv};
pub use conv::{conv_output_len, Conv1d};
pub use linear::Linear;
pub use loss::{cross_entropy_rows, log_softmax_row};
pub use norm::{gelu, gelu_backward, LayerNorm, LnCache};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Mat, Scalar};

/// Named access to every parameter tensor of a module.
///
/// Visiting order is fixed by the implementation and is relied upon for checkpoint layout
/// and optimizer state.
pub trait Params<F: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<F>));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Mat<F>));

    fn named(&self) -> Vec<(String, &Mat<F>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, m| out.push((n, m)));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Mat<F>)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |n, m| out.push((n, m)));
        out
    }

    fn num_params(&self) -> usize {
        self.named().iter().map(|(_, m)| m.data().len()).sum()
    }

    fn zero_(&mut self) {
        self.visit_mut("", &mut |_, m| m.fill(F::zero()));
    }

    /// `self += other`, tensor by tensor. Both must share structure.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let src = other.named();
        let mut i = 0;
        self.visit_mut("", &mut |name, m| {
            assert_eq!(name, src[i].0, "accumulate: structure mismatch");
            m.add_inplace(src[i].1);
            i += 1;
        });
    }

    fn sum_sq(&self) -> f64 {
        self.named().iter().map(|(_, m)| m.sum_sq()).sum()
    }

    fn scale_(&mut self, s: F) {
        self.visit_mut("", &mut |_, m| m.scale_inplace(s));
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Weight initializer: fan-in scaled uniform weights, zero biases, seeded.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn uniform<F: Scalar>(&mut self, rows: usize, cols: usize, bound: f64) -> Mat<F> {
        Mat::from_fn(rows, cols, |_, _| F::from_f64(self.rng.random_range(-bound..bound)))
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    pub fn fan_in<F: Scalar>(&mut self, fan_in: usize, rows: usize, cols: usize) -> Mat<F> {
        self.uniform(rows, cols, 1.0 / (fan_in as f64).sqrt())
    }

    /// Unit-variance uniform, used for embedding tables.
    pub fn unit<F: Scalar>(&mut self, rows: usize, cols: usize) -> Mat<F> {
        self.uniform(rows, cols, 3f64.sqrt())
    }
}
