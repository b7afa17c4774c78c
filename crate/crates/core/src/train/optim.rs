use crate::nn::Params;
use crate::tensor::{Mat, Scalar};

/// Adam with decoupled weight decay. Moment buffers follow the `Params` visiting order.
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Mat<F>>,
    v: Vec<Mat<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<P: Params<F>>(&mut self, params: &mut P, grads: &P) {
        let g = grads.named();
        if self.m.is_empty() {
            self.m = g.iter().map(|(_, t)| Mat::zeros(t.rows(), t.cols())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (F::from_f64(self.beta1), F::from_f64(self.beta2));
        let (one, eps) = (F::one(), F::from_f64(self.eps));
        let step_size = F::from_f64(self.lr / bc1);
        let inv_bc2 = F::from_f64(1.0 / bc2);
        let decay = F::from_f64(1.0 - self.lr * self.weight_decay);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut i = 0;
        params.visit_mut("", &mut |_, p| {
            let gd = g[i].1.data();
            let (m, v) = (ms[i].data_mut(), vs[i].data_mut());
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = b1 * m[k] + (one - b1) * gd[k];
                v[k] = b2 * v[k] + (one - b2) * gd[k] * gd[k];
                *w = *w * decay - step_size * m[k] / ((v[k] * inv_bc2).sqrt() + eps);
            }
            i += 1;
        });
    }
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<F: Scalar, P: Params<F>>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.sum_sq().sqrt();
    if norm > max_norm {
        grads.scale_(F::from_f64(max_norm / (norm + 1e-6)));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, Linear};

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        let mut p = Linear::<f64>::new(&mut Init::new(0), 2, 2);
        let before = p.clone();
        let mut g = p.clone();
        g.visit_mut("", &mut |_, m| m.data_mut().iter_mut().for_each(|v| *v = 0.3));
        let mut opt = AdamW::new(0.01, 0.0);
        opt.step(&mut p, &g);
        for ((_, a), (_, b)) in p.named().iter().zip(before.named()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((y - x - 0.01).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = Linear::<f64>::new(&mut Init::new(0), 3, 4);
        g.scale_(100.0);
        clip_grad_norm(&mut g, 1.0);
        assert!((g.sum_sq().sqrt() - 1.0).abs() < 1e-5);
    }
}
