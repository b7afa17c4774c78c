use crate::tensor::{Mat, Scalar};

pub fn log_softmax_row<F: Scalar>(row: &[F]) -> Vec<F> {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
    row.iter().map(|&v| v - lse).collect()
}

/// Mean cross-entropy over the selected `(row, target)` pairs of `logits`.
///
/// Returns the loss and `dL/dlogits`; rows not listed get zero gradient.
pub fn cross_entropy_rows<F: Scalar>(logits: &Mat<F>, picks: &[(usize, usize)]) -> (F, Mat<F>) {
    let mut grad = Mat::zeros(logits.rows(), logits.cols());
    if picks.is_empty() {
        return (F::zero(), grad);
    }
    let inv_n = F::one() / F::from_f64(picks.len() as f64);
    let mut loss = F::zero();
    for &(r, target) in picks {
        let lp = log_softmax_row(logits.row(r));
        loss -= lp[target];
        let g = grad.row_mut(r);
        for (c, &l) in lp.iter().enumerate() {
            g[c] += l.exp() * inv_n;
        }
        g[target] -= inv_n;
    }
    (loss * inv_n, grad)
}
