use crate::align::{align, EditCounts};
use crate::error::MetricError;

/// Lowercases, drops every character that is neither alphanumeric nor whitespace, collapses
/// whitespace runs to one space and trims the ends.
pub fn normalize_text(s: &str) -> String {
    let kept: String = s
        .chars()
        .flat_map(char::to_lowercase)
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Word-level edits of `hyp` against `reference` after normalizing both, plus the reference word count.
pub fn word_edits(reference: &str, hyp: &str) -> Result<(EditCounts, usize), MetricError> {
    let r = normalize_text(reference);
    let h = normalize_text(hyp);
    let rw: Vec<&str> = r.split_whitespace().collect();
    let hw: Vec<&str> = h.split_whitespace().collect();
    if rw.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    Ok((align(&rw, &hw), rw.len()))
}

/// Word error rate and its S/D/I breakdown.
pub fn wer(reference: &str, hyp: &str) -> Result<(f64, EditCounts), MetricError> {
    let (e, n) = word_edits(reference, hyp)?;
    Ok((e.distance() as f64 / n as f64, e))
}

/// Pearson correlation coefficient.
pub fn pcc(xs: &[f64], ys: &[f64]) -> Result<f64, MetricError> {
    if xs.len() != ys.len() {
        return Err(MetricError::LengthMismatch(xs.len(), ys.len()));
    }
    let n = xs.len();
    if n < 2 {
        return Err(MetricError::TooFewPairs(n));
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(MetricError::ZeroVariance("xs"));
    }
    if syy == 0.0 {
        return Err(MetricError::ZeroVariance("ys"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
