use crate::error::{Error, Result};
use crate::target::ParameterSet;

/// Normalized histogram of `values` over `[lo, hi]` with `bins` equal-width
/// bins, smoothed by adding `epsilon` to every bin before renormalizing.
/// A degenerate range puts everything in the first bin.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize, epsilon: f64) -> Vec<f64> {
    let mut counts = vec![0.0; bins];
    let width = hi - lo;
    for &v in values {
        let b = if width > 0.0 {
            (((v - lo) / width) * bins as f64).floor().clamp(0.0, (bins - 1) as f64) as usize
        } else {
            0
        };
        counts[b] += 1.0;
    }
    let n = values.len() as f64;
    let mut total = 0.0;
    for c in counts.iter_mut() {
        *c = *c / n + epsilon;
        total += *c;
    }
    for c in counts.iter_mut() {
        *c /= total;
    }
    counts
}

/// Base-2 Jensen–Shannon divergence of two distributions on the same
/// support. Bins where a side has zero mass contribute nothing for that side.
pub fn js_distributions(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "distributions on different supports");
    let mut kl_p = 0.0;
    let mut kl_q = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            kl_p += a * (a / m).log2();
        }
        if b > 0.0 {
            kl_q += b * (b / m).log2();
        }
    }
    (0.5 * kl_p + 0.5 * kl_q).clamp(0.0, 1.0)
}

/// JS divergence between the weight distributions of two parameter sets,
/// estimated by histograms over their shared value range.
pub fn js_divergence(p: &ParameterSet, q: &ParameterSet, bins: usize, epsilon: f64) -> Result<f64> {
    if bins < 2 {
        return Err(Error::contract("js_divergence needs at least 2 bins"));
    }
    let a = p.flatten();
    let b = q.flatten();
    a.check_same_shape(&b, "js_divergence")?;
    if a.is_empty() {
        return Err(Error::dim("js_divergence of empty parameter sets"));
    }
    let (lo, hi) = a
        .data()
        .iter()
        .chain(b.data())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let hp = histogram(a.data(), lo, hi, bins, epsilon);
    let hq = histogram(b.data(), lo, hi, bins, epsilon);
    Ok(js_distributions(&hp, &hq))
}
