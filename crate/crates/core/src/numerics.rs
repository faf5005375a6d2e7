//! Small numeric helpers shared across modules.
//!
//! Reductions over Monte-Carlo results use pairwise summation so the total
//! does not depend on how work was chunked across threads.

/// Pairwise (cascade) summation. Error grows like O(log n) instead of O(n).
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn mean(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "mean of empty slice");
    pairwise_sum(xs) / xs.len() as f64
}

/// Population variance (no Bessel correction), the convention used for
/// every variance-style diagnostic in this crate.
pub fn population_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let centered: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    pairwise_sum(&centered) / xs.len() as f64
}

pub fn population_std(xs: &[f64]) -> f64 {
    population_variance(xs).sqrt()
}

pub fn l2_norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn clip01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Format a float with 17 significant digits so a decimal round-trip
/// reproduces the exact bit pattern.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}
