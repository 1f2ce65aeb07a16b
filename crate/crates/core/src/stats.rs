//! Small descriptive-statistics helpers shared across modules.

/// Linear-interpolation quantile (Hyndman & Fan type 7) of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance with the n-1 denominator; zero for a single observation.
pub fn sample_variance(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64
}

/// Sturges' rule bin count.
pub fn sturges_bins(n: usize) -> usize {
    ((n.max(1) as f64).log2().ceil() as usize) + 1
}

/// Equal-width histogram over [min, max]; returns (edges, counts).
/// The last bin is closed on the right so every value lands in a bin.
pub fn histogram(x: &[f64], bins: usize) -> (Vec<f64>, Vec<usize>) {
    let bins = bins.max(1);
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0usize; bins];
    for &v in x {
        let mut b = ((v - lo) / width).floor() as isize;
        if b >= bins as isize {
            b = bins as isize - 1;
        }
        if b < 0 {
            b = 0;
        }
        counts[b as usize] += 1;
    }
    (edges, counts)
}
