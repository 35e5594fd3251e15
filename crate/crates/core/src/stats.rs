//! Order statistics shared by target cleaning and evaluation.

/// Percentile of `values` by the linear-interpolation order statistic.
///
/// With the sorted sample `x` of length `n`, the rank is `h = (n - 1) * p / 100`
/// and the result is `x[floor(h)] + (h - floor(h)) * (x[floor(h) + 1] - x[floor(h)])`.
/// Returns `None` for an empty sample or a percentile outside `[0, 100]`.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&p) {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(percentile_sorted(&sorted, p))
}

/// Same as [`percentile`] on data that is already sorted ascending.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Uniform bins over `[lo, hi]`; values at or above the top edge land in the last bin
/// and values below `lo` land in the first.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformBins {
    pub lo: f64,
    pub hi: f64,
    pub n_bins: usize,
}

impl UniformBins {
    /// Bins spanning `[lo, hi]`. A degenerate range is widened by half a unit on each side.
    pub fn spanning(lo: f64, hi: f64, n_bins: usize) -> Self {
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        Self { lo, hi, n_bins: n_bins.max(1) }
    }

    pub fn over(values: &[f64], n_bins: usize) -> Self {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self::spanning(lo, hi, n_bins)
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.n_bins as f64
    }

    pub fn edges(&self) -> Vec<f64> {
        (0..=self.n_bins)
            .map(|i| {
                if i == self.n_bins {
                    self.hi
                } else {
                    self.lo + i as f64 * self.width()
                }
            })
            .collect()
    }

    /// Clamped bin index.
    pub fn index(&self, v: f64) -> usize {
        let pos = ((v - self.lo) / (self.hi - self.lo) * self.n_bins as f64).floor();
        if pos.is_nan() || pos < 0.0 {
            0
        } else {
            (pos as usize).min(self.n_bins - 1)
        }
    }

    /// Bin index, or `None` when `v` lies outside `[lo, hi]`.
    pub fn index_within(&self, v: f64) -> Option<usize> {
        if v < self.lo || v > self.hi || v.is_nan() {
            None
        } else {
            Some(self.index(v))
        }
    }

    pub fn counts(&self, values: &[f64]) -> Vec<usize> {
        let mut counts = vec![0; self.n_bins];
        for &v in values {
            counts[self.index(v)] += 1;
        }
        counts
    }
}
