use crate::error::{invalid, Result};
use crate::tensor::{sample_size, sample_values};

use super::DropConfig;

/// Number of entries that must fall at or below the threshold:
/// `floor(ratio / 100 * n)`, computed so exact products are not lost to
/// rounding (99 % of 10^6 is 990000, not 989999).
pub fn drop_rank(ratio: f64, n: usize) -> usize {
    let x = ratio * n as f64 / 100.0;
    ((x * (1.0 + 1e-12)).floor() as usize).min(n)
}

/// Picks the dropping threshold over the concatenation of `parts`.
///
/// With exact selection the threshold is the k-th smallest magnitude,
/// `k = drop_rank(R, n)`, and 0 when `k == 0`. Otherwise `m` magnitudes are
/// sampled (see [`threshold_sample_size`]) and the R-th percentile is read
/// off them by interpolating between order statistics at rank
/// `R / 100 * (m + 1)`, which keeps the expected surviving fraction at
/// `1 - R / 100`.
pub fn select_threshold(parts: &[&[f32]], config: &DropConfig, seed: u64) -> Result<f32> {
    let n: usize = parts.iter().map(|p| p.len()).sum();
    if n == 0 {
        return Err(invalid("threshold selection over empty input"));
    }
    if config.drop_ratio <= 0.0 {
        return Ok(0.0);
    }
    let m = threshold_sample_size(n, config);
    if config.exact_selection || m >= n {
        let mut mags: Vec<f32> = parts.iter().flat_map(|p| p.iter().map(|v| v.abs())).collect();
        return Ok(kth_smallest(&mut mags, drop_rank(config.drop_ratio, n)));
    }
    let mut mags = sample_values(parts, m, seed);
    for v in mags.iter_mut() {
        *v = v.abs();
    }
    mags.sort_unstable_by(f32::total_cmp);
    Ok(interpolated_quantile(&mags, config.drop_ratio / 100.0))
}

/// Sample size for threshold estimation over `n` values: the configured
/// fraction with the usual minimum of 64, raised so that on average at least
/// [`TAIL_SAMPLES`] sampled values lie above the target percentile. Capped
/// at `n`.
pub fn threshold_sample_size(n: usize, config: &DropConfig) -> usize {
    let keep = 1.0 - config.drop_ratio / 100.0;
    let tail = (TAIL_SAMPLES as f64 / keep * (1.0 - 1e-12)).ceil() as usize;
    sample_size(n, config.sample_fraction).max(tail).min(n)
}

/// Expected number of sampled values above the threshold percentile.
pub const TAIL_SAMPLES: usize = 10;

/// 1-indexed k-th smallest value; 0 for `k == 0`. Reorders `values`.
fn kth_smallest(values: &mut [f32], k: usize) -> f32 {
    if k == 0 {
        return 0.0;
    }
    let (_, kth, _) = values.select_nth_unstable_by(k - 1, f32::total_cmp);
    *kth
}

/// Quantile of non-negative sorted data at position `q * (m + 1)`, with an
/// implicit order statistic 0 below the smallest sample.
fn interpolated_quantile(sorted: &[f32], q: f64) -> f32 {
    let m = sorted.len();
    let h = q * (m + 1) as f64;
    let lower = h.floor() as usize;
    if lower >= m {
        return sorted[m - 1];
    }
    let frac = h - lower as f64;
    let lo = if lower == 0 { 0.0 } else { sorted[lower - 1] as f64 };
    let hi = sorted[lower] as f64;
    (lo + frac * (hi - lo)) as f32
}
