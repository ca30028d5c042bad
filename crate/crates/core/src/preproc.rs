//! Intensity preprocessing: percentile scaling and CDF histogram matching.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NORMALIZATION_PERCENTILE: f64 = 98.0;
pub const DEFAULT_HIST_BINS: usize = 256;

/// Percentile with linear interpolation between order statistics
/// (rank `p / 100 * (n - 1)`).
pub fn percentile(values: &[f32], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Contract("percentile of an empty set".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::param("percentile", format!("{p} is outside [0, 100]")));
    }
    let mut sorted: Vec<f32> = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = rank - lo as f64;
    Ok(sorted[lo] as f64 + frac * (sorted[hi] as f64 - sorted[lo] as f64))
}

/// Divides every voxel of a volume (all its slices) by the volume's 98th
/// percentile. Returns the divisor.
pub fn percentile_normalize(volume: &mut [&mut [f32]]) -> Result<f64> {
    let all: Vec<f32> = volume.iter().flat_map(|s| s.iter().copied()).collect();
    if all.is_empty() {
        return Err(Error::Contract("cannot normalize an empty volume".into()));
    }
    if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Contract("intensities must be finite and non-negative".into()));
    }
    let divisor = percentile(&all, NORMALIZATION_PERCENTILE)?;
    if divisor <= 0.0 {
        return Err(Error::Contract("98th percentile is zero; normalization is undefined".into()));
    }
    for s in volume.iter_mut() {
        for v in s.iter_mut() {
            *v = (*v as f64 / divisor) as f32;
        }
    }
    Ok(divisor)
}

/// Reference CDF on fixed-width bins: `cdf[i]` is the fraction of reference
/// values below bin edge `i`; `cdf[bins] = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceCdf {
    pub lo: f64,
    pub hi: f64,
    pub cdf: Vec<f64>,
}

impl ReferenceCdf {
    pub fn build<'a>(images: impl IntoIterator<Item = &'a [f32]>, bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::param("bins", "must be positive"));
        }
        let values: Vec<f32> = images.into_iter().flat_map(|s| s.iter().copied()).collect();
        if values.is_empty() {
            return Err(Error::Contract("histogram reference needs at least one non-empty image".into()));
        }
        let lo = values.iter().copied().fold(f32::INFINITY, f32::min) as f64;
        let mut hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        if hi <= lo {
            hi = lo + 1.0;
        }
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0u64; bins];
        for &v in &values {
            let b = (((v as f64 - lo) / width).floor().max(0.0) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let n = values.len() as f64;
        let mut cdf = Vec::with_capacity(bins + 1);
        let mut acc = 0u64;
        cdf.push(0.0);
        for c in counts {
            acc += c;
            cdf.push(acc as f64 / n);
        }
        Ok(Self { lo, hi, cdf })
    }

    pub fn bins(&self) -> usize {
        self.cdf.len() - 1
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.bins() as f64
    }

    /// Inverse CDF with linear interpolation inside the bin.
    pub fn quantile(&self, q: f64) -> f64 {
        let q = q.clamp(0.0, 1.0);
        let width = self.bin_width();
        // first bin whose upper CDF reaches q and that actually holds mass
        let mut b = self.cdf.partition_point(|&c| c < q).saturating_sub(1).min(self.bins() - 1);
        while b + 1 < self.bins() && self.cdf[b + 1] <= self.cdf[b] {
            b += 1;
        }
        let (c0, c1) = (self.cdf[b], self.cdf[b + 1]);
        let frac = if c1 > c0 { ((q - c0) / (c1 - c0)).clamp(0.0, 1.0) } else { 0.0 };
        self.lo + (b as f64 + frac) * width
    }
}

/// Monotone remap of a source stack so its empirical CDF follows `reference`.
/// Ties share one output value, so pixel ordering is preserved.
pub fn histogram_match(source: &[f32], reference: &ReferenceCdf) -> Vec<f32> {
    let n = source.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| source[a].total_cmp(&source[b]));
    let mut out = vec![0.0f32; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && source[order[j + 1]] == source[order[i]] {
            j += 1;
        }
        // mid-rank empirical CDF of the tie group
        let q = (i as f64 + (j + 1 - i) as f64 / 2.0) / n as f64;
        let v = reference.quantile(q) as f32;
        for &idx in &order[i..=j] {
            out[idx] = v;
        }
        i = j + 1;
    }
    out
}

/// 1-Wasserstein distance between two empirical distributions (quantile coupling).
pub fn wasserstein1(a: &[f32], b: &[f32]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::NAN;
    }
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(f32::total_cmp);
    xb.sort_by(f32::total_cmp);
    let steps = 4 * xa.len().max(xb.len());
    let pick = |x: &[f32], q: f64| x[((q * x.len() as f64) as usize).min(x.len() - 1)] as f64;
    (0..steps)
        .map(|i| {
            let q = (i as f64 + 0.5) / steps as f64;
            (pick(&xa, q) - pick(&xb, q)).abs()
        })
        .sum::<f64>()
        / steps as f64
}
