//! Exponent histograms of tensors and format-coverage evaluation, used to
//! pick exponent biases from observed value distributions.
//!
//! Bin `k` counts values with `floor(log2 |x|) = k` (one-octave granularity;
//! bias shifts act in whole octaves, so nothing finer is needed). Zeros are
//! tracked separately.

use serde::Serialize;
use thiserror::Error;

use crate::format::{floor_log2, FloatFormat};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HistError {
    #[error("histogram has no nonzero mass")]
    Empty,
    #[error("clip quantile {0} outside [0, 0.01)")]
    InvalidQuantile(f64),
    #[error("bias selection needs at least one exponent bit")]
    FixedPointFormat,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ExponentHistogram {
    /// Exponent of the first bin; meaningful only when `counts` is non-empty.
    bin_offset: i32,
    counts: Vec<u64>,
    zero_count: u64,
}

impl ExponentHistogram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self::from_values(t.data().iter().copied())
    }

    pub fn from_values<I: IntoIterator<Item = f64>>(values: I) -> Self {
        let mut h = Self::new();
        for v in values {
            h.record(v);
        }
        h
    }

    pub fn record(&mut self, x: f64) {
        debug_assert!(x.is_finite());
        if x == 0.0 {
            self.zero_count += 1;
            return;
        }
        let e = floor_log2(x.abs());
        self.bump(e, 1);
    }

    fn bump(&mut self, e: i32, by: u64) {
        if self.counts.is_empty() {
            self.bin_offset = e;
            self.counts.push(0);
        } else if e < self.bin_offset {
            let grow = (self.bin_offset - e) as usize;
            let mut fresh = vec![0u64; grow];
            fresh.append(&mut self.counts);
            self.counts = fresh;
            self.bin_offset = e;
        } else if e >= self.bin_offset + self.counts.len() as i32 {
            self.counts.resize((e - self.bin_offset + 1) as usize, 0);
        }
        self.counts[(e - self.bin_offset) as usize] += by;
    }

    pub fn zero_count(&self) -> u64 {
        self.zero_count
    }

    pub fn nonzero_total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.zero_count + self.nonzero_total()
    }

    pub fn count_at(&self, exponent: i32) -> u64 {
        let idx = exponent - self.bin_offset;
        if self.counts.is_empty() || idx < 0 || idx as usize >= self.counts.len() {
            0
        } else {
            self.counts[idx as usize]
        }
    }

    /// Occupied bins as `(exponent, count)`, ascending, zero bins skipped.
    pub fn bins(&self) -> impl Iterator<Item = (i32, u64)> + '_ {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, &c)| (self.bin_offset + i as i32, c))
    }

    pub fn min_exponent(&self) -> Option<i32> {
        self.bins().next().map(|(e, _)| e)
    }

    pub fn max_exponent(&self) -> Option<i32> {
        self.bins().last().map(|(e, _)| e)
    }

    /// Bin-wise sum, aligned by absolute exponent.
    pub fn merge(&mut self, other: &ExponentHistogram) {
        self.zero_count += other.zero_count;
        for (e, c) in other.bins() {
            self.bump(e, c);
        }
    }

    /// Nonzero mass at exponents `>= e`.
    fn tail_count(&self, e: i32) -> u64 {
        self.bins().filter(|&(k, _)| k >= e).map(|(_, c)| c).sum()
    }
}

/// Fractions of nonzero mass relative to a format's representable range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Coverage {
    pub in_range: f64,
    pub underflow: f64,
    pub overflow: f64,
}

/// Classify each occupied bin against `[log2(min_subnormal),
/// log2(max_normal)]`. A bin straddling either boundary counts as in-range:
/// clipping maps slightly-over values onto `max_normal` rather than losing
/// them, and the low boundary is a power of two so only whole bins can sit
/// below it.
pub fn coverage(h: &ExponentHistogram, format: &FloatFormat) -> Result<Coverage, HistError> {
    let nonzero = h.nonzero_total();
    if nonzero == 0 {
        return Err(HistError::Empty);
    }
    let lim = format.limits();
    let lo = floor_log2(lim.min_subnormal);
    let hi = floor_log2(lim.max_normal);
    let mut under = 0u64;
    let mut over = 0u64;
    for (e, c) in h.bins() {
        if e < lo {
            under += c;
        } else if e > hi {
            over += c;
        }
    }
    let n = nonzero as f64;
    Ok(Coverage {
        in_range: (nonzero - under - over) as f64 / n,
        underflow: under as f64 / n,
        overflow: over as f64 / n,
    })
}

/// Pick the exponent bias for a `1.E.p` format so that at most
/// `clip_quantile` of the nonzero mass can lie above `max_normal`, preferring
/// the largest such bias (maximum small-value coverage).
///
/// At octave granularity a bin straddling `max_normal` *may* hold clipped
/// values, so it counts against the quantile here (worst case) even though
/// [`coverage`] reports it as in-range. If no constructible bias meets the
/// constraint (data beyond any representable placement), returns the
/// constructible bias minimizing that worst-case overflow.
pub fn suggest_bias(
    h: &ExponentHistogram,
    exponent_bits: u32,
    significand_bits: u32,
    clip_quantile: f64,
) -> Result<i32, HistError> {
    if exponent_bits == 0 {
        return Err(HistError::FixedPointFormat);
    }
    if !(0.0..0.01).contains(&clip_quantile) {
        return Err(HistError::InvalidQuantile(clip_quantile));
    }
    let nonzero = h.nonzero_total();
    if nonzero == 0 {
        return Err(HistError::Empty);
    }
    let budget = clip_quantile * nonzero as f64;
    let top = h.max_exponent().expect("nonzero mass");
    let bottom = h.min_exponent().expect("nonzero mass");
    let e_top_field = (1i32 << exponent_bits) - 1;
    let (bias_lo, bias_hi) = FloatFormat::bias_range(exponent_bits, significand_bits);

    // Overflow mass grows with bias (e_max shrinks), so feasibility is
    // downward-closed in bias: find the smallest e_max whose worst-case
    // clipped tail fits the budget, i.e. the largest feasible bias.
    let mut e_max = top + 1; // tail_count(top + 1) == 0: always feasible
    while e_max > bottom - 1 && h.tail_count(e_max - 1) as f64 <= budget {
        e_max -= 1;
    }
    let bias = e_top_field - e_max;
    if bias > bias_hi {
        return Ok(bias_hi);
    }
    if bias < bias_lo {
        // documented fallback: even the highest-reaching constructible
        // placement clips more than requested; minimize overflow
        return Ok(bias_lo);
    }
    Ok(bias)
}
