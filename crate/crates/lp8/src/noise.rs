//! Analytic dynamic-range and SNR models for fixed-point and floating-point
//! quantization of a unit-variance Gaussian signal, plus Monte-Carlo
//! empirical SNR for any quantizer configuration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use thiserror::Error;

use crate::format::FloatFormat;
use crate::quant::{quantize, Overflow, QuantizerConfig, Rounding};

/// Sentinel returned when the measured quantization error energy is zero.
pub const SNR_CAP_DB: f64 = 300.0;

/// Identifies the random stream used by [`snr_db_empirical`]; goes into
/// machine-readable output alongside the seed.
pub const GENERATOR_ID: &str = "chacha8-ziggurat";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NoiseError {
    #[error("floating-point model needs at least one exponent bit; use the fixed-point formulas for 1.0.p")]
    FixedPointFormat,
}

/// Value-system shape for the analytic models. Unlike [`FloatFormat`] this
/// carries no bias (the models are bias-independent) and no width ceiling,
/// so IEEE-style wide formats can be described too.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FloatDescriptor {
    pub exponent_bits: u32,
    pub significand_bits: u32,
    /// Zero exponent field denotes subnormals (true) or an ordinary normal
    /// exponent (false).
    pub subnormals: bool,
    /// All-ones exponent field holds normals (true) or is reserved in the
    /// IEEE way (false).
    pub extended_range: bool,
}

impl FloatDescriptor {
    /// IEEE-style: subnormals, top exponent reserved.
    pub fn ieee(exponent_bits: u32, significand_bits: u32) -> Self {
        FloatDescriptor {
            exponent_bits,
            significand_bits,
            subnormals: true,
            extended_range: false,
        }
    }

    /// The house convention: subnormals plus extended exponent range.
    pub fn extended(exponent_bits: u32, significand_bits: u32) -> Self {
        FloatDescriptor {
            exponent_bits,
            significand_bits,
            subnormals: true,
            extended_range: true,
        }
    }

    pub fn precision_total(&self) -> u32 {
        self.significand_bits + 1
    }

    /// Span of normal stored exponents, `e_max_field - e_min_field`.
    fn exponent_span(&self) -> i64 {
        let top = if self.extended_range {
            (1i64 << self.exponent_bits) - 1
        } else {
            (1i64 << self.exponent_bits) - 2
        };
        let bottom = i64::from(self.subnormals);
        top - bottom
    }
}

impl From<FloatFormat> for FloatDescriptor {
    fn from(f: FloatFormat) -> Self {
        FloatDescriptor::extended(f.exponent_bits(), f.significand_bits())
    }
}

/// Dynamic range of a fixed-point representation with `n` integer bits:
/// `20 log10(2^n)`, about `6.02 n` dB.
pub fn dynamic_range_db_fixed(n: u32) -> f64 {
    20.0 * f64::from(n) * std::f64::consts::LOG10_2
}

/// Dynamic range in dB of a floating-point shape: `20 log10(max / min)`
/// where min is the smallest subnormal (or smallest normal for shapes
/// without subnormals). Independent of exponent bias.
pub fn dynamic_range_db(desc: &FloatDescriptor) -> Result<f64, NoiseError> {
    if desc.exponent_bits == 0 {
        return Err(NoiseError::FixedPointFormat);
    }
    let span = desc.exponent_span() as f64;
    let head = if desc.subnormals {
        // max/min = (2^(p+1) - 1) * 2^span
        ((1u64 << (desc.significand_bits + 1)) - 1) as f64
    } else {
        2.0 - (-f64::from(desc.significand_bits)).exp2()
    };
    Ok(20.0 * (head.log10() + span * std::f64::consts::LOG10_2))
}

/// Dynamic range of one of the library's codec formats (extended exponent
/// range), with the minimum taken at the smallest subnormal or the smallest
/// normal depending on `subnormals`.
pub fn dynamic_range_db_float(format: &FloatFormat, subnormals: bool) -> Result<f64, NoiseError> {
    let mut desc = FloatDescriptor::extended(format.exponent_bits(), format.significand_bits());
    desc.subnormals = subnormals;
    dynamic_range_db(&desc)
}

/// Gaussian-input SNR model for floating-point quantization:
/// `7.44 + 6.02 * P` dB, with `P` the significand precision including the
/// hidden bit.
pub fn snr_db_float_model(precision_total: u32) -> f64 {
    7.44 + 6.02 * f64::from(precision_total)
}

/// Noise variance decomposition of an `n`-bit fixed-point quantizer with
/// step `q` applied to a unit-variance Gaussian signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoiseBreakdown {
    pub q: f64,
    pub rounding_noise: f64,
    pub clipping_noise: f64,
    pub total: f64,
    pub snr_db: f64,
}

/// Closed-form rounding/clipping noise decomposition: with `m = 2^n - 1`,
/// rounding `(q^2/12) erf(mq/sqrt(2))` and clipping
/// `(1 + m^2 q^2)(1 - erf(mq/sqrt(2))) - sqrt(2/pi) mq exp(-m^2 q^2 / 2)`.
pub fn snr_db_fixed_model(q: f64, n: u32) -> NoiseBreakdown {
    assert!(q > 0.0, "quantization step must be positive");
    assert!(n >= 1);
    let m = ((1u64 << n) - 1) as f64;
    let t = m * q;
    let z = t / std::f64::consts::SQRT_2;
    let rounding = q * q / 12.0 * libm::erf(z);
    // 1 - erf(z) evaluated as erfc(z): the tail cancels catastrophically in
    // its literal form once erf rounds to 1
    let clipping = (1.0 + t * t) * libm::erfc(z)
        - (2.0 / std::f64::consts::PI).sqrt() * t * (-t * t / 2.0).exp();
    let total = rounding + clipping;
    NoiseBreakdown {
        q,
        rounding_noise: rounding,
        clipping_noise: clipping,
        total,
        snr_db: -10.0 * total.log10(),
    }
}

/// Per-step breakdown over a grid of quantization steps, for sweeps.
pub fn noise_components_fixed(q_grid: &[f64], n: u32) -> Vec<NoiseBreakdown> {
    q_grid.iter().map(|&q| snr_db_fixed_model(q, n)).collect()
}

/// Log-spaced grid `2^lo_log2 ..= 2^hi_log2` with `steps_per_octave` points
/// per doubling.
pub fn log2_grid(lo_log2: f64, hi_log2: f64, steps_per_octave: u32) -> Vec<f64> {
    assert!(hi_log2 >= lo_log2 && steps_per_octave >= 1);
    let n = ((hi_log2 - lo_log2) * f64::from(steps_per_octave)).round() as usize;
    (0..=n)
        .map(|i| (lo_log2 + i as f64 / f64::from(steps_per_octave)).exp2())
        .collect()
}

/// SNR in dB of quantizing the given samples (clip mode, nearest-even),
/// `10 log10(sum x^2 / sum (x_hat - x)^2)`; [`SNR_CAP_DB`] when the error
/// energy is exactly zero.
pub fn snr_db_of_samples(samples: &[f64], format: &FloatFormat) -> f64 {
    let cfg = QuantizerConfig {
        format: *format,
        rounding: Rounding::NearestEven,
        overflow: Overflow::Clip,
    };
    let mut signal = 0.0;
    let mut error = 0.0;
    for &x in samples {
        let q = quantize(x, &cfg, None).expect("nearest-even needs no rng");
        signal += x * x;
        error += (q - x) * (q - x);
    }
    if error == 0.0 {
        return SNR_CAP_DB;
    }
    10.0 * (signal / error).log10()
}

/// Monte-Carlo SNR of quantizing `N(0, sigma^2)` draws with the config's
/// format (clip mode, nearest-even, regardless of the config's own policy
/// fields). Deterministic given the seed; the stream is [`GENERATOR_ID`].
pub fn snr_db_empirical(
    config: &QuantizerConfig,
    signal_sigma: f64,
    num_samples: u64,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = QuantizerConfig::new(config.format);
    let mut signal = 0.0;
    let mut error = 0.0;
    for _ in 0..num_samples {
        let z: f64 = StandardNormal.sample(&mut rng);
        let x = z * signal_sigma;
        let q = quantize(x, &cfg, None).expect("nearest-even needs no rng");
        signal += x * x;
        error += (q - x) * (q - x);
    }
    if error == 0.0 {
        return SNR_CAP_DB;
    }
    10.0 * (signal / error).log10()
}

/// One row of a format comparison table.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FormatReport {
    Float {
        format: String,
        exponent_bits: u32,
        significand_bits: u32,
        precision_total: u32,
        subnormals: bool,
        extended_range: bool,
        dynamic_range_db: f64,
        snr_db_model: f64,
    },
    FixedPoint {
        format: String,
        bits: u32,
        dynamic_range_db: f64,
        /// Best achievable model SNR over quantization steps 2^-12..2^0.
        peak_snr_db: f64,
        peak_q: f64,
    },
}

impl FormatReport {
    pub fn for_descriptor(name: &str, desc: &FloatDescriptor) -> Result<Self, NoiseError> {
        Ok(FormatReport::Float {
            format: name.to_string(),
            exponent_bits: desc.exponent_bits,
            significand_bits: desc.significand_bits,
            precision_total: desc.precision_total(),
            subnormals: desc.subnormals,
            extended_range: desc.extended_range,
            dynamic_range_db: dynamic_range_db(desc)?,
            snr_db_model: snr_db_float_model(desc.precision_total()),
        })
    }

    pub fn for_fixed_point(name: &str, bits: u32) -> Self {
        let grid = log2_grid(-12.0, 0.0, 64);
        let best = noise_components_fixed(&grid, bits)
            .into_iter()
            .max_by(|a, b| a.snr_db.partial_cmp(&b.snr_db).unwrap())
            .expect("non-empty grid");
        FormatReport::FixedPoint {
            format: name.to_string(),
            bits,
            dynamic_range_db: dynamic_range_db_fixed(bits),
            peak_snr_db: best.snr_db,
            peak_q: best.q,
        }
    }

    pub fn dynamic_range_db(&self) -> f64 {
        match self {
            FormatReport::Float {
                dynamic_range_db, ..
            }
            | FormatReport::FixedPoint {
                dynamic_range_db, ..
            } => *dynamic_range_db,
        }
    }
}

/// Table formats addressable by name in reports: IEEE float-32/float-16,
/// BFloat-16, and DLFloat (no subnormals, extended range).
pub fn named_descriptor(name: &str) -> Option<(&'static str, FloatDescriptor)> {
    match name.to_ascii_lowercase().as_str() {
        "float-32" | "float32" | "fp32" | "f32" => Some(("float-32", FloatDescriptor::ieee(8, 23))),
        "float-16" | "float16" | "fp16" | "f16" => Some(("float-16", FloatDescriptor::ieee(5, 10))),
        "bfloat-16" | "bfloat16" | "bf16" => Some(("bfloat-16", FloatDescriptor::ieee(8, 7))),
        "dlfloat" | "dlfloat-16" => Some((
            "dlfloat",
            FloatDescriptor {
                exponent_bits: 6,
                significand_bits: 9,
                subnormals: false,
                extended_range: true,
            },
        )),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn fixed_dynamic_range() {
        assert!(close(dynamic_range_db_fixed(7), 42.14, 0.01));
        assert!(close(dynamic_range_db_fixed(1), 6.02, 0.01));
        assert!(close(dynamic_range_db_fixed(16), 96.33, 0.01));
    }

    #[test]
    fn float_dynamic_range_table() {
        // (descriptor, reference dB)
        let rows = [
            (FloatDescriptor::ieee(8, 23), 1667.7),
            (FloatDescriptor::ieee(5, 10), 240.8),
            (FloatDescriptor::ieee(8, 7), 1571.3),
            (named_descriptor("dlfloat").unwrap().1, 385.3),
            (FloatDescriptor::extended(5, 2), 197.5),
            (FloatDescriptor::extended(4, 3), 107.8),
            (FloatDescriptor::extended(3, 4), 66.0),
        ];
        for (desc, reference) in rows {
            let d = dynamic_range_db(&desc).unwrap();
            assert!(close(d, reference, 0.1), "{desc:?}: {d} vs {reference}");
        }
    }

    #[test]
    fn float_dynamic_range_is_bias_independent_and_matches_enumeration() {
        for (e, p) in [(1u32, 6u32), (2, 5), (3, 4), (4, 3), (5, 2), (6, 1), (7, 0)] {
            let natural = FloatFormat::natural_bias(e);
            let mut previous = None;
            for bias in [natural, natural - 8, natural + 8] {
                let f = FloatFormat::new(e, p, bias).unwrap();
                let model = dynamic_range_db_float(&f, true).unwrap();
                let values = f.enumerate_values();
                let max = values.iter().cloned().fold(f64::MIN, f64::max);
                let min_pos = values
                    .iter()
                    .cloned()
                    .filter(|&v| v > 0.0)
                    .fold(f64::MAX, f64::min);
                let measured = 20.0 * (max / min_pos).log10();
                assert!(close(model, measured, 1e-9), "1.{e}.{p}:b{bias}");
                if let Some(prev) = previous {
                    assert!(close(model, prev, 1e-12));
                }
                previous = Some(model);
            }
        }
    }

    #[test]
    fn float_model_rejects_scaled_integer() {
        let f = FloatFormat::new(0, 7, 0).unwrap();
        assert_eq!(
            dynamic_range_db_float(&f, true),
            Err(NoiseError::FixedPointFormat)
        );
    }

    #[test]
    fn snr_model_table() {
        for (p_total, reference) in [(3u32, 25.5), (4, 31.5), (5, 37.5), (24, 151.9)] {
            let s = snr_db_float_model(p_total);
            assert!(close(s, reference, 0.1), "P={p_total}: {s} vs {reference}");
        }
    }

    #[test]
    fn fixed_model_reference_points() {
        // frozen from an independent quadrature evaluation of the closed form
        let cases = [(-4i32, 34.8742), (-5, 40.5300), (-6, 19.1726)];
        for (e, want) in cases {
            let got = snr_db_fixed_model(f64::from(2.0f32).powi(e), 7).snr_db;
            assert!(close(got, want, 1e-3), "q=2^{e}: {got} vs {want}");
        }
    }

    #[test]
    fn fixed_model_peak_location() {
        let grid = log2_grid(-8.0, -2.0, 64);
        let best = noise_components_fixed(&grid, 7)
            .into_iter()
            .max_by(|a, b| a.snr_db.partial_cmp(&b.snr_db).unwrap())
            .unwrap();
        assert!(close(best.snr_db, 40.54, 0.02), "peak {}", best.snr_db);
        assert!(best.q.log2() > -5.5 && best.q.log2() < -4.5, "q {}", best.q);
    }

    #[test]
    fn noise_component_shapes() {
        let n = 7;
        // clipping negligible at large q: total ~ q^2/12
        let big = snr_db_fixed_model(0.125, n);
        assert!(big.clipping_noise < 1e-9 * big.total);
        assert!(close(big.total, 0.125 * 0.125 / 12.0, 1e-12));
        // clipping dominates at small q
        let small = snr_db_fixed_model((-8.0f64).exp2(), n);
        assert!(small.clipping_noise > small.rounding_noise);
        // crossover sits between 2^-6 and 2^-4
        let mut lo = (-6.0f64).exp2();
        let mut hi = (-4.0f64).exp2();
        let sign = |q: f64| {
            let b = snr_db_fixed_model(q, n);
            b.clipping_noise - b.rounding_noise
        };
        assert!(sign(lo) > 0.0 && sign(hi) < 0.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if sign(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!(lo > (-6.0f64).exp2() && hi < (-4.0f64).exp2());
        // monotone components across the grid
        let grid = log2_grid(-8.0, -2.0, 16);
        let rows = noise_components_fixed(&grid, n);
        for w in rows.windows(2) {
            assert!(w[1].rounding_noise >= w[0].rounding_noise);
            assert!(w[1].clipping_noise <= w[0].clipping_noise);
            assert!(close(
                w[0].total,
                w[0].rounding_noise + w[0].clipping_noise,
                1e-15
            ));
        }
    }

    #[test]
    fn empirical_is_deterministic() {
        let f = FloatFormat::new(0, 7, 5).unwrap();
        let cfg = QuantizerConfig::new(f);
        let a = snr_db_empirical(&cfg, 1.0, 20_000, 99);
        let b = snr_db_empirical(&cfg, 1.0, 20_000, 99);
        assert_eq!(a, b);
        let c = snr_db_empirical(&cfg, 1.0, 20_000, 100);
        assert_ne!(a, c);
    }

    #[test]
    fn empirical_matches_fixed_model() {
        // scaled integer with q = 2^-5 on a unit Gaussian: the Eq-2 regime
        for (bias, tol) in [(6, 0.3), (5, 0.3), (4, 0.3)] {
            let f = FloatFormat::new(0, 7, bias).unwrap();
            let cfg = QuantizerConfig::new(f);
            let mc = snr_db_empirical(&cfg, 1.0, 1_000_000, 7);
            let model = snr_db_fixed_model((-f64::from(bias)).exp2(), 7).snr_db;
            assert!(
                close(mc, model, tol),
                "bias {bias}: mc {mc} vs model {model}"
            );
        }
    }

    #[test]
    fn empirical_matches_float_model() {
        // sigma chosen so +-6 sigma stays inside the 1.4.3:b7 normal range
        let f = FloatFormat::new(4, 3, 7).unwrap();
        let cfg = QuantizerConfig::new(f);
        let mc = snr_db_empirical(&cfg, 1.0, 1_000_000, 11);
        let model = snr_db_float_model(4);
        assert!(close(mc, model, 1.5), "mc {mc} vs model {model}");
    }

    #[test]
    fn exactly_representable_samples_hit_the_cap() {
        let f = FloatFormat::new(4, 3, 7).unwrap();
        let samples: Vec<f64> = f.enumerate_values()[..32].to_vec();
        assert_eq!(snr_db_of_samples(&samples, &f), SNR_CAP_DB);
    }

    #[test]
    fn erf_reference_accuracy() {
        // |erf(x) - reference| <= 1e-7 absolute everywhere the models use it
        let cases = [
            (0.1, 0.112462916018285),
            (0.5, 0.520499877813047),
            (1.0, 0.842700792949715),
            (2.0, 0.995322265018953),
            (3.5, 0.999999256901628),
            (5.61, 0.999999999999986),
        ];
        for (x, want) in cases {
            assert!((libm::erf(x) - want).abs() <= 1e-7, "erf({x})");
        }
    }

    #[test]
    fn named_descriptors_resolve() {
        for n in ["float-32", "fp16", "bf16", "dlfloat"] {
            assert!(named_descriptor(n).is_some());
        }
        assert!(named_descriptor("posit").is_none());
    }
}
