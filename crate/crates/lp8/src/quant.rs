//! Quantization of working-precision values into a [`FloatFormat`]:
//! encode/decode, simulated quantize-dequantize, and elementwise tensor
//! quantization with overflow reporting.
//!
//! Rounding is round-to-nearest-even by default; stochastic rounding picks
//! one of the two bracketing codewords with probability proportional to
//! proximity and needs a caller-owned random stream. On overflow
//! (`|x| > max_normal`, strictly) the result is either the max-magnitude
//! codeword (clip) or the reserved NaN codeword (signal).

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{exp2i, floor_log2, Codeword, FloatFormat};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QuantError {
    #[error("stochastic rounding requested without a random stream")]
    MissingRng,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Rounding {
    #[default]
    NearestEven,
    Stochastic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Overflow {
    /// Clip to the max-magnitude finite value.
    #[default]
    Clip,
    /// Return the reserved NaN codeword.
    SignalNan,
}

/// The unit injected at every quantization point: format + rounding mode +
/// overflow policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizerConfig {
    pub format: FloatFormat,
    pub rounding: Rounding,
    pub overflow: Overflow,
}

impl QuantizerConfig {
    pub fn new(format: FloatFormat) -> Self {
        QuantizerConfig {
            format,
            rounding: Rounding::NearestEven,
            overflow: Overflow::Clip,
        }
    }

    pub fn with_rounding(mut self, rounding: Rounding) -> Self {
        self.rounding = rounding;
        self
    }

    pub fn with_overflow(mut self, overflow: Overflow) -> Self {
        self.overflow = overflow;
        self
    }
}

/// Round the scaled significand to an integer lattice index.
#[inline]
fn round_index(n: f64, rounding: Rounding, rng: &mut Option<&mut dyn RngCore>) -> u32 {
    match rounding {
        Rounding::NearestEven => n.round_ties_even() as u32,
        Rounding::Stochastic => {
            let floor = n.floor();
            let frac = n - floor;
            let mut k = floor as u32;
            if frac > 0.0 {
                let rng = rng.as_mut().expect("checked before dispatch");
                // 53 random bits -> uniform in [0, 1)
                let u = (rng.next_u64() >> 11) as f64 * exp2i(-53);
                if u < frac {
                    k += 1;
                }
            }
            k
        }
    }
}

/// Encode a finite in-range magnitude (`0 < a <= max_normal`) into
/// `(e_field, significand)` fields.
#[inline]
fn encode_magnitude(
    a: f64,
    format: &FloatFormat,
    rounding: Rounding,
    rng: &mut Option<&mut dyn RngCore>,
) -> (u32, u32) {
    let p = format.significand_bits() as i32;
    if format.exponent_bits() == 0 {
        // scaled integer: lattice step 2^(-bias)
        let n = a * exp2i(format.bias());
        let k = round_index(n, rounding, rng);
        return (0, k);
    }
    let lim = format.limits();
    let mut e = floor_log2(a).clamp(lim.e_min, lim.e_max);
    let n = a * exp2i(p - e);
    let mut k = round_index(n, rounding, rng);
    if k == 1 << (p + 1) {
        // rounded up across a binade boundary; a <= max_normal guarantees
        // this never pushes e past e_max
        e += 1;
        k = 1 << p;
    }
    if k < 1 << p {
        // subnormal (only reachable when e was clamped to e_min)
        (0, k)
    } else {
        ((e + format.bias()) as u32, k - (1u32 << p))
    }
}

/// Encode a working-precision value. NaN maps to the reserved codeword;
/// overflow handling follows the config's policy. Tiny values round to +0.
pub fn encode(
    x: f64,
    config: &QuantizerConfig,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Codeword, QuantError> {
    if config.rounding == Rounding::Stochastic && rng.is_none() {
        return Err(QuantError::MissingRng);
    }
    let format = &config.format;
    if x.is_nan() {
        return Ok(format.nan_codeword());
    }
    let sign = x.is_sign_negative();
    let a = x.abs();
    if a == 0.0 {
        return Ok(format.zero_codeword());
    }
    let lim = format.limits();
    if a > lim.max_normal {
        return Ok(match config.overflow {
            Overflow::Clip => {
                let top = ((1u32 << format.exponent_bits()) - 1) as u16;
                let m = ((1u32 << format.significand_bits()) - 1) as u16;
                Codeword::from_parts(sign, top, m, format)
            }
            Overflow::SignalNan => format.nan_codeword(),
        });
    }
    let (e_field, m) = encode_magnitude(a, format, config.rounding, &mut rng);
    if e_field == 0 && m == 0 {
        // rounded down to zero: +0 regardless of input sign
        return Ok(format.zero_codeword());
    }
    Ok(Codeword::from_parts(sign, e_field as u16, m as u16, format))
}

/// Simulated quantization: `decode(encode(x))`.
pub fn quantize(
    x: f64,
    config: &QuantizerConfig,
    rng: Option<&mut dyn RngCore>,
) -> Result<f64, QuantError> {
    Ok(config.format.decode(encode(x, config, rng)?))
}

/// Quantize a slice in place. Returns true iff any element's magnitude
/// exceeded `max_normal` (in signal mode those elements come out NaN).
pub fn quantize_slice(
    data: &mut [f64],
    config: &QuantizerConfig,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<bool, QuantError> {
    if config.rounding == Rounding::Stochastic && rng.is_none() {
        return Err(QuantError::MissingRng);
    }
    let max = config.format.limits().max_normal;
    let mut overflowed = false;
    for x in data.iter_mut() {
        if x.abs() > max {
            overflowed = true;
        }
        let rng_ref = rng.as_deref_mut().map(|r| r as &mut dyn RngCore);
        *x = config
            .format
            .decode(encode(*x, config, rng_ref).expect("rng presence checked"));
    }
    Ok(overflowed)
}

/// Elementwise quantize-dequantize of a tensor, plus the overflow flag
/// consumed by loss-scaling automata.
pub fn quantize_tensor(
    t: &Tensor,
    config: &QuantizerConfig,
    rng: Option<&mut dyn RngCore>,
) -> Result<(Tensor, bool), QuantError> {
    let mut out = t.clone();
    let flag = quantize_slice(out.data_mut(), config, rng)?;
    Ok((out, flag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fmt(e: u32, p: u32, b: i32) -> FloatFormat {
        FloatFormat::new(e, p, b).unwrap()
    }

    /// Brute-force nearest-value oracle over the enumerated codeword values,
    /// with the explicit tie rule: prefer the candidate with an even
    /// significand field; if both are even (p = 0 binade ties), the larger
    /// magnitude. Independent of the bit-level encode path.
    fn quantize_oracle(x: f64, format: &FloatFormat) -> f64 {
        let lim = format.limits();
        if x.abs() > lim.max_normal {
            return lim.max_normal * x.signum();
        }
        let values = format.enumerate_values();
        let mut best = values[0];
        let mut best_err = f64::INFINITY;
        for &v in &values {
            let err = (v - x).abs();
            if err < best_err {
                best = v;
                best_err = err;
            } else if err == best_err {
                let m_best = significand_field(best, format);
                let m_new = significand_field(v, format);
                let best_even = m_best.is_multiple_of(2);
                let new_even = m_new.is_multiple_of(2);
                if (new_even && !best_even) || (new_even && best_even && v.abs() > best.abs()) {
                    best = v;
                }
            }
        }
        best
    }

    fn significand_field(v: f64, format: &FloatFormat) -> u16 {
        let c = encode(v, &QuantizerConfig::new(*format), None).unwrap();
        c.raw() & ((1 << format.significand_bits()) - 1)
    }

    #[test]
    fn encode_unit_value() {
        let f = fmt(4, 3, 7);
        let c = encode(1.0, &QuantizerConfig::new(f), None).unwrap();
        assert_eq!(c, Codeword::from_parts(false, 7, 0, &f));
    }

    #[test]
    fn encode_clips_overflow() {
        let f = fmt(4, 3, 7);
        let c = encode(500.0, &QuantizerConfig::new(f), None).unwrap();
        assert_eq!(f.decode(c), 480.0);
        let c = encode(-500.0, &QuantizerConfig::new(f), None).unwrap();
        assert_eq!(f.decode(c), -480.0);
    }

    #[test]
    fn encode_signal_nan_on_overflow() {
        let f = fmt(4, 3, 7);
        let cfg = QuantizerConfig::new(f).with_overflow(Overflow::SignalNan);
        let c = encode(500.0, &cfg, None).unwrap();
        assert_eq!(c, f.nan_codeword());
        // in-range values are unaffected by the policy
        assert_eq!(f.decode(encode(1.0, &cfg, None).unwrap()), 1.0);
    }

    #[test]
    fn encode_tie_goes_to_even_significand() {
        let f = fmt(4, 3, 7);
        // midpoint of 1.0 (m=0) and 1.125 (m=1)
        let c = encode(1.0625, &QuantizerConfig::new(f), None).unwrap();
        assert_eq!(f.decode(c), 1.0);
        // midpoint of 1.125 and 1.25 -> 1.25 (m=2)
        let c = encode(1.1875, &QuantizerConfig::new(f), None).unwrap();
        assert_eq!(f.decode(c), 1.25);
    }

    #[test]
    fn encode_nan_input() {
        let f = fmt(4, 3, 7);
        let c = encode(f64::NAN, &QuantizerConfig::new(f), None).unwrap();
        assert_eq!(c, f.nan_codeword());
    }

    #[test]
    fn encode_matches_bruteforce_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        use rand::Rng;
        for f in [
            fmt(4, 3, 7),
            fmt(5, 2, 15),
            fmt(0, 7, 0),
            fmt(6, 1, 31),
            fmt(2, 5, 1),
        ] {
            let cfg = QuantizerConfig::new(f);
            let max = f.limits().max_normal;
            for _ in 0..2000 {
                // mix of uniform over the range and log-uniform small values
                let x: f64 = if rng.random_bool(0.5) {
                    rng.random_range(-1.5 * max..1.5 * max)
                } else {
                    let e: i32 = rng.random_range(-20..4);
                    rng.random_range(-1.0..1.0) * exp2i(e)
                };
                let got = quantize(x, &cfg, None).unwrap();
                let want = quantize_oracle(x, &f);
                assert_eq!(got, want, "format {f}, x = {x:e}");
            }
            // exact midpoints stress the tie rule
            let values = f.enumerate_values();
            for w in values.windows(2) {
                let mid = w[0] / 2.0 + w[1] / 2.0;
                let got = quantize(mid, &cfg, None).unwrap();
                let want = quantize_oracle(mid, &f);
                assert_eq!(got, want, "format {f}, midpoint of {:?}", w);
            }
        }
    }

    #[test]
    fn quantize_zero_and_tiny() {
        let f = fmt(4, 3, 7);
        let cfg = QuantizerConfig::new(f);
        assert_eq!(quantize(0.0, &cfg, None).unwrap(), 0.0);
        let half_min = f.limits().min_subnormal / 2.0;
        // below half the smallest positive value rounds to +0; at the
        // midpoint the even rule also picks 0
        assert_eq!(quantize(half_min * 0.99, &cfg, None).unwrap(), 0.0);
        assert_eq!(quantize(half_min, &cfg, None).unwrap(), 0.0);
        assert_eq!(
            quantize(half_min * 1.01, &cfg, None).unwrap(),
            f.limits().min_subnormal
        );
    }

    #[test]
    fn quantize_clip_boundary() {
        let f = fmt(4, 3, 7);
        let cfg = QuantizerConfig::new(f);
        let max = f.limits().max_normal;
        assert_eq!(quantize(max, &cfg, None).unwrap(), max);
        assert_eq!(quantize(max + 1e-9, &cfg, None).unwrap(), max);
        assert_eq!(quantize(1e18, &cfg, None).unwrap(), max);
    }

    #[test]
    fn quantize_exactly_representable() {
        let f = fmt(5, 2, 15);
        let cfg = QuantizerConfig::new(f);
        assert_eq!(quantize(3.0, &cfg, None).unwrap(), 3.0); // 1.5 * 2^1
        for &v in f.enumerate_values().iter() {
            assert_eq!(quantize(v, &cfg, None).unwrap(), v);
        }
    }

    #[test]
    fn stochastic_requires_rng() {
        let f = fmt(4, 3, 7);
        let cfg = QuantizerConfig::new(f).with_rounding(Rounding::Stochastic);
        assert_eq!(quantize(1.03, &cfg, None), Err(QuantError::MissingRng));
    }

    #[test]
    fn stochastic_exact_value_never_moves() {
        let f = fmt(4, 3, 7);
        let cfg = QuantizerConfig::new(f).with_rounding(Rounding::Stochastic);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let q = quantize(1.25, &cfg, Some(&mut rng)).unwrap();
            assert_eq!(q, 1.25);
        }
    }

    #[test]
    fn stochastic_brackets_value() {
        let f = fmt(4, 3, 7);
        let cfg = QuantizerConfig::new(f).with_rounding(Rounding::Stochastic);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = 1.1; // between 1.0 and 1.125
        let mut seen = [false; 2];
        for _ in 0..200 {
            let q = quantize(x, &cfg, Some(&mut rng)).unwrap();
            assert!(q == 1.0 || q == 1.125, "got {q}");
            seen[usize::from(q == 1.125)] = true;
        }
        assert!(seen[0] && seen[1]);
    }

    #[test]
    fn tensor_quantize_flags_overflow() {
        let f = fmt(4, 3, 7);
        let cfg = QuantizerConfig::new(f);
        let t = Tensor::new(vec![3], vec![0.0, 1.0, 1e6]).unwrap();
        let (q, flag) = quantize_tensor(&t, &cfg, None).unwrap();
        assert!(flag);
        assert_eq!(q.data(), &[0.0, 1.0, 480.0]);

        let t = Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap();
        let (q, flag) = quantize_tensor(&t, &cfg, None).unwrap();
        assert!(!flag);
        assert_eq!(q.data(), &[0.0; 4]);

        // representable values pass through untouched, no flag
        let vals: Vec<f64> = f.enumerate_values()[..8].to_vec();
        let t = Tensor::new(vec![vals.len()], vals.clone()).unwrap();
        let (q, flag) = quantize_tensor(&t, &cfg, None).unwrap();
        assert!(!flag);
        assert_eq!(q.data(), &vals[..]);
    }

    #[test]
    fn tensor_signal_mode_nans_overflowed_elements() {
        let f = fmt(4, 3, 7);
        let cfg = QuantizerConfig::new(f).with_overflow(Overflow::SignalNan);
        let t = Tensor::new(vec![3], vec![1.0, 481.0, -2.0]).unwrap();
        let (q, flag) = quantize_tensor(&t, &cfg, None).unwrap();
        assert!(flag);
        assert_eq!(q.data()[0], 1.0);
        assert!(q.data()[1].is_nan());
        assert_eq!(q.data()[2], -2.0);
    }
}
