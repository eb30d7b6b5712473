//! Parametric narrow floating-point formats: 1 sign bit, `E` exponent bits,
//! `p` explicitly stored significand bits, and an arbitrary integer exponent
//! bias.
//!
//! Conventions:
//! - The all-ones exponent field encodes ordinary normal values (extended
//!   range); only the single codeword `sign=1, everything else 0` (the bit
//!   pattern of negative zero) is reserved for NaN.
//! - `E >= 1` formats have subnormals; `E = 0` is the scaled-integer family
//!   where a codeword decodes to `(-1)^s * m * 2^(-bias)`.
//! - All decoded values are exact in f64; construction rejects biases that
//!   would push any codeword outside the normal f64 range.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Maximum total width (sign + exponent + significand) of a format.
pub const MAX_TOTAL_BITS: u32 = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("invalid format dimensions: {0}")]
    InvalidDimensions(String),
    #[error("malformed format string `{0}`, expected `1.<E>.<p>[:b<bias>]`")]
    Parse(String),
}

/// Exact `2^k` for `k` in the normal f64 exponent range.
#[inline]
pub(crate) fn exp2i(k: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&k), "exp2i out of range: {k}");
    f64::from_bits(((k + 1023) as u64) << 52)
}

/// Exact `floor(log2(x))` for finite positive `x`, including f64 subnormals.
#[inline]
pub(crate) fn floor_log2(x: f64) -> i32 {
    debug_assert!(x > 0.0 && x.is_finite());
    let bits = x.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    if biased != 0 {
        biased - 1023
    } else {
        let mantissa = bits & ((1u64 << 52) - 1);
        -1074 + (63 - mantissa.leading_zeros() as i32)
    }
}

/// A narrow floating-point (or scaled-integer) format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FloatFormat {
    exponent_bits: u8,
    significand_bits: u8,
    bias: i32,
}

/// Derived representable-range constants of a [`FloatFormat`].
///
/// For `E = 0` there is no exponent field; `e_min`/`e_max` both report the
/// scale exponent `-bias`, `min_normal` and `min_subnormal` both equal the
/// smallest positive value `2^(-bias)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FormatLimits {
    /// Minimum normal exponent, `1 - bias`.
    pub e_min: i32,
    /// Maximum exponent, `2^E - 1 - bias` (all-ones field included).
    pub e_max: i32,
    /// Largest finite value, `2^e_max * (2 - 2^-p)`.
    pub max_normal: f64,
    /// Smallest positive normal, `2^e_min`.
    pub min_normal: f64,
    /// Smallest positive value, `2^(e_min - p)`.
    pub min_subnormal: f64,
}

/// An encoded value: the low `total_bits` of `raw` hold
/// `[sign | exponent field | significand field]`, sign in the top position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Codeword(pub(crate) u16);

impl Codeword {
    pub fn from_raw(raw: u16, format: &FloatFormat) -> Result<Self, FormatError> {
        if u32::from(raw) >> format.total_bits() != 0 {
            return Err(FormatError::InvalidDimensions(format!(
                "raw codeword {raw:#x} wider than {} bits",
                format.total_bits()
            )));
        }
        Ok(Codeword(raw))
    }

    /// Assemble a codeword from its fields.
    pub fn from_parts(sign: bool, e_field: u16, significand: u16, format: &FloatFormat) -> Self {
        let e = format.exponent_bits as u32;
        let p = format.significand_bits as u32;
        debug_assert!(e == 0 || u32::from(e_field) < (1 << e));
        debug_assert!(p == 0 || u32::from(significand) < (1 << p));
        Codeword((u16::from(sign) << (e + p)) | (e_field << p) | significand)
    }

    #[inline]
    pub fn raw(self) -> u16 {
        self.0
    }
}

impl FloatFormat {
    /// Validate and build a format. `E + p >= 1`, `1 + E + p <= 16`, and the
    /// bias must keep every codeword value inside the normal f64 range.
    pub fn new(exponent_bits: u32, significand_bits: u32, bias: i32) -> Result<Self, FormatError> {
        if exponent_bits + significand_bits == 0 {
            return Err(FormatError::InvalidDimensions(
                "need at least one exponent or significand bit".into(),
            ));
        }
        if 1 + exponent_bits + significand_bits > MAX_TOTAL_BITS {
            return Err(FormatError::InvalidDimensions(format!(
                "total width 1+{exponent_bits}+{significand_bits} exceeds {MAX_TOTAL_BITS} bits"
            )));
        }
        let (lo, hi) = Self::bias_range(exponent_bits, significand_bits);
        if !(lo..=hi).contains(&bias) {
            return Err(FormatError::InvalidDimensions(format!(
                "bias {bias} outside representable range [{lo}, {hi}] for 1.{exponent_bits}.{significand_bits}"
            )));
        }
        Ok(FloatFormat {
            exponent_bits: exponent_bits as u8,
            significand_bits: significand_bits as u8,
            bias,
        })
    }

    /// Same format with the IEEE-style natural bias `2^(E-1) - 1` (0 for E = 0).
    pub fn with_natural_bias(
        exponent_bits: u32,
        significand_bits: u32,
    ) -> Result<Self, FormatError> {
        Self::new(
            exponent_bits,
            significand_bits,
            Self::natural_bias(exponent_bits),
        )
    }

    pub fn natural_bias(exponent_bits: u32) -> i32 {
        if exponent_bits == 0 {
            0
        } else {
            (1i32 << (exponent_bits - 1)) - 1
        }
    }

    /// Admissible bias interval keeping all codeword values, and the scaled
    /// significand used during rounding, exact normal f64.
    pub fn bias_range(exponent_bits: u32, significand_bits: u32) -> (i32, i32) {
        let p = significand_bits as i32;
        if exponent_bits == 0 {
            // values m * 2^(-bias), m < 2^p
            (-(1022 - p), 1022)
        } else {
            let e_top = (1i32 << exponent_bits) - 1;
            // e_max = e_top - bias <= 1022  and  e_min - p = 1 - bias - p >= -1022
            (e_top - 1022, 1023 - p)
        }
    }

    #[inline]
    pub fn exponent_bits(&self) -> u32 {
        self.exponent_bits as u32
    }

    #[inline]
    pub fn significand_bits(&self) -> u32 {
        self.significand_bits as u32
    }

    #[inline]
    pub fn bias(&self) -> i32 {
        self.bias
    }

    #[inline]
    pub fn total_bits(&self) -> u32 {
        1 + self.exponent_bits as u32 + self.significand_bits as u32
    }

    /// Significand precision including the hidden bit, `p + 1`.
    #[inline]
    pub fn precision_total(&self) -> u32 {
        self.significand_bits as u32 + 1
    }

    /// Same `1.E.p` family at a different bias.
    pub fn with_bias(&self, bias: i32) -> Result<Self, FormatError> {
        Self::new(self.exponent_bits(), self.significand_bits(), bias)
    }

    /// Raw bit pattern of the reserved NaN codeword (sign set, all else 0).
    #[inline]
    pub fn nan_raw(&self) -> u16 {
        1 << (self.exponent_bits as u32 + self.significand_bits as u32)
    }

    #[inline]
    pub fn nan_codeword(&self) -> Codeword {
        Codeword(self.nan_raw())
    }

    #[inline]
    pub fn zero_codeword(&self) -> Codeword {
        Codeword(0)
    }

    pub fn limits(&self) -> FormatLimits {
        let p = self.significand_bits as i32;
        if self.exponent_bits == 0 {
            let scale = exp2i(-self.bias);
            let max = ((1u32 << p) - 1) as f64 * scale;
            FormatLimits {
                e_min: -self.bias,
                e_max: -self.bias,
                max_normal: max,
                min_normal: scale,
                min_subnormal: scale,
            }
        } else {
            let e_min = 1 - self.bias;
            let e_max = (1i32 << self.exponent_bits) - 1 - self.bias;
            FormatLimits {
                e_min,
                e_max,
                max_normal: exp2i(e_max) * (2.0 - exp2i(-p)),
                min_normal: exp2i(e_min),
                min_subnormal: exp2i(e_min - p),
            }
        }
    }

    /// Decode a codeword to its exact f64 value; the reserved pattern gives NaN.
    pub fn decode(&self, c: Codeword) -> f64 {
        let raw = c.0;
        if raw == self.nan_raw() {
            return f64::NAN;
        }
        let e_bits = self.exponent_bits as u32;
        let p = self.significand_bits as u32;
        let sign = raw >> (e_bits + p) != 0;
        let m = u32::from(raw) & ((1u32 << p) - 1);
        // Unified integer-times-power-of-two form: value = k * 2^shift.
        let (k, shift) = if e_bits == 0 {
            (m, -self.bias)
        } else {
            let e_field = (u32::from(raw) >> p) & ((1u32 << e_bits) - 1);
            if e_field == 0 {
                // subnormal: m/2^p * 2^(1 - bias)
                (m, 1 - self.bias - p as i32)
            } else {
                // normal: (1 + m/2^p) * 2^(e_field - bias)
                (m + (1 << p), e_field as i32 - self.bias - p as i32)
            }
        };
        if k == 0 {
            return 0.0;
        }
        let magnitude = k as f64 * exp2i(shift);
        if sign {
            -magnitude
        } else {
            magnitude
        }
    }

    /// All finite decoded values, ascending. `2^total_bits - 1` entries
    /// (every codeword except the NaN pattern; zero appears once as +0).
    pub fn enumerate_values(&self) -> Vec<f64> {
        let n = 1u32 << self.total_bits();
        let mut values: Vec<f64> = (0..n as u16)
            .filter(|&raw| raw != self.nan_raw())
            .map(|raw| self.decode(Codeword(raw)))
            .collect();
        values.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
        values
    }
}

impl fmt::Display for FloatFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "1.{}.{}:b{}",
            self.exponent_bits, self.significand_bits, self.bias
        )
    }
}

impl FromStr for FloatFormat {
    type Err = FormatError;

    /// Grammar: `1.<E>.<p>[:b<bias>]`; omitted bias means the natural bias.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parse_err = || FormatError::Parse(s.to_string());
        let (spec, bias_part) = match s.split_once(":b") {
            Some((head, tail)) => (head, Some(tail)),
            None => (s, None),
        };
        let mut it = spec.split('.');
        let one = it.next().ok_or_else(parse_err)?;
        let e_str = it.next().ok_or_else(parse_err)?;
        let p_str = it.next().ok_or_else(parse_err)?;
        if one != "1" || it.next().is_some() {
            return Err(parse_err());
        }
        let e: u32 = e_str.parse().map_err(|_| parse_err())?;
        let p: u32 = p_str.parse().map_err(|_| parse_err())?;
        match bias_part {
            Some(b) => {
                let bias: i32 = b.parse().map_err(|_| parse_err())?;
                FloatFormat::new(e, p, bias)
            }
            None => FloatFormat::with_natural_bias(e, p),
        }
    }
}
