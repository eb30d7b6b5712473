//! Configurable narrow floating-point formats (1 sign bit, E exponent bits,
//! p significand bits, arbitrary exponent bias) with bit-exact quantization,
//! analytic quantization-noise models, exponent-histogram bias selection,
//! automatic loss-scaling automata, and a small quantization-aware MLP
//! trainer demonstrating the mixed-precision recipe.
//!
//! ```
//! use lp8::{quantize, FloatFormat, QuantizerConfig};
//!
//! let format: FloatFormat = "1.4.3:b7".parse()?;
//! assert_eq!(format.limits().max_normal, 480.0);
//! // 1.0625 sits exactly between 1.0 and 1.125; the tie goes to the even
//! // significand
//! let q = quantize(1.0625, &QuantizerConfig::new(format), None)?;
//! assert_eq!(q, 1.0);
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

pub mod format;
pub mod hist;
pub mod noise;
pub mod quant;
pub mod scaling;
pub mod tensor;
pub mod trainer;

pub use format::{Codeword, FloatFormat, FormatError, FormatLimits};
pub use hist::{coverage, suggest_bias, Coverage, ExponentHistogram, HistError};
pub use noise::{
    dynamic_range_db, dynamic_range_db_fixed, dynamic_range_db_float, named_descriptor,
    noise_components_fixed, snr_db_empirical, snr_db_fixed_model, snr_db_float_model,
    FloatDescriptor, FormatReport, NoiseBreakdown, NoiseError,
};
pub use quant::{
    encode, quantize, quantize_slice, quantize_tensor, Overflow, QuantError, QuantizerConfig,
    Rounding,
};
pub use scaling::{
    effective_bias, simulate_backoff, simulate_logmax, Backoff, BackoffConfig, LogMax,
    LogMaxConfig, ScalingError, SimRow, StepAction, TraceRecord,
};
pub use tensor::{Tensor, TensorError};
