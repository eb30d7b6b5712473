//! Automatic loss-scaling automata (Backoff and LogMax) and the exact
//! equivalence between power-of-two loss scales and exponent-bias shifts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{exp2i, floor_log2, FloatFormat};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScalingError {
    #[error("scale {0} is not a positive power of two")]
    NotPowerOfTwo(f64),
    #[error("per-batch max gradient magnitude must be positive, got {0}")]
    NonPositiveGradientMax(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepAction {
    ApplyUpdate,
    SkipUpdate,
}

/// Reactive loss scaling: halve the scale and skip the update on overflow,
/// double it after a fixed run of clean steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackoffConfig {
    /// Starting scale exponent.
    pub initial_scale_log2: i32,
    /// Consecutive clean steps before the scale doubles.
    pub patience: u32,
    /// Growth stops here to avoid unbounded doubling on overflow-free runs.
    pub max_scale_log2: i32,
    pub min_scale_log2: i32,
}

impl Default for BackoffConfig {
    fn default() -> Self {
        BackoffConfig {
            initial_scale_log2: 15,
            patience: 2000,
            max_scale_log2: 40,
            min_scale_log2: -40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backoff {
    config: BackoffConfig,
    scale_log2: i32,
    good_steps: u32,
}

impl Backoff {
    pub fn new(config: BackoffConfig) -> Self {
        Backoff {
            scale_log2: config.initial_scale_log2,
            good_steps: 0,
            config,
        }
    }

    pub fn scale_log2(&self) -> i32 {
        self.scale_log2
    }

    pub fn scale(&self) -> f64 {
        exp2i(self.scale_log2)
    }

    pub fn good_steps(&self) -> u32 {
        self.good_steps
    }

    /// Consume one step's overflow flag. Overflow halves the scale, resets
    /// the counter and skips the weight update; otherwise the update applies
    /// and after `patience` consecutive clean steps the scale doubles.
    pub fn step(&mut self, overflow: bool) -> StepAction {
        if overflow {
            self.scale_log2 = (self.scale_log2 - 1).max(self.config.min_scale_log2);
            self.good_steps = 0;
            return StepAction::SkipUpdate;
        }
        self.good_steps += 1;
        if self.good_steps >= self.config.patience {
            self.scale_log2 = (self.scale_log2 + 1).min(self.config.max_scale_log2);
            self.good_steps = 0;
        }
        StepAction::ApplyUpdate
    }
}

/// Predictive loss scaling: track mean and standard deviation of
/// `log2(max |grad|)` per mini-batch and aim `mu + c*sigma` at the top of
/// the representable range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogMaxConfig {
    /// Multiplier on the estimated standard deviation.
    pub c: f64,
    /// EMA coefficient: weight kept by the old estimate each batch. The
    /// paper gives no estimator window; this is our choice.
    pub decay: f64,
    /// `log2(max_normal)` of the gradient format.
    pub max_log2: f64,
}

impl LogMaxConfig {
    pub fn for_gradient_format(format: &FloatFormat, c: f64) -> Self {
        LogMaxConfig {
            c,
            decay: 0.9,
            max_log2: format.limits().max_normal.log2(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogMax {
    config: LogMaxConfig,
    mu: f64,
    var: f64,
    initialized: bool,
    scale_log2: i32,
}

impl LogMax {
    pub fn new(config: LogMaxConfig) -> Self {
        LogMax {
            config,
            mu: 0.0,
            var: 0.0,
            initialized: false,
            scale_log2: 0,
        }
    }

    pub fn mean(&self) -> f64 {
        self.mu
    }

    pub fn variance(&self) -> f64 {
        self.var
    }

    /// Scale chosen by the most recent step (1.0 before any step). Callers
    /// reuse this for zero-gradient batches, which must not touch the state.
    pub fn scale(&self) -> f64 {
        exp2i(self.scale_log2)
    }

    pub fn scale_log2(&self) -> i32 {
        self.scale_log2
    }

    /// Ingest one batch's max gradient magnitude and return the new scale,
    /// `2^floor(max_log2 - (mu + c*sigma))`, a positive power of two.
    pub fn step(&mut self, batch_max_abs_grad: f64) -> Result<f64, ScalingError> {
        if !batch_max_abs_grad.is_finite() || batch_max_abs_grad <= 0.0 {
            return Err(ScalingError::NonPositiveGradientMax(batch_max_abs_grad));
        }
        let z = batch_max_abs_grad.log2();
        if self.initialized {
            let alpha = 1.0 - self.config.decay;
            let delta = z - self.mu;
            self.mu += alpha * delta;
            self.var = self.config.decay * (self.var + alpha * delta * delta);
        } else {
            self.mu = z;
            self.var = 0.0;
            self.initialized = true;
        }
        let target = self.config.max_log2 - (self.mu + self.config.c * self.var.sqrt());
        self.scale_log2 = (target.floor() as i32).clamp(-1022, 1023);
        Ok(self.scale())
    }
}

/// Bias that makes an unscaled run equivalent to running with this
/// power-of-two loss scale: `base_bias + log2(scale)`.
pub fn effective_bias(scale: f64, base_bias: i32) -> Result<i32, ScalingError> {
    if !scale.is_finite() || scale <= 0.0 {
        return Err(ScalingError::NotPowerOfTwo(scale));
    }
    let bits = scale.to_bits();
    let mantissa = bits & ((1u64 << 52) - 1);
    let biased = (bits >> 52) & 0x7ff;
    let exact_pow2 = if biased != 0 {
        mantissa == 0
    } else {
        mantissa.count_ones() == 1
    };
    if !exact_pow2 {
        return Err(ScalingError::NotPowerOfTwo(scale));
    }
    Ok(base_bias + floor_log2(scale))
}

/// One line of a gradient-magnitude trace: per-step max |grad| plus the
/// overflow flag from the quantizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub step: u64,
    pub max_abs_grad: f64,
    pub overflow: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimRow {
    pub step: u64,
    pub scale: f64,
    pub action: StepAction,
}

/// Replay a trace through Backoff; each row reports the scale in effect at
/// that step and whether its update applied.
pub fn simulate_backoff(records: &[TraceRecord], config: BackoffConfig) -> Vec<SimRow> {
    let mut automaton = Backoff::new(config);
    records
        .iter()
        .map(|r| {
            let scale = automaton.scale();
            let action = automaton.step(r.overflow);
            SimRow {
                step: r.step,
                scale,
                action,
            }
        })
        .collect()
}

/// Replay a trace through LogMax (updates always apply; overflow is handled
/// by clipping). Zero-gradient steps reuse the previous scale unchanged.
pub fn simulate_logmax(
    records: &[TraceRecord],
    config: LogMaxConfig,
) -> Result<Vec<SimRow>, ScalingError> {
    let mut automaton = LogMax::new(config);
    let mut rows = Vec::with_capacity(records.len());
    for r in records {
        let scale = if r.max_abs_grad == 0.0 {
            automaton.scale()
        } else {
            automaton.step(r.max_abs_grad)?
        };
        rows.push(SimRow {
            step: r.step,
            scale,
            action: StepAction::ApplyUpdate,
        });
    }
    Ok(rows)
}
