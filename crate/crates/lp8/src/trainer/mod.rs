//! Desk-scale quantization-aware trainer: a small MLP with manual gradients,
//! per-site quantizer injection, fp32 master weights, SGD with momentum, and
//! the loss-scaling automata wired to the gradient overflow flag.

pub mod data;
pub mod matrix;
pub mod model;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{exp2i, FloatFormat};
use crate::quant::{Overflow, QuantError, QuantizerConfig, Rounding};
use crate::scaling::{Backoff, BackoffConfig, LogMax, LogMaxConfig, StepAction};

pub use data::{Dataset, TaskConfig};
pub use matrix::Matrix;
pub use model::{
    accuracy, forward_backward, seeded_stream, sgd_momentum_step, BatchStats, DenseLayer,
    ForwardBackward, Gradients, Mlp, Momentum, SiteTensors,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged (loss became NaN) at step {step}, epoch {epoch}")]
    Diverged { step: u64, epoch: u32 },
    #[error("recipe has no quantizer at site {0:?} to sweep")]
    MissingSite(SweepSite),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error("bad configuration: {0}")]
    Config(String),
    #[error("bad recipe: {0}")]
    Recipe(String),
}

/// Loss-scaling strategy for a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossScaler {
    #[default]
    None,
    /// Constant scale `2^k`.
    Fixed(i32),
    Backoff,
    /// LogMax with the given sigma multiplier `c`.
    LogMax(f64),
}

/// Which quantizer sits at each quantization point. `None` means full
/// working precision at that site.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantRecipe {
    pub activations: Option<QuantizerConfig>,
    pub weights: Option<QuantizerConfig>,
    pub grad_activations: Option<QuantizerConfig>,
    pub grad_weights: Option<QuantizerConfig>,
    pub quantize_first_layer_input: bool,
    pub quantize_first_layer_grad: bool,
    pub loss_scaler: LossScaler,
}

impl QuantRecipe {
    /// Everything in working precision, no scaling.
    pub fn fp32() -> Self {
        QuantRecipe {
            activations: None,
            weights: None,
            grad_activations: None,
            grad_weights: None,
            quantize_first_layer_input: false,
            quantize_first_layer_grad: false,
            loss_scaler: LossScaler::None,
        }
    }

    /// The robust mixed-precision recipe: 1.4.3 activations and weights,
    /// 1.5.2 gradients at the natural bias, Backoff loss scaling.
    pub fn mixed_demo() -> Self {
        let f143: FloatFormat = "1.4.3:b7".parse().expect("static format");
        let f152: FloatFormat = "1.5.2:b15".parse().expect("static format");
        QuantRecipe {
            activations: Some(QuantizerConfig::new(f143)),
            weights: Some(QuantizerConfig::new(f143)),
            grad_activations: Some(QuantizerConfig::new(f152)),
            grad_weights: Some(QuantizerConfig::new(f152)),
            quantize_first_layer_input: false,
            quantize_first_layer_grad: false,
            loss_scaler: LossScaler::Backoff,
        }
    }

    fn site_mut(&mut self, site: SweepSite) -> &mut Option<QuantizerConfig> {
        match site {
            SweepSite::Activations => &mut self.activations,
            SweepSite::Weights => &mut self.weights,
            SweepSite::GradActivations => &mut self.grad_activations,
            SweepSite::GradWeights => &mut self.grad_weights,
        }
    }
}

/// Serde-facing recipe: sites are format strings or detailed objects, e.g.
/// `{"activations": "1.4.3:b7", "grad_activations": {"format": "1.5.2",
/// "overflow": "signal-nan"}, "loss_scaler": "backoff"}`.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RecipeSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activations: Option<SiteSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<SiteSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_activations: Option<SiteSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_weights: Option<SiteSpec>,
    #[serde(default)]
    pub quantize_first_layer_input: bool,
    #[serde(default)]
    pub quantize_first_layer_grad: bool,
    #[serde(default)]
    pub loss_scaler: LossScaler,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SiteSpec {
    Format(String),
    Detailed {
        format: String,
        #[serde(default)]
        rounding: Rounding,
        #[serde(default)]
        overflow: Overflow,
    },
}

impl SiteSpec {
    fn compile(&self) -> Result<QuantizerConfig, TrainError> {
        let (format_str, rounding, overflow) = match self {
            SiteSpec::Format(s) => (s.as_str(), Rounding::NearestEven, Overflow::Clip),
            SiteSpec::Detailed {
                format,
                rounding,
                overflow,
            } => (format.as_str(), *rounding, *overflow),
        };
        let format: FloatFormat = format_str
            .parse()
            .map_err(|e| TrainError::Recipe(format!("{e}")))?;
        Ok(QuantizerConfig {
            format,
            rounding,
            overflow,
        })
    }
}

impl TryFrom<&RecipeSpec> for QuantRecipe {
    type Error = TrainError;

    fn try_from(spec: &RecipeSpec) -> Result<Self, Self::Error> {
        let compile = |s: &Option<SiteSpec>| s.as_ref().map(|s| s.compile()).transpose();
        Ok(QuantRecipe {
            activations: compile(&spec.activations)?,
            weights: compile(&spec.weights)?,
            grad_activations: compile(&spec.grad_activations)?,
            grad_weights: compile(&spec.grad_weights)?,
            quantize_first_layer_input: spec.quantize_first_layer_input,
            quantize_first_layer_grad: spec.quantize_first_layer_grad,
            loss_scaler: spec.loss_scaler,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub layer_sizes: Vec<usize>,
    pub batch_size: usize,
    /// Per-sample base rate; the effective learning rate is
    /// `batch_size * base_learning_rate`.
    pub base_learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: u32,
    /// Fractions of the total iteration count at which the learning rate
    /// multiplies by `lr_decay_factor`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay_factor: f64,
    pub seed: u64,
    pub recipe: QuantRecipe,
    pub task: TaskConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            layer_sizes: vec![16, 32, 32, 4],
            batch_size: 32,
            base_learning_rate: exp2i(-9),
            momentum: 0.9,
            weight_decay: 2e-4,
            epochs: 30,
            lr_milestones: vec![0.5, 0.75],
            lr_decay_factor: 0.1,
            seed: 0,
            recipe: QuantRecipe::fp32(),
            task: TaskConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub train_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsTrace {
    pub epochs: Vec<EpochMetrics>,
    pub final_accuracy: f64,
    /// Steps whose gradients overflowed their format's range.
    pub overflow_steps: u64,
    /// Steps the loss-scaling automaton told the optimizer to skip.
    pub skipped_steps: u64,
    /// `(step, log2 scale)` whenever the scale changed, starting value first.
    pub scale_trajectory: Vec<(u64, i32)>,
}

impl MetricsTrace {
    /// The parts that must be reproducible across scaling-equivalent runs
    /// (everything except the scale trajectory itself).
    pub fn learning_outcome(&self) -> (&[EpochMetrics], f64, u64, u64) {
        (
            &self.epochs,
            self.final_accuracy,
            self.overflow_steps,
            self.skipped_steps,
        )
    }
}

fn scale_log2_of(scale: f64) -> i32 {
    crate::format::floor_log2(scale)
}

/// Train on the built-in synthetic task. Deterministic given the config's
/// seed. When Backoff is the scaler, gradient sites are switched to
/// signal-NaN overflow so the automaton observes gradient overflows
/// instead of silently clipped values.
pub fn train(config: &TrainConfig) -> Result<MetricsTrace, TrainError> {
    if config.layer_sizes.len() < 2 {
        return Err(TrainError::Config("need at least one layer".into()));
    }
    if config.layer_sizes[0] != config.task.dim
        || *config.layer_sizes.last().unwrap() != config.task.classes
    {
        return Err(TrainError::Config(format!(
            "layer sizes {:?} do not match task dim {} -> classes {}",
            config.layer_sizes, config.task.dim, config.task.classes
        )));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(TrainError::Config(
            "batch size and epochs must be positive".into(),
        ));
    }

    let mut recipe = config.recipe.clone();
    if recipe.loss_scaler == LossScaler::Backoff {
        for cfg in [&mut recipe.grad_activations, &mut recipe.grad_weights]
            .into_iter()
            .flatten()
        {
            cfg.overflow = Overflow::SignalNan;
        }
    }

    let dataset = Dataset::generate(&config.task, config.seed);
    let mut init_rng = seeded_stream(config.seed, 1);
    let mut model = Mlp::init(&config.layer_sizes, &mut init_rng);
    let mut velocity = Momentum::zeros_like(&model);
    let mut shuffle_rng = seeded_stream(config.seed, 2);
    let mut quant_rng = seeded_stream(config.seed, 3);

    let uses_stochastic = [
        &recipe.activations,
        &recipe.weights,
        &recipe.grad_activations,
        &recipe.grad_weights,
    ]
    .iter()
    .any(|s| matches!(s, Some(c) if c.rounding == Rounding::Stochastic));

    let mut backoff = Backoff::new(BackoffConfig::default());
    let mut logmax = recipe.grad_weights.as_ref().map(|cfg| {
        let c = match recipe.loss_scaler {
            LossScaler::LogMax(c) => c,
            _ => 0.0,
        };
        LogMax::new(LogMaxConfig::for_gradient_format(&cfg.format, c))
    });

    let batches_per_epoch = dataset.train_y.len() / config.batch_size;
    let total_iters = u64::from(config.epochs) * batches_per_epoch as u64;
    let base_lr = config.batch_size as f64 * config.base_learning_rate;
    let lr_at = |iter: u64| {
        let frac = iter as f64 / total_iters as f64;
        let drops = config.lr_milestones.iter().filter(|&&m| frac >= m).count();
        base_lr * config.lr_decay_factor.powi(drops as i32)
    };

    let mut indices: Vec<usize> = (0..dataset.train_y.len()).collect();
    let mut trace = MetricsTrace {
        epochs: Vec::with_capacity(config.epochs as usize),
        final_accuracy: 0.0,
        overflow_steps: 0,
        skipped_steps: 0,
        scale_trajectory: Vec::new(),
    };

    let mut step: u64 = 0;
    for epoch in 0..config.epochs {
        use rand::seq::SliceRandom;
        indices.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in indices.chunks_exact(config.batch_size) {
            let x = dataset.train_x.gather_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| dataset.train_y[i]).collect();

            let scale = match recipe.loss_scaler {
                LossScaler::None => 1.0,
                LossScaler::Fixed(k) => exp2i(k),
                LossScaler::Backoff => backoff.scale(),
                LossScaler::LogMax(_) => logmax.as_ref().map(|l| l.scale()).unwrap_or(1.0),
            };
            if trace
                .scale_trajectory
                .last()
                .is_none_or(|&(_, l)| l != scale_log2_of(scale))
            {
                trace.scale_trajectory.push((step, scale_log2_of(scale)));
            }

            let rng = uses_stochastic.then_some(&mut quant_rng);
            let fb = forward_backward(&model, &x, &y, &recipe, scale, rng, false)?;
            if fb.loss.is_nan() {
                return Err(TrainError::Diverged { step, epoch });
            }
            epoch_loss += fb.loss;
            if fb.stats.grad_overflow {
                trace.overflow_steps += 1;
            }

            let apply = match recipe.loss_scaler {
                LossScaler::Backoff => {
                    backoff.step(fb.stats.grad_overflow) == StepAction::ApplyUpdate
                }
                _ => true,
            };
            if let (LossScaler::LogMax(_), Some(lm)) = (recipe.loss_scaler, logmax.as_mut()) {
                if fb.max_abs_grad_w > 0.0 {
                    lm.step(fb.max_abs_grad_w)
                        .map_err(|e| TrainError::Config(format!("logmax: {e}")))?;
                }
            }
            if apply {
                sgd_momentum_step(
                    &mut model,
                    &mut velocity,
                    &fb.grads,
                    lr_at(step),
                    config.momentum,
                    config.weight_decay,
                    scale,
                );
            } else {
                trace.skipped_steps += 1;
            }
            step += 1;
        }
        let test_accuracy = accuracy(&model, &recipe, &dataset.test_x, &dataset.test_y);
        trace.epochs.push(EpochMetrics {
            epoch,
            train_loss: epoch_loss / batches_per_epoch as f64,
            test_accuracy,
        });
    }
    trace.final_accuracy = trace.epochs.last().map(|e| e.test_accuracy).unwrap_or(0.0);
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepSite {
    Activations,
    Weights,
    GradActivations,
    GradWeights,
}

impl std::str::FromStr for SweepSite {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "activations" | "acts" => Ok(SweepSite::Activations),
            "weights" => Ok(SweepSite::Weights),
            "grad-activations" | "grad-acts" | "grad_x" => Ok(SweepSite::GradActivations),
            "grad-weights" | "grad_w" => Ok(SweepSite::GradWeights),
            _ => Err(format!("unknown sweep site `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub bias: i32,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub diverged_runs: u32,
}

/// Re-run training at each integer bias for one site, `repeats` seeds per
/// bias (seeds `base.seed..base.seed+repeats`). Diverged runs score 0
/// accuracy, mirroring how failed runs are reported in sweep tables.
pub fn sweep_bias(
    base: &TrainConfig,
    site: SweepSite,
    biases: std::ops::RangeInclusive<i32>,
    repeats: u64,
) -> Result<Vec<SweepPoint>, TrainError> {
    let template = base
        .recipe
        .clone()
        .site_mut(site)
        .take()
        .ok_or(TrainError::MissingSite(site))?;
    let mut points = Vec::new();
    for bias in biases {
        let format = template
            .format
            .with_bias(bias)
            .map_err(|e| TrainError::Config(format!("bias {bias}: {e}")))?;
        let mut config = base.clone();
        *config.recipe.site_mut(site) = Some(QuantizerConfig { format, ..template });
        let mut accs = Vec::with_capacity(repeats as usize);
        let mut diverged = 0u32;
        for r in 0..repeats {
            config.seed = base.seed + r;
            match train(&config) {
                Ok(trace) => accs.push(trace.final_accuracy),
                Err(TrainError::Diverged { .. }) => {
                    diverged += 1;
                    accs.push(0.0);
                }
                Err(e) => return Err(e),
            }
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / accs.len() as f64;
        points.push(SweepPoint {
            bias,
            mean_accuracy: mean,
            std_accuracy: var.sqrt(),
            diverged_runs: diverged,
        });
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            task: TaskConfig {
                train_samples: 512,
                test_samples: 256,
                ..TaskConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = quick_config();
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(a, b);
        let c = train(&TrainConfig {
            seed: 1,
            ..quick_config()
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn stochastic_recipe_is_deterministic_given_seed() {
        let f = "1.4.3:b7".parse().unwrap();
        let cfg = TrainConfig {
            recipe: QuantRecipe {
                weights: Some(QuantizerConfig::new(f).with_rounding(Rounding::Stochastic)),
                ..QuantRecipe::fp32()
            },
            ..quick_config()
        };
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            layer_sizes: vec![8, 4],
            ..quick_config()
        };
        assert!(matches!(train(&bad), Err(TrainError::Config(_))));
    }

    #[test]
    fn runaway_loss_aborts_with_divergence_diagnostic() {
        let cfg = TrainConfig {
            base_learning_rate: 4.0,
            ..quick_config()
        };
        assert!(matches!(train(&cfg), Err(TrainError::Diverged { .. })));
    }

    #[test]
    fn fixed_scale_matches_bias_shift_bitwise() {
        // loss scale 2^k with gradient formats at bias b gives the same
        // learning trajectory as no scaling at bias b+k
        let k = 6;
        let f152: FloatFormat = "1.5.2:b15".parse().unwrap();
        let scaled = TrainConfig {
            recipe: QuantRecipe {
                grad_activations: Some(QuantizerConfig::new(f152)),
                grad_weights: Some(QuantizerConfig::new(f152)),
                loss_scaler: LossScaler::Fixed(k),
                ..QuantRecipe::fp32()
            },
            ..quick_config()
        };
        let shifted_format = f152.with_bias(15 + k).unwrap();
        let shifted = TrainConfig {
            recipe: QuantRecipe {
                grad_activations: Some(QuantizerConfig::new(shifted_format)),
                grad_weights: Some(QuantizerConfig::new(shifted_format)),
                loss_scaler: LossScaler::None,
                ..QuantRecipe::fp32()
            },
            ..quick_config()
        };
        let a = train(&scaled).unwrap();
        let b = train(&shifted).unwrap();
        assert_eq!(a.learning_outcome(), b.learning_outcome());
        for (ea, eb) in a.epochs.iter().zip(&b.epochs) {
            assert_eq!(ea.train_loss.to_bits(), eb.train_loss.to_bits());
        }
    }

    #[test]
    fn recipe_spec_parses_strings_and_objects() {
        let json = r#"{
            "activations": "1.4.3:b7",
            "grad_activations": {"format": "1.5.2", "overflow": "signal-nan"},
            "loss_scaler": "backoff"
        }"#;
        let spec: RecipeSpec = serde_json::from_str(json).unwrap();
        let recipe = QuantRecipe::try_from(&spec).unwrap();
        let acts = recipe.activations.unwrap();
        assert_eq!(acts.format.to_string(), "1.4.3:b7");
        assert_eq!(acts.overflow, Overflow::Clip);
        let gx = recipe.grad_activations.unwrap();
        assert_eq!(gx.format.bias(), 15);
        assert_eq!(gx.overflow, Overflow::SignalNan);
        assert!(recipe.weights.is_none());
        assert_eq!(recipe.loss_scaler, LossScaler::Backoff);

        let json = r#"{"loss_scaler": {"fixed": 22}}"#;
        let spec: RecipeSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.loss_scaler, LossScaler::Fixed(22));
        let json = r#"{"loss_scaler": {"log-max": 1.5}}"#;
        let spec: RecipeSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.loss_scaler, LossScaler::LogMax(1.5));
    }

    #[test]
    fn recipe_spec_rejects_bad_format() {
        let json = r#"{"weights": "2.4.3"}"#;
        let spec: RecipeSpec = serde_json::from_str(json).unwrap();
        assert!(matches!(
            QuantRecipe::try_from(&spec),
            Err(TrainError::Recipe(_))
        ));
    }

    #[test]
    fn sweep_requires_the_site() {
        let err = sweep_bias(&quick_config(), SweepSite::GradActivations, 0..=1, 1);
        assert!(matches!(err, Err(TrainError::MissingSite(_))));
    }
}
