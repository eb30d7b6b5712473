//! The MLP with manually derived gradients and the quantization placement:
//! inputs to every matrix multiplication (activations and weights forward,
//! incoming gradients backward) pass through their site's quantizer, and
//! weight gradients are quantized before the optimizer sees them. The first
//! layer's input and the gradient arriving at the first layer's output can
//! each be exempted. Accumulation and the master weights stay in working
//! precision; layer biases are never quantized.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::matrix::Matrix;
use super::QuantRecipe;
use crate::quant::{quantize_slice, QuantError, QuantizerConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `fan_in x fan_out`, row-major.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    /// He-normal initialization from a seeded stream.
    pub fn init(sizes: &[usize], rng: &mut ChaCha8Rng) -> Mlp {
        assert!(sizes.len() >= 2);
        let layers = sizes
            .windows(2)
            .map(|pair| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let std = (2.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        z * std
                    })
                    .collect();
                DenseLayer {
                    weights: Matrix::from_vec(fan_in, fan_out, data),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.data().len() + l.bias.len())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub bias: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Momentum {
    pub weights: Vec<Matrix>,
    pub bias: Vec<Vec<f64>>,
}

impl Momentum {
    pub fn zeros_like(model: &Mlp) -> Momentum {
        Momentum {
            weights: model
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.weights.rows(), l.weights.cols()))
                .collect(),
            bias: model
                .layers
                .iter()
                .map(|l| vec![0.0; l.bias.len()])
                .collect(),
        }
    }
}

/// Everything that flowed through each quantization site during one
/// forward/backward pass, captured on request for site-level checks.
#[derive(Debug, Clone, Default)]
pub struct SiteTensors {
    /// Layer inputs before the activation site.
    pub act_raw: Vec<Matrix>,
    /// Layer inputs as consumed by the matmul (after the site, if active).
    pub act_used: Vec<Matrix>,
    /// Weights as consumed by the matmuls.
    pub weights_used: Vec<Matrix>,
    /// Incoming gradient per layer before the grad-activation site.
    pub grad_z_raw: Vec<Matrix>,
    /// Incoming gradient as consumed by the backward matmuls.
    pub grad_z_used: Vec<Matrix>,
    /// Weight gradients before the grad-weight site.
    pub grad_w_raw: Vec<Matrix>,
}

#[derive(Debug, Clone, Default)]
pub struct BatchStats {
    /// Any gradient-site element exceeded its format's range (the Backoff
    /// trigger; in signal mode those elements are NaN in the gradients).
    pub grad_overflow: bool,
    /// Overflow seen at the activation or weight sites (clipped in clip mode).
    pub forward_overflow: bool,
    pub sites: Option<SiteTensors>,
}

#[derive(Debug, Clone)]
pub struct ForwardBackward {
    /// Mean cross-entropy over the batch, before loss scaling.
    pub loss: f64,
    /// Gradients with the loss scale still multiplied in; the optimizer
    /// divides it back out exactly.
    pub grads: Gradients,
    /// Largest unscaled pre-quantization weight-gradient magnitude, the
    /// LogMax observable.
    pub max_abs_grad_w: f64,
    pub stats: BatchStats,
}

fn quantized_copy(
    m: &Matrix,
    config: &QuantizerConfig,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<(Matrix, bool), QuantError> {
    let mut out = m.clone();
    let rng_ref = rng.as_deref_mut().map(|r| r as &mut dyn RngCore);
    let flag = quantize_slice(out.data_mut(), config, rng_ref)?;
    Ok((out, flag))
}

/// Softmax cross-entropy: mean loss and the per-logit gradient `(p - y)/m`.
fn softmax_xent(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let m = logits.rows();
    let c = logits.cols();
    debug_assert_eq!(labels.len(), m);
    let mut dlogits = Matrix::zeros(m, c);
    let inv_m = 1.0 / m as f64;
    let mut loss = 0.0;
    for i in 0..m {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &z in row {
            denom += (z - max).exp();
        }
        let log_denom = denom.ln();
        loss += log_denom - (row[labels[i]] - max);
        let out = &mut dlogits.data_mut()[i * c..(i + 1) * c];
        for (j, &z) in row.iter().enumerate() {
            let p = (z - max).exp() / denom;
            out[j] = (p - f64::from(u8::from(j == labels[i]))) * inv_m;
        }
    }
    (loss * inv_m, dlogits)
}

/// One quantization-aware forward/backward pass.
///
/// The loss is multiplied by `loss_scale` before backpropagation (applied to
/// the logit gradient after the exact `1/m` division, so a power-of-two
/// scale touches every downstream value by an exact factor). The returned
/// gradients still carry the scale.
pub fn forward_backward(
    model: &Mlp,
    inputs: &Matrix,
    labels: &[usize],
    recipe: &QuantRecipe,
    loss_scale: f64,
    mut rng: Option<&mut ChaCha8Rng>,
    capture: bool,
) -> Result<ForwardBackward, QuantError> {
    let num_layers = model.layers.len();
    let mut sites = capture.then(SiteTensors::default);
    let mut forward_overflow = false;
    let mut grad_overflow = false;

    // forward
    let mut act = inputs.clone();
    let mut acts_used: Vec<Matrix> = Vec::with_capacity(num_layers);
    let mut weights_used: Vec<Matrix> = Vec::with_capacity(num_layers);
    let mut pre_acts: Vec<Matrix> = Vec::with_capacity(num_layers);
    for (i, layer) in model.layers.iter().enumerate() {
        if let Some(s) = sites.as_mut() {
            s.act_raw.push(act.clone());
        }
        let a_used = match &recipe.activations {
            Some(cfg) if i > 0 || recipe.quantize_first_layer_input => {
                let (q, flag) = quantized_copy(&act, cfg, &mut rng)?;
                forward_overflow |= flag;
                q
            }
            _ => act.clone(),
        };
        let w_used = match &recipe.weights {
            Some(cfg) => {
                let (q, flag) = quantized_copy(&layer.weights, cfg, &mut rng)?;
                forward_overflow |= flag;
                q
            }
            None => layer.weights.clone(),
        };
        let mut z = a_used.matmul(&w_used);
        z.add_row_broadcast(&layer.bias);
        act = if i + 1 < num_layers {
            z.relu()
        } else {
            z.clone()
        };
        acts_used.push(a_used);
        weights_used.push(w_used);
        pre_acts.push(z);
    }
    let logits = pre_acts.last().expect("at least one layer");
    let (loss, mut dz) = softmax_xent(logits, labels);
    if loss_scale != 1.0 {
        dz.scale_in_place(loss_scale);
    }

    // backward
    let mut grads = Gradients {
        weights: vec![Matrix::zeros(0, 0); num_layers],
        bias: vec![Vec::new(); num_layers],
    };
    let mut max_abs_grad_w = 0.0f64;
    for i in (0..num_layers).rev() {
        if let Some(s) = sites.as_mut() {
            s.grad_z_raw.push(dz.clone());
        }
        let dz_used = match &recipe.grad_activations {
            Some(cfg) if i > 0 || recipe.quantize_first_layer_grad => {
                let (q, flag) = quantized_copy(&dz, cfg, &mut rng)?;
                grad_overflow |= flag;
                q
            }
            _ => dz.clone(),
        };
        let dw_raw = acts_used[i].matmul_tn(&dz_used);
        max_abs_grad_w = max_abs_grad_w.max(dw_raw.max_abs() / loss_scale);
        let dw = match &recipe.grad_weights {
            Some(cfg) => {
                if let Some(s) = sites.as_mut() {
                    s.grad_w_raw.push(dw_raw.clone());
                }
                let (q, flag) = quantized_copy(&dw_raw, cfg, &mut rng)?;
                grad_overflow |= flag;
                q
            }
            None => {
                if let Some(s) = sites.as_mut() {
                    s.grad_w_raw.push(dw_raw.clone());
                }
                dw_raw
            }
        };
        grads.bias[i] = dz_used.col_sums();
        grads.weights[i] = dw;
        if i > 0 {
            let mut da = dz_used.matmul_nt(&weights_used[i]);
            da.mask_relu(&pre_acts[i - 1]);
            if let Some(s) = sites.as_mut() {
                s.grad_z_used.push(dz_used.clone());
            }
            dz = da;
        } else if let Some(s) = sites.as_mut() {
            s.grad_z_used.push(dz_used.clone());
        }
    }

    if let Some(s) = sites.as_mut() {
        s.act_used = acts_used;
        s.weights_used = weights_used;
        s.grad_z_raw.reverse();
        s.grad_z_used.reverse();
        s.grad_w_raw.reverse();
    }

    Ok(ForwardBackward {
        loss,
        grads,
        max_abs_grad_w,
        stats: BatchStats {
            grad_overflow,
            forward_overflow,
            sites,
        },
    })
}

/// Inference with the recipe's forward quantization active.
pub fn accuracy(model: &Mlp, recipe: &QuantRecipe, x: &Matrix, y: &[usize]) -> f64 {
    let num_layers = model.layers.len();
    let mut act = x.clone();
    for (i, layer) in model.layers.iter().enumerate() {
        if let Some(cfg) = &recipe.activations {
            if i > 0 || recipe.quantize_first_layer_input {
                let _ = quantize_slice(act.data_mut(), cfg, None);
            }
        }
        let w_used = match &recipe.weights {
            Some(cfg) => {
                let mut w = layer.weights.clone();
                let _ = quantize_slice(w.data_mut(), cfg, None);
                w
            }
            None => layer.weights.clone(),
        };
        let mut z = act.matmul(&w_used);
        z.add_row_broadcast(&layer.bias);
        act = if i + 1 < num_layers { z.relu() } else { z };
    }
    let hits = (0..act.rows())
        .filter(|&i| act.row_argmax(i) == y[i])
        .count();
    hits as f64 / y.len() as f64
}

/// SGD with momentum on the master weights:
/// `v <- momentum * v + (g / loss_scale + weight_decay * w)`, `w <- w - lr * v`.
/// Weight decay applies to weight matrices only; callers must not invoke
/// this on a step the loss-scaling automaton said to skip.
pub fn sgd_momentum_step(
    model: &mut Mlp,
    velocity: &mut Momentum,
    grads: &Gradients,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    loss_scale: f64,
) {
    let inv_scale = 1.0 / loss_scale;
    for (i, layer) in model.layers.iter_mut().enumerate() {
        let v = velocity.weights[i].data_mut();
        let w = layer.weights.data_mut();
        let g = grads.weights[i].data();
        for ((v, w), &g) in v.iter_mut().zip(w.iter_mut()).zip(g) {
            *v = momentum * *v + (g * inv_scale + weight_decay * *w);
            *w -= lr * *v;
        }
        let vb = &mut velocity.bias[i];
        let gb = &grads.bias[i];
        for ((v, b), &g) in vb.iter_mut().zip(layer.bias.iter_mut()).zip(gb) {
            *v = momentum * *v + g * inv_scale;
            *b -= lr * *v;
        }
    }
}

/// Substreams of the run seed, so data, init, shuffling and rounding draws
/// stay independent and reproducible.
pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
