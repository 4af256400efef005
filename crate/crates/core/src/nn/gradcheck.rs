use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::weighted_ce_loss;
use super::tensor::Tensor;
use super::unet::{unet_backward, unet_forward, unet_init, Activation};
use super::{NnError, UNetConfig};
use crate::imgio::Mask;

/// Smallest step tried when shrinking away from a switch.
const MIN_STEP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckLoss {
    /// The training loss against a random mask.
    WeightedCe,
    /// `sum(r * scores)` for a fixed random `r`; with identity activations the
    /// whole map is linear in each parameter, so central differences are exact.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub width: usize,
    pub height: usize,
    pub activation: Activation,
    pub class_weights: (f64, f64),
    pub loss: CheckLoss,
    /// Central-difference step is `step * max(1, |θ|)`.
    pub step: f64,
    /// Scale the analytic gradient at this index by 1.01 before comparing.
    pub corrupt: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            width: 8,
            height: 8,
            activation: Activation::Relu,
            class_weights: (0.7, 1.6),
            loss: CheckLoss::WeightedCe,
            step: 1e-3,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub n_params: usize,
    /// Parameters whose step was shrunk to keep both probes on one linear piece.
    pub reduced_steps: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

pub fn gradient_check(cfg: &UNetConfig, seed: u64) -> Result<GradCheckReport, NnError> {
    gradient_check_with(cfg, seed, &GradCheckOptions::default())
}

/// Compares backprop against central differences, every parameter, in f64.
///
/// Weights come from `unet_init`; biases are set to small random values so
/// their gradients are exercised away from the all-zero start. The loss is
/// the weighted cross-entropy against a random mask.
pub fn gradient_check_with(
    cfg: &UNetConfig,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, NnError> {
    let mut params = unet_init::<f64>(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    for block in cfg.blocks() {
        for b in &mut params[block.bias_range()] {
            *b = rng.random_range(-0.1..0.1);
        }
    }
    let (w, h) = (opts.width, opts.height);
    let input = Tensor::from_vec(
        cfg.in_channels,
        w,
        h,
        (0..cfg.in_channels * w * h)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    );
    let mask = Mask::new(w, h, (0..w * h).map(|_| rng.random_range(0..2u8)).collect())
        .expect("valid random mask");
    let masks = std::slice::from_ref(&mask);
    let projection: Vec<f64> = (0..cfg.out_channels * w * h)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let loss_and_grad = |scores: &Tensor<f64>| -> Result<(f64, Tensor<f64>), NnError> {
        match opts.loss {
            CheckLoss::WeightedCe => {
                let (l, mut g) = weighted_ce_loss(std::slice::from_ref(scores), masks, opts.class_weights)?;
                Ok((l, g.pop().expect("one sample")))
            }
            CheckLoss::Linear => {
                let l = scores.data.iter().zip(&projection).map(|(s, r)| s * r).sum();
                Ok((l, Tensor::from_vec(scores.planes, w, h, projection.clone())))
            }
        }
    };

    let eval = |p: &[f64]| -> Result<(f64, Vec<u8>), NnError> {
        let cache = unet_forward(p, cfg, &input, opts.activation)?;
        let pattern = cache.switch_pattern();
        Ok((loss_and_grad(&cache.scores)?.0, pattern))
    };

    let cache = unet_forward(&params, cfg, &input, opts.activation)?;
    let base_pattern = cache.switch_pattern();
    let (_, grad_scores) = loss_and_grad(&cache.scores)?;
    let mut analytic = unet_backward(&cache, &params, cfg, &grad_scores)?;
    if let Some(i) = opts.corrupt {
        analytic[i] *= 1.01;
    }

    let mut numeric = Vec::with_capacity(params.len());
    let (mut max_rel_error, mut worst_index, mut reduced_steps) = (0f64, 0usize, 0usize);
    for i in 0..params.len() {
        let theta = params[i];
        let mut step = opts.step * theta.abs().max(1.0);
        let fd = loop {
            params[i] = theta + step;
            let (plus, p_plus) = eval(&params)?;
            params[i] = theta - step;
            let (minus, p_minus) = eval(&params)?;
            params[i] = theta;
            let smooth = p_plus == base_pattern && p_minus == base_pattern;
            if smooth || step < MIN_STEP {
                break (plus - minus) / (2.0 * step);
            }
            // the interval straddles a ReLU or pooling switch
            if step == opts.step * theta.abs().max(1.0) {
                reduced_steps += 1;
            }
            step *= 0.25;
        };
        let ga = analytic[i];
        let rel = (ga - fd).abs() / ga.abs().max(fd.abs()).max(1e-8);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
        numeric.push(fd);
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        n_params: params.len(),
        reduced_steps,
        analytic,
        numeric,
    })
}
