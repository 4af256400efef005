use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::adam::{adam_step, AdamState, Plateau};
use super::loss::{class_weights_from_proportion, total_weight, weighted_ce_sample};
use super::tensor::Tensor;
use super::unet::{unet_backward, unet_forward, unet_init, Activation};
use super::{NnError, UNetConfig};
use crate::augment::{AugmentConfig, Sample, Transform};
use crate::imgio::{Checkpoint, Mask, RgbImage, ScoreMap};
use crate::metrics::jaccard;
use crate::postprocess::{extract_mask, score_diff};
use crate::stats::{dataset_stats, mask_proportion, normalize_image, ChannelStats};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    /// Minimum relative loss improvement that resets the plateau counter.
    pub plateau_threshold: f64,
    pub min_lr: f64,
    /// `(w_bg, w_fg)`; derived from the training-set lesion proportion when `None`.
    pub class_weights: Option<(f64, f64)>,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Normalize by subtracting the channel mean only.
    pub center_only: bool,
    /// Per-sample forward/backward on the rayon pool. Gradients are still
    /// reduced in sample order, so results equal the sequential path.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 8,
            epochs: 30,
            plateau_patience: 5,
            plateau_factor: 0.5,
            plateau_threshold: 1e-4,
            min_lr: 1e-6,
            class_weights: None,
            seed: 0,
            augment: AugmentConfig::default(),
            center_only: false,
            parallel: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must lie in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if let Some((bg, fg)) = self.class_weights {
            if !(bg > 0.0 && fg > 0.0) {
                return bad("class weights must be > 0");
            }
        }
        self.augment.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_jaccard: f64,
    /// Step size used during this epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,val_jaccard,lr\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch,
                format_sig6(r.loss),
                format_sig6(r.val_jaccard),
                format_sig6(r.lr)
            ));
        }
        out
    }
}

/// Formats like C's `%.6g`.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    let strip = |s: String| {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        strip(format!("{x:.decimals$}"))
    } else {
        let m = strip(mantissa.to_string());
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
    pub class_weights: (f64, f64),
    /// Number of leading samples used for training; the rest are validation.
    pub n_train: usize,
}

/// Number of training samples: validation is the trailing
/// `round(n * val_frac)` samples.
pub fn split_index(n: usize, val_frac: f64) -> Result<usize, NnError> {
    if !(0.0..1.0).contains(&val_frac) {
        return Err(NnError::InvalidConfig(format!("val_frac {val_frac}")));
    }
    let n_val = (n as f64 * val_frac).round() as usize;
    if n_val == 0 || n_val >= n {
        return Err(NnError::DatasetTooSmall(format!(
            "{n} samples with val_frac {val_frac} leave {n_val} for validation"
        )));
    }
    Ok(n - n_val)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-sample augmentation stream: `seed` xor a hash of (epoch, index).
fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ splitmix64(((epoch as u64) << 32) | index as u64))
}

fn to_tensor(img: &RgbImage, stats: &ChannelStats) -> Result<Tensor<f32>, NnError> {
    Ok(Tensor::from_vec(3, img.width, img.height, normalize_image(img, stats)?))
}

fn scores_to_map(t: &Tensor<f32>) -> ScoreMap {
    ScoreMap {
        width: t.width,
        height: t.height,
        s0: t.plane(0).to_vec(),
        s1: t.plane(1).to_vec(),
    }
}

/// Runs the checkpoint on one raw image and returns its score map.
pub fn predict_scores(checkpoint: &Checkpoint, image: &RgbImage) -> Result<ScoreMap, NnError> {
    let input = to_tensor(image, &checkpoint.normalization)?;
    let cache = unet_forward(&checkpoint.params, &checkpoint.config, &input, Activation::Relu)?;
    Ok(scores_to_map(&cache.scores))
}

fn sample_gradient(
    params: &[f32],
    ucfg: &UNetConfig,
    sample: &Sample,
    weights: (f64, f64),
    scale: f64,
) -> Result<(f64, Vec<f32>), NnError> {
    let cache = unet_forward(params, ucfg, &sample.image, Activation::Relu)?;
    let (nll, grad_scores) = weighted_ce_sample(&cache.scores, &sample.mask, weights, scale)?;
    let grads = unet_backward(&cache, params, ucfg, &grad_scores)?;
    Ok((nll, grads))
}

fn naive_jaccard(params: &[f32], ucfg: &UNetConfig, s: &Sample) -> Result<f64, NnError> {
    let cache = unet_forward(params, ucfg, &s.image, Activation::Relu)?;
    let pred = extract_mask(&score_diff(&scores_to_map(&cache.scores)), 0.0);
    jaccard(&pred, &s.mask).map_err(|e| NnError::DimensionMismatch(e.to_string()))
}

pub fn train(
    dataset: &[(RgbImage, Mask)],
    val_frac: f64,
    tcfg: &TrainConfig,
    ucfg: &UNetConfig,
) -> Result<TrainOutput, NnError> {
    train_with(dataset, val_frac, tcfg, ucfg, |_| {})
}

/// Full training loop. `on_epoch` sees each record as soon as it is final.
pub fn train_with(
    dataset: &[(RgbImage, Mask)],
    val_frac: f64,
    tcfg: &TrainConfig,
    ucfg: &UNetConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutput, NnError> {
    tcfg.validate()?;
    ucfg.validate()?;
    let n_train = split_index(dataset.len(), val_frac)?;
    for (img, mask) in dataset {
        ucfg.check_input(img.width, img.height)?;
        if (img.width, img.height) != (mask.width, mask.height) {
            return Err(NnError::DimensionMismatch(format!(
                "image {}x{} with mask {}x{}",
                img.width, img.height, mask.width, mask.height
            )));
        }
    }
    let (train_set, val_set) = dataset.split_at(n_train);

    let train_images: Vec<RgbImage> = train_set.iter().map(|(i, _)| i.clone()).collect();
    let mut stats = dataset_stats(&train_images)?;
    if tcfg.center_only {
        stats = stats.center_only();
    }
    let weights = match tcfg.class_weights {
        Some(w) => w,
        None => {
            let p = train_set.iter().map(|(_, m)| mask_proportion(m)).sum::<f64>() / n_train as f64;
            class_weights_from_proportion(p)?
        }
    };
    let to_samples = |set: &[(RgbImage, Mask)]| -> Result<Vec<Sample>, NnError> {
        set.iter()
            .map(|(img, m)| Ok(Sample::new(to_tensor(img, &stats)?, m.clone())?))
            .collect()
    };
    let train_samples = to_samples(train_set)?;
    let val_samples = to_samples(val_set)?;

    let mut params = unet_init::<f32>(ucfg, tcfg.seed);
    let mut adam = AdamState::new(params.len());
    let mut plateau = Plateau::default();
    let mut lr = tcfg.learning_rate;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    shuffle_rng.set_stream(1);
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut history = TrainHistory::default();

    for epoch in 1..=tcfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut batch_losses = Vec::with_capacity(order.len().div_ceil(tcfg.batch_size));
        for batch in order.chunks(tcfg.batch_size) {
            let samples: Vec<Sample> = batch
                .iter()
                .map(|&i| {
                    let mut rng = sample_rng(tcfg.seed, epoch, i);
                    Transform::draw(&mut rng, &tcfg.augment).apply(&train_samples[i])
                })
                .collect();
            let total = total_weight(samples.iter().map(|s| &s.mask), weights);
            let scale = 1.0 / total;
            let per_sample: Vec<(f64, Vec<f32>)> = if tcfg.parallel {
                samples
                    .par_iter()
                    .map(|s| sample_gradient(&params, ucfg, s, weights, scale))
                    .collect::<Result<_, _>>()?
            } else {
                samples
                    .iter()
                    .map(|s| sample_gradient(&params, ucfg, s, weights, scale))
                    .collect::<Result<_, _>>()?
            };
            let mut grads = vec![0f32; params.len()];
            let mut nll = 0f64;
            for (sum, g) in &per_sample {
                nll += sum;
                for (a, &b) in grads.iter_mut().zip(g) {
                    *a += b;
                }
            }
            adam_step(&mut params, &grads, &mut adam, lr, tcfg)?;
            batch_losses.push(nll / total);
        }
        let loss = if batch_losses.is_empty() {
            f64::NAN
        } else {
            batch_losses.iter().sum::<f64>() / batch_losses.len() as f64
        };
        let val: Vec<f64> = if tcfg.parallel {
            val_samples
                .par_iter()
                .map(|s| naive_jaccard(&params, ucfg, s))
                .collect::<Result<_, _>>()?
        } else {
            val_samples
                .iter()
                .map(|s| naive_jaccard(&params, ucfg, s))
                .collect::<Result<_, _>>()?
        };
        let record = EpochRecord {
            epoch,
            loss,
            val_jaccard: val.iter().sum::<f64>() / val.len() as f64,
            lr,
        };
        on_epoch(&record);
        history.records.push(record);
        lr = plateau.observe(loss, lr, tcfg);
    }

    Ok(TrainOutput {
        checkpoint: Checkpoint {
            config: *ucfg,
            params,
            normalization: stats,
        },
        history,
        class_weights: weights,
        n_train,
    })
}
