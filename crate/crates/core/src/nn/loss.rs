use super::tensor::{Scalar, Tensor};
use super::NnError;
use crate::imgio::Mask;

/// Inverse-frequency class weights: `w_fg = 0.5 / p`, `w_bg = 0.5 / (1 - p)`,
/// so both classes contribute 0.5 of the expected total weight.
pub fn class_weights_from_proportion(p_mole: f64) -> Result<(f64, f64), NnError> {
    if !(p_mole > 0.0 && p_mole < 1.0) {
        return Err(NnError::BadProportion(p_mole));
    }
    Ok((0.5 / (1.0 - p_mole), 0.5 / p_mole))
}

/// Sum of per-pixel class weights over a batch of masks.
pub fn total_weight<'a>(masks: impl IntoIterator<Item = &'a Mask>, weights: (f64, f64)) -> f64 {
    masks
        .into_iter()
        .map(|m| {
            let fg = m.foreground_count() as f64;
            let bg = m.data.len() as f64 - fg;
            bg * weights.0 + fg * weights.1
        })
        .sum()
}

/// `log(1 + e^z)` without overflow.
#[inline]
fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

/// Weighted negative log-likelihood summed over one sample's pixels, and its
/// gradient with respect to the scores multiplied by `scale`.
///
/// Returns `(sum_i w_{y_i} * -log p_{y_i}, scale * dSum/dScores)`.
pub fn weighted_ce_sample<T: Scalar>(
    scores: &Tensor<T>,
    mask: &Mask,
    weights: (f64, f64),
    scale: f64,
) -> Result<(f64, Tensor<T>), NnError> {
    if scores.planes != 2 || scores.width != mask.width || scores.height != mask.height {
        return Err(NnError::DimensionMismatch(format!(
            "scores {}x{}x{} vs mask {}x{}",
            scores.planes, scores.width, scores.height, mask.width, mask.height
        )));
    }
    if !scores.is_finite() {
        return Err(NnError::NonFinite("scores"));
    }
    let n = scores.area();
    let (s0, s1) = scores.data.split_at(n);
    let mut grad = Tensor::zeros(2, scores.width, scores.height);
    let (g0, g1) = grad.data.split_at_mut(n);
    let mut sum = 0f64;
    let wt = [T::of(weights.0), T::of(weights.1)];
    let scale_t = T::of(scale);
    for i in 0..n {
        let y = mask.data[i] as usize;
        let d = s1[i] - s0[i];
        // p1 = sigmoid(d); -log p_y = softplus(+-d)
        let nll = if y == 1 { softplus(-d) } else { softplus(d) };
        sum += (wt[y] * nll).to_f64().unwrap();
        let p1 = T::one() / (T::one() + (-d).exp());
        let target = if y == 1 { T::one() } else { T::zero() };
        let g = wt[y] * (p1 - target) * scale_t;
        g1[i] = g;
        g0[i] = -g;
    }
    Ok((sum, grad))
}

/// Weighted-mean cross-entropy over a batch: total weighted NLL divided by
/// the total applied weight. Returns the loss and `dLoss/dScores` per sample.
pub fn weighted_ce_loss<T: Scalar>(
    scores: &[Tensor<T>],
    masks: &[Mask],
    weights: (f64, f64),
) -> Result<(f64, Vec<Tensor<T>>), NnError> {
    if scores.len() != masks.len() {
        return Err(NnError::DimensionMismatch(format!(
            "{} score maps vs {} masks",
            scores.len(),
            masks.len()
        )));
    }
    let total = total_weight(masks, weights);
    let mut loss = 0f64;
    let mut grads = Vec::with_capacity(scores.len());
    for (s, m) in scores.iter().zip(masks) {
        let (sum, g) = weighted_ce_sample(s, m, weights, 1.0 / total)?;
        loss += sum;
        grads.push(g);
    }
    Ok((loss / total, grads))
}
