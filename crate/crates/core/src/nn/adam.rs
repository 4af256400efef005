use super::tensor::Scalar;
use super::train::TrainConfig;
use super::NnError;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update at step size `lr`. Parameters are left
/// untouched if any gradient is non-finite.
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), NnError> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(NnError::DimensionMismatch(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(NnError::NonFinite("gradient"));
    }
    state.t += 1;
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let one = T::one();
    let c1 = one - T::of(cfg.beta1.powi(state.t as i32));
    let c2 = one - T::of(cfg.beta2.powi(state.t as i32));
    let lr = T::of(lr);
    let eps = T::of(cfg.epsilon);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Reduce-on-plateau bookkeeping for the training loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    best: f64,
    bad_epochs: usize,
}

impl Default for Plateau {
    fn default() -> Self {
        Self {
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }
}

impl Plateau {
    /// Feeds one epoch loss and returns the learning rate for the next epoch.
    pub fn observe(&mut self, loss: f64, lr: f64, cfg: &TrainConfig) -> f64 {
        if loss < self.best * (1.0 - cfg.plateau_threshold) {
            self.best = loss;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= cfg.plateau_patience {
            self.bad_epochs = 0;
            return (lr * cfg.plateau_factor).max(cfg.min_lr);
        }
        lr
    }
}

/// Replays a loss history from `lr` and returns the resulting step size.
pub fn plateau_update(losses: &[f64], lr: f64, cfg: &TrainConfig) -> f64 {
    let mut p = Plateau::default();
    losses.iter().fold(lr, |lr, &l| p.observe(l, lr, cfg))
}
