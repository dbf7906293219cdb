use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Optional global-norm gradient clip, applied before the update.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: None,
        }
    }
}

/// Moment estimates, one buffer per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub config: AdamConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        AdamState {
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            config,
        }
    }
}

/// One bias-corrected Adam update over every trainable parameter, then
/// clears all gradients.
///
/// ```text
/// m ← β1·m + (1−β1)·g
/// v ← β2·v + (1−β2)·g²
/// p ← p − lr · (m / (1−β1ᵗ)) / (√(v / (1−β2ᵗ)) + ε)
/// ```
pub fn adam_step(
    store: &mut ParamStore,
    state: &mut AdamState,
    lr: f64,
) -> Result<StepStats, TensorError> {
    if state.first_moment.len() != store.len() {
        return Err(TensorError::Checkpoint(format!(
            "optimizer state covers {} parameters, store has {}",
            state.first_moment.len(),
            store.len()
        )));
    }
    for (_, p) in store.iter() {
        if p.trainable && p.grad.is_none() {
            return Err(TensorError::MissingGradient(p.name.clone()));
        }
    }
    let grad_norm = store.grad_norm();
    let clip_scale = match state.config.clip_norm {
        Some(max) if grad_norm > max && grad_norm > 0.0 => max / grad_norm,
        _ => 1.0,
    };

    state.step_count += 1;
    let AdamConfig {
        beta1,
        beta2,
        epsilon,
        ..
    } = state.config;
    let t = state.step_count as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);

    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let i = id.index();
        let p = store.get_mut(id);
        if !p.trainable {
            continue;
        }
        let grad = p.grad.take().expect("checked above");
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (((w, &g), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let g = g * clip_scale;
            *mi = beta1 * *mi + (1.0 - beta1) * g;
            *vi = beta2 * *vi + (1.0 - beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
    store.clear_grads();
    Ok(StepStats {
        grad_norm,
        clipped: clip_scale < 1.0,
    })
}
