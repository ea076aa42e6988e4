//! AdamW with decoupled weight decay, global-norm gradient clipping, and the
//! warmup-then-cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::ModelParams;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum OptimError {
    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),
    #[error("gradient norm is not finite")]
    NonFiniteNorm,
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
}

/// Which targets contribute to the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMask {
    /// Every non-padding position (uid prefix, context days, target day).
    #[default]
    Full,
    /// Only positions after the separator: the target-day block and `<eos>`.
    TargetDayOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub warmup_steps: usize,
    /// Cosine horizon. Zero means "derive from epochs * steps-per-epoch".
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_interval: usize,
    pub loss_mask: LossMask,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale defaults; the full-scale run used 20k warmup steps.
    fn default() -> Self {
        TrainConfig {
            lr_max: 5e-4,
            warmup_steps: 200,
            total_steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-5,
            clip_norm: 5.0,
            weight_decay: 0.01,
            epochs: 5,
            batch_size: 8,
            eval_interval: 200,
            loss_mask: LossMask::Full,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if self.lr_max < 0.0 || !self.lr_max.is_finite() {
            return Err(OptimError::InvalidConfig("lr_max must be finite and >= 0".into()));
        }
        if self.beta1 < 0.0 || self.beta1 >= 1.0 || self.beta2 < 0.0 || self.beta2 >= 1.0 {
            return Err(OptimError::InvalidConfig("betas must lie in [0, 1)".into()));
        }
        if self.eps <= 0.0 || self.clip_norm <= 0.0 {
            return Err(OptimError::InvalidConfig("eps and clip_norm must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(OptimError::InvalidConfig("weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.eval_interval == 0 {
            return Err(OptimError::InvalidConfig(
                "batch_size, epochs, eval_interval must be positive".into(),
            ));
        }
        if self.total_steps != 0 && self.warmup_steps > self.total_steps {
            return Err(OptimError::InvalidConfig(format!(
                "warmup {} exceeds total steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Learning rate at `step`: linear ramp to `lr_max` over `warmup_steps`, then
/// cosine decay to zero at `total_steps`.
pub fn lr_at(step: usize, tc: &TrainConfig) -> f64 {
    let total = tc.total_steps.max(tc.warmup_steps.max(1));
    if step < tc.warmup_steps {
        return tc.lr_max * step as f64 / tc.warmup_steps as f64;
    }
    if step >= total {
        return 0.0;
    }
    let span = (total - tc.warmup_steps).max(1);
    let progress = (step - tc.warmup_steps) as f64 / span as f64;
    tc.lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [Tensor<f32>], max_norm: f64) -> Result<f64, OptimError> {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for v in g.data() {
            sq += (*v as f64) * (*v as f64);
        }
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(OptimError::NonFiniteNorm);
    }
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    Ok(norm)
}

/// First and second moment estimates, aligned with [`ModelParams::named`].
#[derive(Clone)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamState {
    pub fn zeros_like(params: &ModelParams<f32>) -> Self {
        let m = params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let v = params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamState { m, v }
    }
}

/// Decay applies to matrix weights only -- never biases, layer-norm gains, or
/// the embedding tables.
fn decays(name: &str) -> bool {
    name.ends_with("_w")
}

/// One AdamW update. `step_t` is 1-based for bias correction; `lr` comes from
/// [`lr_at`]. Gradients must be finite (clip first; NaN aborts here).
pub fn adamw_step(
    params: &mut ModelParams<f32>,
    grads: &[Tensor<f32>],
    state: &mut AdamState,
    tc: &TrainConfig,
    lr: f64,
    step_t: u64,
) -> Result<(), OptimError> {
    let named: Vec<(String, &mut Tensor<f32>)> = params.named_mut();
    assert_eq!(named.len(), grads.len(), "gradient count mismatch");
    let bc1 = 1.0 - tc.beta1.powi(step_t as i32);
    let bc2 = 1.0 - tc.beta2.powi(step_t as i32);
    let (b1, b2) = (tc.beta1 as f32, tc.beta2 as f32);
    let epsf = tc.eps as f32;
    let lrf = lr as f32;

    for (i, (name, tensor)) in named.into_iter().enumerate() {
        let g = &grads[i];
        if !g.all_finite() {
            return Err(OptimError::NonFiniteGradient(name));
        }
        let wd = if decays(&name) { tc.weight_decay as f32 } else { 0.0 };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = tensor.data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let mhat = m[j] / bc1 as f32;
            let vhat = v[j] / bc2 as f32;
            p[j] -= lrf * (mhat / (vhat.sqrt() + epsf) + wd * p[j]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    fn tc(total: usize) -> TrainConfig {
        TrainConfig { warmup_steps: 100, total_steps: total, ..TrainConfig::default() }
    }

    #[test]
    fn lr_schedule_endpoints() {
        let tc = tc(1100);
        assert_eq!(lr_at(0, &tc), 0.0);
        assert!((lr_at(100, &tc) - 5e-4).abs() < 1e-12);
        assert!(lr_at(1100, &tc) == 0.0);
        // midpoint of the decay span
        assert!((lr_at(600, &tc) - 2.5e-4).abs() < 1e-9);
    }

    #[test]
    fn lr_monotone_through_warmup() {
        let tc = tc(1000);
        for s in 1..100 {
            assert!(lr_at(s, &tc) > lr_at(s - 1, &tc));
        }
    }

    #[test]
    fn clip_leaves_small_norms_untouched() {
        let mut g = vec![Tensor::from_vec(&[2], vec![1.5f32, 2.0])];
        let before = g[0].clone();
        let norm = clip_gradients(&mut g, 5.0).unwrap();
        assert!((norm - 2.5).abs() < 1e-6);
        assert_eq!(g[0].data(), before.data());
    }

    #[test]
    fn clip_boundary_norm_five_unchanged() {
        let mut g = vec![Tensor::from_vec(&[2], vec![3.0f32, 4.0])];
        clip_gradients(&mut g, 5.0).unwrap();
        assert_eq!(g[0].data(), &[3.0, 4.0]);
    }

    #[test]
    fn clip_scales_large_norms_to_max() {
        let mut g = vec![
            Tensor::from_vec(&[2], vec![6.0f32, 0.0]),
            Tensor::from_vec(&[1], vec![8.0f32]),
        ];
        let norm = clip_gradients(&mut g, 5.0).unwrap();
        assert!((norm - 10.0).abs() < 1e-6);
        let after: f64 = g
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|v| (*v as f64) * (*v as f64))
            .sum::<f64>()
            .sqrt();
        assert!((after - 5.0).abs() < 1e-6);
    }

    #[test]
    fn clip_rejects_nan() {
        let mut g = vec![Tensor::from_vec(&[1], vec![f32::NAN])];
        assert!(clip_gradients(&mut g, 5.0).is_err());
    }

    fn one_param_model() -> ModelParams<f32> {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 1,
            d_model: 2,
            dropout: 0.0,
            vocab_size: 4,
            context_len: 4,
            seed: 1,
        };
        init_model(&cfg).unwrap()
    }

    #[test]
    fn adamw_zero_grads_zero_decay_keeps_params() {
        let mut params = one_param_model();
        let before: Vec<Vec<f32>> =
            params.named().iter().map(|(_, t)| t.data().to_vec()).collect();
        let grads: Vec<Tensor<f32>> =
            params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let mut state = AdamState::zeros_like(&params);
        let tc = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        adamw_step(&mut params, &grads, &mut state, &tc, 1e-3, 1).unwrap();
        for ((_, t), b) in params.named().iter().zip(&before) {
            assert_eq!(t.data(), b.as_slice());
        }
    }

    #[test]
    fn adamw_first_step_closed_form() {
        // constant grad 1 on every element: after bias correction the first
        // update is -lr * 1 / (sqrt(1) + eps), independent of betas.
        let mut params = one_param_model();
        let before = params.tok_emb.data()[0];
        let grads: Vec<Tensor<f32>> =
            params.named().iter().map(|(_, t)| Tensor::full(t.shape(), 1.0f32)).collect();
        let mut state = AdamState::zeros_like(&params);
        let tc = TrainConfig { weight_decay: 0.0, eps: 1e-5, ..TrainConfig::default() };
        let lr = 1e-2;
        adamw_step(&mut params, &grads, &mut state, &tc, lr, 1).unwrap();
        let expect = before - (lr as f32) * 1.0 / (1.0 + 1e-5);
        assert!((params.tok_emb.data()[0] - expect).abs() < 1e-7);
    }

    #[test]
    fn adamw_rejects_nan_grad_with_tensor_name() {
        let mut params = one_param_model();
        let mut grads: Vec<Tensor<f32>> =
            params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        grads[0].data_mut()[0] = f32::NAN;
        let mut state = AdamState::zeros_like(&params);
        let tc = TrainConfig::default();
        match adamw_step(&mut params, &grads, &mut state, &tc, 1e-3, 1) {
            Err(OptimError::NonFiniteGradient(name)) => assert_eq!(name, "tok_emb"),
            other => panic!("expected NonFiniteGradient, got {other:?}"),
        }
    }

    #[test]
    fn weight_decay_skips_biases_gains_embeddings() {
        assert!(decays("h0.attn.qkv_w"));
        assert!(decays("h1.mlp.fc_w"));
        assert!(!decays("h0.attn.qkv_b"));
        assert!(!decays("h0.ln1.gain"));
        assert!(!decays("tok_emb"));
        assert!(!decays("pos_emb"));
    }
}
