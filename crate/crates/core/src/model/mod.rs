//! The decoder-only transformer: configuration, parameters, and the forward
//! pass expressed on the autodiff tape.
//!
//! Pre-LN GPT blocks, learned positional embeddings, GELU MLPs, and an output
//! projection weight-tied to the token embedding. The same generic code
//! instantiates at `f32` for training and `f64` for gradient checking.

pub mod checkpoint;
pub mod infer;
pub mod optim;

use serde::{Deserialize, Serialize};

use crate::tensor::tape::{NodeId, Tape, TapeError};
use crate::tensor::{Scalar, Tensor};
use crate::vocab::VOCAB_SIZE;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// LayerNorm epsilon used everywhere in the model.
pub const LN_EPS: f64 = 1e-5;

const INIT_STD: f64 = 0.02;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence length {got} exceeds context length {max}")]
    ContextOverflow { got: usize, max: usize },
    #[error(transparent)]
    Tape(#[from] TapeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    /// Dropout applied to embeddings, attention probabilities, and residual
    /// branches while training. Stored per mille-agnostic as an f64 in [0, 1).
    pub dropout: f64,
    pub vocab_size: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale default: 2 layers, 4 heads, 128 dims.
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 128,
            dropout: 0.1,
            vocab_size: VOCAB_SIZE,
            context_len: 1024,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 {
            return Err(ModelError::InvalidConfig("layers, heads, dims must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.vocab_size == 0 || self.context_len == 0 {
            return Err(ModelError::InvalidConfig("vocab and context must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct LayerNormParams<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone)]
pub struct BlockParams<T> {
    pub ln1: LayerNormParams<T>,
    pub qkv_w: Tensor<T>,
    pub qkv_b: Tensor<T>,
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
    pub ln2: LayerNormParams<T>,
    pub fc_w: Tensor<T>,
    pub fc_b: Tensor<T>,
    pub mlp_proj_w: Tensor<T>,
    pub mlp_proj_b: Tensor<T>,
}

#[derive(Clone)]
pub struct ModelParams<T> {
    pub cfg: ModelConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub ln_f: LayerNormParams<T>,
}

/// Seeded parameter initialization: normals with std 0.02, residual
/// projections scaled down by `1/sqrt(2 * n_layers)`, biases zero.
pub fn init_model<T: Scalar>(cfg: &ModelConfig) -> Result<ModelParams<T>, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.d_model;
    let resid_std = INIT_STD / (2.0 * cfg.n_layers as f64).sqrt();
    let tok_emb = Tensor::randn(&[cfg.vocab_size, d], INIT_STD, &mut rng);
    let pos_emb = Tensor::randn(&[cfg.context_len, d], INIT_STD, &mut rng);
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        blocks.push(BlockParams {
            ln1: layer_norm_init(d),
            qkv_w: Tensor::randn(&[d, 3 * d], INIT_STD, &mut rng),
            qkv_b: Tensor::zeros(&[3 * d]),
            proj_w: Tensor::randn(&[d, d], resid_std, &mut rng),
            proj_b: Tensor::zeros(&[d]),
            ln2: layer_norm_init(d),
            fc_w: Tensor::randn(&[d, 4 * d], INIT_STD, &mut rng),
            fc_b: Tensor::zeros(&[4 * d]),
            mlp_proj_w: Tensor::randn(&[4 * d, d], resid_std, &mut rng),
            mlp_proj_b: Tensor::zeros(&[d]),
        });
    }
    let ln_f = layer_norm_init(d);
    Ok(ModelParams { cfg: cfg.clone(), tok_emb, pos_emb, blocks, ln_f })
}

fn layer_norm_init<T: Scalar>(d: usize) -> LayerNormParams<T> {
    LayerNormParams { gain: Tensor::full(&[d], T::one()), bias: Tensor::zeros(&[d]) }
}

impl<T: Scalar> ModelParams<T> {
    /// Tensors in canonical order with their stable names. Weight decay and
    /// the checkpoint format both key off these names.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("h{i}.ln1.gain"), &b.ln1.gain));
            out.push((format!("h{i}.ln1.bias"), &b.ln1.bias));
            out.push((format!("h{i}.attn.qkv_w"), &b.qkv_w));
            out.push((format!("h{i}.attn.qkv_b"), &b.qkv_b));
            out.push((format!("h{i}.attn.proj_w"), &b.proj_w));
            out.push((format!("h{i}.attn.proj_b"), &b.proj_b));
            out.push((format!("h{i}.ln2.gain"), &b.ln2.gain));
            out.push((format!("h{i}.ln2.bias"), &b.ln2.bias));
            out.push((format!("h{i}.mlp.fc_w"), &b.fc_w));
            out.push((format!("h{i}.mlp.fc_b"), &b.fc_b));
            out.push((format!("h{i}.mlp.proj_w"), &b.mlp_proj_w));
            out.push((format!("h{i}.mlp.proj_b"), &b.mlp_proj_b));
        }
        out.push(("ln_f.gain".into(), &self.ln_f.gain));
        out.push(("ln_f.bias".into(), &self.ln_f.bias));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("h{i}.ln1.gain"), &mut b.ln1.gain));
            out.push((format!("h{i}.ln1.bias"), &mut b.ln1.bias));
            out.push((format!("h{i}.attn.qkv_w"), &mut b.qkv_w));
            out.push((format!("h{i}.attn.qkv_b"), &mut b.qkv_b));
            out.push((format!("h{i}.attn.proj_w"), &mut b.proj_w));
            out.push((format!("h{i}.attn.proj_b"), &mut b.proj_b));
            out.push((format!("h{i}.ln2.gain"), &mut b.ln2.gain));
            out.push((format!("h{i}.ln2.bias"), &mut b.ln2.bias));
            out.push((format!("h{i}.mlp.fc_w"), &mut b.fc_w));
            out.push((format!("h{i}.mlp.fc_b"), &mut b.fc_b));
            out.push((format!("h{i}.mlp.proj_w"), &mut b.mlp_proj_w));
            out.push((format!("h{i}.mlp.proj_b"), &mut b.mlp_proj_b));
        }
        out.push(("ln_f.gain".into(), &mut self.ln_f.gain));
        out.push(("ln_f.bias".into(), &mut self.ln_f.bias));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            cfg: self.cfg.clone(),
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    ln1: LayerNormParams { gain: b.ln1.gain.cast(), bias: b.ln1.bias.cast() },
                    qkv_w: b.qkv_w.cast(),
                    qkv_b: b.qkv_b.cast(),
                    proj_w: b.proj_w.cast(),
                    proj_b: b.proj_b.cast(),
                    ln2: LayerNormParams { gain: b.ln2.gain.cast(), bias: b.ln2.bias.cast() },
                    fc_w: b.fc_w.cast(),
                    fc_b: b.fc_b.cast(),
                    mlp_proj_w: b.mlp_proj_w.cast(),
                    mlp_proj_b: b.mlp_proj_b.cast(),
                })
                .collect(),
            ln_f: LayerNormParams { gain: self.ln_f.gain.cast(), bias: self.ln_f.bias.cast() },
        }
    }
}

/// Forward-pass mode. Dropout only fires in `Train`; seeds for its masks are
/// derived from the given base so a step is reproducible in isolation.
#[derive(Debug, Clone, Copy)]
pub enum Mode {
    Train { dropout_seed: u64 },
    Eval,
}

/// Tape ids of every parameter, in the same order as [`ModelParams::named`].
pub struct StagedParams {
    pub ids: Vec<NodeId>,
    cfg: ModelConfig,
}

impl StagedParams {
    fn id(&self, index: usize) -> NodeId {
        self.ids[index]
    }
}

/// Copy all parameters onto the tape as leaves.
pub fn stage_params<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>) -> StagedParams {
    let ids = params.named().into_iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    StagedParams { ids, cfg: params.cfg.clone() }
}

/// Build the transformer forward pass on the tape.
///
/// `tokens` is `batch` concatenated sequences of equal length; the returned
/// node holds logits of shape `[batch * t, vocab_size]`.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    staged: &StagedParams,
    tokens: &[u32],
    batch: usize,
    mode: Mode,
) -> Result<NodeId, ModelError> {
    let cfg = &staged.cfg;
    assert!(batch > 0 && tokens.len() % batch == 0, "tokens must split evenly into batch rows");
    let t = tokens.len() / batch;
    if t > cfg.context_len {
        return Err(ModelError::ContextOverflow { got: t, max: cfg.context_len });
    }
    for &tok in tokens {
        if tok as usize >= cfg.vocab_size {
            return Err(ModelError::InvalidConfig(format!("token id {tok} out of vocabulary")));
        }
    }
    let (rate, base_seed) = match mode {
        Mode::Train { dropout_seed } if cfg.dropout > 0.0 => (cfg.dropout, dropout_seed),
        _ => (0.0, 0),
    };
    let mut drop_counter = 0u64;
    let mut next_seed = || {
        drop_counter += 1;
        base_seed ^ drop_counter.wrapping_mul(0xA076_1D64_78BD_642F)
    };

    // idx layout from ModelParams::named: 2 embeddings, 12 per block, 2 final.
    let tok_emb = staged.id(0);
    let pos_emb = staged.id(1);
    let pos_ids: Vec<u32> = (0..batch).flat_map(|_| 0..t as u32).collect();

    let te = tape.embedding(tok_emb, tokens);
    let pe = tape.embedding(pos_emb, &pos_ids);
    let mut x = tape.add(te, pe);
    if rate > 0.0 {
        let s = next_seed();
        x = tape.dropout(x, rate, s);
    }

    for i in 0..cfg.n_layers {
        let base = 2 + i * 12;
        let (ln1_g, ln1_b) = (staged.id(base), staged.id(base + 1));
        let (qkv_w, qkv_b) = (staged.id(base + 2), staged.id(base + 3));
        let (proj_w, proj_b) = (staged.id(base + 4), staged.id(base + 5));
        let (ln2_g, ln2_b) = (staged.id(base + 6), staged.id(base + 7));
        let (fc_w, fc_b) = (staged.id(base + 8), staged.id(base + 9));
        let (mproj_w, mproj_b) = (staged.id(base + 10), staged.id(base + 11));

        let a = tape.layer_norm(x, ln1_g, ln1_b, LN_EPS);
        let qkv_lin = tape.matmul(a, qkv_w);
        let qkv = tape.add_bias_row(qkv_lin, qkv_b);
        let attn_seed = if rate > 0.0 { next_seed() } else { 0 };
        let att = tape.causal_attention(qkv, batch, cfg.n_heads, rate, attn_seed);
        let att_lin = tape.matmul(att, proj_w);
        let mut att_out = tape.add_bias_row(att_lin, proj_b);
        if rate > 0.0 {
            let s = next_seed();
            att_out = tape.dropout(att_out, rate, s);
        }
        x = tape.add(x, att_out);

        let m = tape.layer_norm(x, ln2_g, ln2_b, LN_EPS);
        let fc_lin = tape.matmul(m, fc_w);
        let fc = tape.add_bias_row(fc_lin, fc_b);
        let h = tape.gelu(fc);
        let h_lin = tape.matmul(h, mproj_w);
        let mut h_out = tape.add_bias_row(h_lin, mproj_b);
        if rate > 0.0 {
            let s = next_seed();
            h_out = tape.dropout(h_out, rate, s);
        }
        x = tape.add(x, h_out);
    }

    let n = staged.ids.len();
    let xf = tape.layer_norm(x, staged.id(n - 2), staged.id(n - 1), LN_EPS);
    // Output projection is weight-tied to the token embedding.
    Ok(tape.matmul_ext(xf, tok_emb, true))
}

/// Inference-mode logits for a batch of equal-length sequences.
pub fn forward_logits<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    batch: usize,
) -> Result<Tensor<T>, ModelError> {
    let mut tape = Tape::new();
    let staged = stage_params(&mut tape, params);
    let logits = forward_on_tape(&mut tape, &staged, tokens, batch, Mode::Eval)?;
    Ok(tape.value(logits).clone())
}

/// One training forward+backward: mean next-token loss and gradients in
/// [`ModelParams::named`] order. Targets use
/// [`crate::tensor::tape::IGNORE_TARGET`] for padding.
pub fn loss_and_grads<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    targets: &[u32],
    batch: usize,
    dropout_seed: u64,
) -> Result<(f64, Vec<Tensor<T>>), ModelError> {
    let mut tape = Tape::new();
    let staged = stage_params(&mut tape, params);
    let logits = forward_on_tape(&mut tape, &staged, tokens, batch, Mode::Train { dropout_seed })?;
    let loss = tape.cross_entropy(logits, targets)?;
    let loss_val = tape.value(loss).item().as_f64();
    tape.backward(loss)?;
    let grads = staged.ids.iter().map(|&id| tape.grad_or_zeros(id)).collect();
    Ok((loss_val, grads))
}

/// Mean next-token loss without gradients (dropout off).
pub fn eval_loss<T: Scalar>(
    params: &ModelParams<T>,
    tokens: &[u32],
    targets: &[u32],
    batch: usize,
) -> Result<f64, ModelError> {
    let mut tape = Tape::new();
    let staged = stage_params(&mut tape, params);
    let logits = forward_on_tape(&mut tape, &staged, tokens, batch, Mode::Eval)?;
    let loss = tape.cross_entropy(logits, targets)?;
    Ok(tape.value(loss).item().as_f64())
}
