//! Incremental (KV-cached) inference.
//!
//! A [`Session`] feeds tokens one at a time, caching per-layer keys and
//! values so each appended token costs O(len) attention instead of a full
//! re-forward. The arithmetic deliberately mirrors the tape ops term for
//! term (same kernels, same accumulation order), so the logits it produces
//! are bit-identical to [`super::forward_logits`] on the same prefix —
//! the equivalence test asserts exact equality.

use super::{ModelError, ModelParams, LN_EPS};
use crate::tensor::kernels;

pub struct Session<'a> {
    params: &'a ModelParams<f32>,
    k_cache: Vec<Vec<f32>>,
    v_cache: Vec<Vec<f32>>,
    len: usize,
}

impl<'a> Session<'a> {
    pub fn new(params: &'a ModelParams<f32>) -> Self {
        let layers = params.cfg.n_layers;
        Session {
            params,
            k_cache: vec![Vec::new(); layers],
            v_cache: vec![Vec::new(); layers],
            len: 0,
        }
    }

    /// Number of tokens consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Append one token; returns logits for the next position.
    pub fn append(&mut self, token: u32) -> Result<Vec<f32>, ModelError> {
        self.advance(token, true).map(Option::unwrap)
    }

    /// Append many tokens without computing intermediate logits.
    pub fn extend(&mut self, tokens: &[u32]) -> Result<(), ModelError> {
        for &t in tokens {
            self.advance(t, false)?;
        }
        Ok(())
    }

    fn advance(&mut self, token: u32, want_logits: bool) -> Result<Option<Vec<f32>>, ModelError> {
        let cfg = &self.params.cfg;
        if token as usize >= cfg.vocab_size {
            return Err(ModelError::InvalidConfig(format!("token id {token} out of vocabulary")));
        }
        if self.len >= cfg.context_len {
            return Err(ModelError::ContextOverflow { got: self.len + 1, max: cfg.context_len });
        }
        let d = cfg.d_model;
        let heads = cfg.n_heads;
        let dh = d / heads;
        let scale = (1.0 / (dh as f64).sqrt()) as f32;
        let pos = self.len;

        let mut x = vec![0.0f32; d];
        let te = &self.params.tok_emb.data()[token as usize * d..(token as usize + 1) * d];
        let pe = &self.params.pos_emb.data()[pos * d..(pos + 1) * d];
        for c in 0..d {
            x[c] = te[c] + pe[c];
        }

        for (l, block) in self.params.blocks.iter().enumerate() {
            let a = layer_norm_row(&x, block.ln1.gain.data(), block.ln1.bias.data());
            let mut qkv = vec![0.0f32; 3 * d];
            kernels::matmul_seq(&a, block.qkv_w.data(), &mut qkv, 1, d, 3 * d);
            for (q, b) in qkv.iter_mut().zip(block.qkv_b.data()) {
                *q += *b;
            }
            self.k_cache[l].extend_from_slice(&qkv[d..2 * d]);
            self.v_cache[l].extend_from_slice(&qkv[2 * d..3 * d]);

            let n_ctx = pos + 1;
            let mut ctx = vec![0.0f32; d];
            let mut scores = vec![0.0f32; n_ctx];
            for h in 0..heads {
                let q = &qkv[h * dh..(h + 1) * dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kslice = &self.k_cache[l][j * d + h * dh..j * d + (h + 1) * dh];
                    *s = dot_f32(q, kslice) * scale;
                }
                kernels::softmax_row(&mut scores);
                let out = &mut ctx[h * dh..(h + 1) * dh];
                for (j, p) in scores.iter().enumerate() {
                    let vslice = &self.v_cache[l][j * d + h * dh..j * d + (h + 1) * dh];
                    for (o, vv) in out.iter_mut().zip(vslice) {
                        *o += *p * *vv;
                    }
                }
            }

            let mut att = vec![0.0f32; d];
            kernels::matmul_seq(&ctx, block.proj_w.data(), &mut att, 1, d, d);
            for c in 0..d {
                x[c] += att[c] + block.proj_b.data()[c];
            }

            let m = layer_norm_row(&x, block.ln2.gain.data(), block.ln2.bias.data());
            let mut hmid = vec![0.0f32; 4 * d];
            kernels::matmul_seq(&m, block.fc_w.data(), &mut hmid, 1, d, 4 * d);
            for (h, b) in hmid.iter_mut().zip(block.fc_b.data()) {
                *h = gelu_f32(*h + *b);
            }
            let mut hout = vec![0.0f32; d];
            kernels::matmul_seq(&hmid, block.mlp_proj_w.data(), &mut hout, 1, 4 * d, d);
            for c in 0..d {
                x[c] += hout[c] + block.mlp_proj_b.data()[c];
            }
        }

        self.len += 1;
        if !want_logits {
            return Ok(None);
        }
        let xf = layer_norm_row(&x, self.params.ln_f.gain.data(), self.params.ln_f.bias.data());
        let mut logits = vec![0.0f32; cfg.vocab_size];
        kernels::matmul_bt(&xf, self.params.tok_emb.data(), &mut logits, 1, d, cfg.vocab_size);
        Ok(Some(logits))
    }
}

fn layer_norm_row(x: &[f32], gain: &[f32], bias: &[f32]) -> Vec<f32> {
    // Must match the tape op exactly: same accumulation order and formula.
    let n = x.len();
    let nf = n as f32;
    let mut mu = 0.0f32;
    for v in x {
        mu += *v;
    }
    mu /= nf;
    let mut var = 0.0f32;
    for v in x {
        let c = *v - mu;
        var += c * c;
    }
    var /= nf;
    let rs = 1.0 / (var + LN_EPS as f32).sqrt();
    x.iter()
        .enumerate()
        .map(|(j, v)| (*v - mu) * rs * gain[j] + bias[j])
        .collect()
}

fn gelu_f32(x: f32) -> f32 {
    let xf = x as f64;
    let u = 0.797_884_560_802_865_4 * (xf + 0.044_715 * xf * xf * xf);
    (0.5 * xf * (1.0 + u.tanh())) as f32
}

fn dot_f32(x: &[f32], y: &[f32]) -> f32 {
    // Same lane structure as the kernel dot, for bit-equality with mm_bt.
    let mut out = [0.0f32];
    kernels::matmul_bt_seq(x, y, &mut out, 1, x.len(), 1);
    out[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_logits, init_model, ModelConfig};

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 32,
            dropout: 0.0,
            vocab_size: 60,
            context_len: 64,
            seed: 123,
        }
    }

    #[test]
    fn session_matches_full_forward_bitwise() {
        let params = init_model::<f32>(&cfg()).unwrap();
        let tokens: Vec<u32> = vec![5, 17, 3, 44, 29, 0, 8, 51, 12, 33];
        let full = forward_logits(&params, &tokens, 1).unwrap();
        let v = full.last_dim();

        let mut session = Session::new(&params);
        let mut incremental = Vec::new();
        for &t in &tokens {
            incremental.push(session.append(t).unwrap());
        }
        for (pos, logits) in incremental.iter().enumerate() {
            let expect = &full.data()[pos * v..(pos + 1) * v];
            assert_eq!(logits.as_slice(), expect, "logits differ at position {pos}");
        }
    }

    #[test]
    fn extend_then_append_equals_append_only() {
        let params = init_model::<f32>(&cfg()).unwrap();
        let tokens: Vec<u32> = vec![1, 2, 3, 4, 5, 6];

        let mut s1 = Session::new(&params);
        s1.extend(&tokens[..5]).unwrap();
        let a = s1.append(tokens[5]).unwrap();

        let mut s2 = Session::new(&params);
        let mut b = Vec::new();
        for &t in &tokens {
            b = s2.append(t).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn overflow_past_context_len_errors() {
        let small = ModelConfig { context_len: 4, ..cfg() };
        let params = init_model::<f32>(&small).unwrap();
        let mut s = Session::new(&params);
        for t in 0..4 {
            s.append(t).unwrap();
        }
        assert!(matches!(s.append(0), Err(ModelError::ContextOverflow { .. })));
    }
}
