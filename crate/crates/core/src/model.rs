//! A small decoder-only causal transformer trained from random init.
//!
//! Pre-norm residual blocks, learned positional embeddings, GELU feed
//! forward, and an output head tied to the token embedding. The forward
//! pass optionally injects trainable prefix rows into the embedding stream
//! and routes attention projections through LoRA adapters.
//!
//! Causal masking treats injected prefix rows as always-visible past
//! context: every real position attends to every virtual position, real
//! positions attend causally among themselves, and virtual positions
//! attend causally within the prefix block only.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adapters::{LoraSet, PrefixParams};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};
use crate::TokenId;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds capacity {max} (prefix reserves {reserved})")]
    SequenceTooLong {
        len: usize,
        max: usize,
        reserved: usize,
    },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    Vocabulary { id: TokenId, vocab: usize },
    #[error("prefix insertion point {at} beyond sequence length {len}")]
    BadInsertPoint { at: usize, len: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            vocab_size: crate::corpus::ByteTokenizer::VOCAB_SIZE,
            max_seq_len: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_layers == 0
            || self.n_heads == 0
            || self.d_model == 0
            || self.d_ff == 0
            || self.vocab_size == 0
            || self.max_seq_len == 0
        {
            return Err(ModelError::InvalidConfig("all extents must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form count of stored parameters (the output head is tied to
    /// the token embedding and contributes nothing).
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * d * d            // q, k, v, o
            + 4 * d                          // ln1/ln2 gain + bias
            + self.d_ff * d + self.d_ff      // ff_w1 + bias
            + d * self.d_ff + d; // ff_w2 + bias
        self.vocab_size * d + self.max_seq_len * d + self.n_layers * per_layer + 2 * d
    }
}

#[derive(Debug, Clone)]
pub struct LayerWeights<S> {
    pub attn_q: Tensor<S>,
    pub attn_k: Tensor<S>,
    pub attn_v: Tensor<S>,
    pub attn_o: Tensor<S>,
    pub ln1_gain: Tensor<S>,
    pub ln1_bias: Tensor<S>,
    pub ln2_gain: Tensor<S>,
    pub ln2_bias: Tensor<S>,
    pub ff_w1: Tensor<S>,
    pub ff_b1: Tensor<S>,
    pub ff_w2: Tensor<S>,
    pub ff_b2: Tensor<S>,
}

#[derive(Debug, Clone)]
pub struct ModelWeights<S> {
    pub config: ModelConfig,
    pub token_embedding: Tensor<S>,
    pub pos_embedding: Tensor<S>,
    pub layers: Vec<LayerWeights<S>>,
    pub final_norm_gain: Tensor<S>,
    pub final_norm_bias: Tensor<S>,
}

/// Deterministic Gaussian init (std 0.02) for matrices and embeddings;
/// ones for layer-norm gains, zeros for every bias.
pub fn init_weights<S: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelWeights<S>, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let token_embedding = Tensor::randn(vec![config.vocab_size, d], INIT_STD, &mut rng);
    let pos_embedding = Tensor::randn(vec![config.max_seq_len, d], INIT_STD, &mut rng);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            attn_q: Tensor::randn(vec![d, d], INIT_STD, &mut rng),
            attn_k: Tensor::randn(vec![d, d], INIT_STD, &mut rng),
            attn_v: Tensor::randn(vec![d, d], INIT_STD, &mut rng),
            attn_o: Tensor::randn(vec![d, d], INIT_STD, &mut rng),
            ln1_gain: Tensor::filled(vec![d], S::one()),
            ln1_bias: Tensor::zeros(vec![d]),
            ln2_gain: Tensor::filled(vec![d], S::one()),
            ln2_bias: Tensor::zeros(vec![d]),
            ff_w1: Tensor::randn(vec![config.d_ff, d], INIT_STD, &mut rng),
            ff_b1: Tensor::zeros(vec![config.d_ff]),
            ff_w2: Tensor::randn(vec![d, config.d_ff], INIT_STD, &mut rng),
            ff_b2: Tensor::zeros(vec![d]),
        })
        .collect();
    Ok(ModelWeights {
        config: config.clone(),
        token_embedding,
        pos_embedding,
        layers,
        final_norm_gain: Tensor::filled(vec![d], S::one()),
        final_norm_bias: Tensor::zeros(vec![d]),
    })
}

impl<S: Scalar> ModelWeights<S> {
    /// Stable-order iteration over every stored tensor.
    pub fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> = vec![
            ("token_embedding".into(), &self.token_embedding),
            ("pos_embedding".into(), &self.pos_embedding),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_q"), &l.attn_q));
            out.push((format!("layers.{i}.attn_k"), &l.attn_k));
            out.push((format!("layers.{i}.attn_v"), &l.attn_v));
            out.push((format!("layers.{i}.attn_o"), &l.attn_o));
            out.push((format!("layers.{i}.ln1_gain"), &l.ln1_gain));
            out.push((format!("layers.{i}.ln1_bias"), &l.ln1_bias));
            out.push((format!("layers.{i}.ln2_gain"), &l.ln2_gain));
            out.push((format!("layers.{i}.ln2_bias"), &l.ln2_bias));
            out.push((format!("layers.{i}.ff_w1"), &l.ff_w1));
            out.push((format!("layers.{i}.ff_b1"), &l.ff_b1));
            out.push((format!("layers.{i}.ff_w2"), &l.ff_w2));
            out.push((format!("layers.{i}.ff_b2"), &l.ff_b2));
        }
        out.push(("final_norm_gain".into(), &self.final_norm_gain));
        out.push(("final_norm_bias".into(), &self.final_norm_bias));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> = vec![
            ("token_embedding".into(), &mut self.token_embedding),
            ("pos_embedding".into(), &mut self.pos_embedding),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.attn_q"), &mut l.attn_q));
            out.push((format!("layers.{i}.attn_k"), &mut l.attn_k));
            out.push((format!("layers.{i}.attn_v"), &mut l.attn_v));
            out.push((format!("layers.{i}.attn_o"), &mut l.attn_o));
            out.push((format!("layers.{i}.ln1_gain"), &mut l.ln1_gain));
            out.push((format!("layers.{i}.ln1_bias"), &mut l.ln1_bias));
            out.push((format!("layers.{i}.ln2_gain"), &mut l.ln2_gain));
            out.push((format!("layers.{i}.ln2_bias"), &mut l.ln2_bias));
            out.push((format!("layers.{i}.ff_w1"), &mut l.ff_w1));
            out.push((format!("layers.{i}.ff_b1"), &mut l.ff_b1));
            out.push((format!("layers.{i}.ff_w2"), &mut l.ff_w2));
            out.push((format!("layers.{i}.ff_b2"), &mut l.ff_b2));
        }
        out.push(("final_norm_gain".into(), &mut self.final_norm_gain));
        out.push(("final_norm_bias".into(), &mut self.final_norm_bias));
        out
    }

    /// Parameter count by enumeration of the stored arrays.
    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn set_trainable(&mut self, on: bool) {
        for (_, t) in self.named_params_mut() {
            t.set_requires_grad(on);
        }
    }

    /// SHA-256 over names, shapes, and value bits; used by the frozen-base
    /// checks.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.named_params() {
            hasher.update(name.as_bytes());
            for &dim in t.shape() {
                hasher.update((dim as u64).to_le_bytes());
            }
            for v in t.data() {
                hasher.update(v.to_f64c().to_bits().to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn cast<T: Scalar>(&self) -> ModelWeights<T> {
        ModelWeights {
            config: self.config.clone(),
            token_embedding: self.token_embedding.cast(),
            pos_embedding: self.pos_embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_q: l.attn_q.cast(),
                    attn_k: l.attn_k.cast(),
                    attn_v: l.attn_v.cast(),
                    attn_o: l.attn_o.cast(),
                    ln1_gain: l.ln1_gain.cast(),
                    ln1_bias: l.ln1_bias.cast(),
                    ln2_gain: l.ln2_gain.cast(),
                    ln2_bias: l.ln2_bias.cast(),
                    ff_w1: l.ff_w1.cast(),
                    ff_b1: l.ff_b1.cast(),
                    ff_w2: l.ff_w2.cast(),
                    ff_b2: l.ff_b2.cast(),
                })
                .collect(),
            final_norm_gain: self.final_norm_gain.cast(),
            final_norm_bias: self.final_norm_bias.cast(),
        }
    }
}

/// Records which tape leaf holds which named parameter during a forward
/// pass, so the trainer can move gradients back into the owning tensors.
#[derive(Debug, Default)]
pub struct ParamBinder {
    entries: Vec<(String, Var)>,
}

impl ParamBinder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, name: String, var: Var) {
        self.entries.push((name, var));
    }

    pub fn entries(&self) -> &[(String, Var)] {
        &self.entries
    }
}

/// Prefix rows plus the point in the token sequence they are injected at.
#[derive(Debug, Clone, Copy)]
pub struct PrefixInjection<'a, S> {
    pub params: &'a PrefixParams<S>,
    pub question_start: usize,
}

struct Binding<'a> {
    binder: Option<&'a mut ParamBinder>,
}

impl<'a> Binding<'a> {
    fn leaf<S: Scalar>(&mut self, tape: &mut Tape<S>, name: &str, t: &Tensor<S>) -> Var {
        let v = tape.leaf(t);
        if let Some(b) = self.binder.as_mut() {
            b.record(name.to_string(), v);
        }
        v
    }
}

/// Attention visibility for a sequence of `total` positions with a virtual
/// block at `virt_start..virt_start + virt_len`.
fn build_attention_mask(total: usize, virt_start: usize, virt_len: usize) -> Arc<Vec<bool>> {
    let virt_end = virt_start + virt_len;
    let is_virt = |p: usize| p >= virt_start && p < virt_end;
    let mut mask = vec![false; total * total];
    for i in 0..total {
        for j in 0..total {
            let visible = if is_virt(i) {
                is_virt(j) && j <= i
            } else {
                is_virt(j) || j <= i
            };
            mask[i * total + j] = visible;
        }
    }
    Arc::new(mask)
}

impl<S: Scalar> ModelWeights<S> {
    /// Builds the causal forward graph on `tape` and returns the logits
    /// node of shape `[tokens.len(), vocab_size]`; rows for injected
    /// prefix positions are dropped from the output.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<S>,
        tokens: &[TokenId],
        prefix: Option<PrefixInjection<'_, S>>,
        lora: Option<&LoraSet<S>>,
        binder: Option<&mut ParamBinder>,
    ) -> Result<Var, ModelError> {
        let cfg = &self.config;
        let t = tokens.len();
        if t == 0 {
            return Err(ModelError::InvalidConfig("empty token sequence".into()));
        }
        for &id in tokens {
            if id as usize >= cfg.vocab_size {
                return Err(ModelError::Vocabulary {
                    id,
                    vocab: cfg.vocab_size,
                });
            }
        }
        let m = prefix.as_ref().map_or(0, |p| p.params.len());
        if t + m > cfg.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: t,
                max: cfg.max_seq_len,
                reserved: m,
            });
        }
        if let Some(p) = &prefix {
            if p.question_start > t {
                return Err(ModelError::BadInsertPoint {
                    at: p.question_start,
                    len: t,
                });
            }
        }

        let mut bind = Binding { binder };
        let tok_table = bind.leaf(tape, "token_embedding", &self.token_embedding);
        let pos_table = bind.leaf(tape, "pos_embedding", &self.pos_embedding);

        let embedded = tape.embedding_lookup(tok_table, tokens)?;
        let (mut h, virt_start, virt_len) = match &prefix {
            Some(p) if p.params.len() > 0 => {
                let p_var = bind.leaf(tape, "adapter.prefix.p", &p.params.p);
                let injected =
                    crate::adapters::prefix_inject_on_tape(tape, embedded, p_var, p.question_start)?;
                (injected, p.question_start, p.params.len())
            }
            Some(p) => (embedded, p.question_start, 0),
            None => (embedded, 0, 0),
        };
        let total = t + virt_len;

        // positions are contiguous over the injected layout
        let pos_ids: Vec<TokenId> = (0..total as TokenId).collect();
        let pos = tape.embedding_lookup(pos_table, &pos_ids)?;
        h = tape.add(h, pos)?;

        let mask = build_attention_mask(total, virt_start, virt_len);
        let head_dim = cfg.head_dim();
        let inv_sqrt_dh = S::from_f64c(1.0 / (head_dim as f64).sqrt());
        let eps = S::from_f64c(1e-5);

        for (li, layer) in self.layers.iter().enumerate() {
            let pname = |field: &str| format!("layers.{li}.{field}");
            let ln1_g = bind.leaf(tape, &pname("ln1_gain"), &layer.ln1_gain);
            let ln1_b = bind.leaf(tape, &pname("ln1_bias"), &layer.ln1_bias);
            let normed = tape.layer_norm(h, ln1_g, ln1_b, eps)?;

            let adapters = lora.map(|set| &set.layers[li]);
            let project = |tape: &mut Tape<S>,
                               bind: &mut Binding<'_>,
                               field: &str,
                               w: &Tensor<S>,
                               la: Option<&crate::adapters::LoraLayer<S>>|
             -> Result<Var, ModelError> {
                let w_var = bind.leaf(tape, &pname(field), w);
                match la {
                    Some(adapter) => {
                        let name = format!("adapter.lora.{li}.{field}");
                        Ok(crate::adapters::lora_linear_on_tape(
                            tape,
                            normed,
                            w_var,
                            adapter,
                            &name,
                            &mut bind.binder,
                        )?)
                    }
                    None => Ok(tape.linear(normed, w_var)?),
                }
            };

            let q = project(
                tape,
                &mut bind,
                "attn_q",
                &layer.attn_q,
                adapters.and_then(|a| a.q.as_ref()),
            )?;
            let k = project(
                tape,
                &mut bind,
                "attn_k",
                &layer.attn_k,
                adapters.and_then(|a| a.k.as_ref()),
            )?;
            let v = project(
                tape,
                &mut bind,
                "attn_v",
                &layer.attn_v,
                adapters.and_then(|a| a.v.as_ref()),
            )?;

            let mut head_ctx = Vec::with_capacity(cfg.n_heads);
            for hi in 0..cfg.n_heads {
                let lo = hi * head_dim;
                let hi_end = lo + head_dim;
                let qh = tape.slice_cols(q, lo, hi_end)?;
                let kh = tape.slice_cols(k, lo, hi_end)?;
                let vh = tape.slice_cols(v, lo, hi_end)?;
                let kht = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kht)?;
                let scaled = tape.scale(scores, inv_sqrt_dh);
                let probs = tape.masked_row_softmax(scaled, mask.clone())?;
                head_ctx.push(tape.matmul(probs, vh)?);
            }
            let ctx = tape.concat_cols(&head_ctx)?;
            let o_var = bind.leaf(tape, &pname("attn_o"), &layer.attn_o);
            let attn_out = match adapters.and_then(|a| a.o.as_ref()) {
                Some(adapter) => crate::adapters::lora_linear_on_tape(
                    tape,
                    ctx,
                    o_var,
                    adapter,
                    &format!("adapter.lora.{li}.attn_o"),
                    &mut bind.binder,
                )?,
                None => tape.linear(ctx, o_var)?,
            };
            h = tape.add(h, attn_out)?;

            let ln2_g = bind.leaf(tape, &pname("ln2_gain"), &layer.ln2_gain);
            let ln2_b = bind.leaf(tape, &pname("ln2_bias"), &layer.ln2_bias);
            let normed2 = tape.layer_norm(h, ln2_g, ln2_b, eps)?;
            let w1 = bind.leaf(tape, &pname("ff_w1"), &layer.ff_w1);
            let b1 = bind.leaf(tape, &pname("ff_b1"), &layer.ff_b1);
            let w2 = bind.leaf(tape, &pname("ff_w2"), &layer.ff_w2);
            let b2 = bind.leaf(tape, &pname("ff_b2"), &layer.ff_b2);
            let ff = tape.linear(normed2, w1)?;
            let ff = tape.add_row(ff, b1)?;
            let ff = tape.gelu(ff);
            let ff = tape.linear(ff, w2)?;
            let ff = tape.add_row(ff, b2)?;
            h = tape.add(h, ff)?;
        }

        let fng = bind.leaf(tape, "final_norm_gain", &self.final_norm_gain);
        let fnb = bind.leaf(tape, "final_norm_bias", &self.final_norm_bias);
        let normed = tape.layer_norm(h, fng, fnb, eps)?;
        // output head tied to the token embedding
        let logits_full = tape.linear(normed, tok_table)?;

        if virt_len == 0 {
            return Ok(logits_full);
        }
        let before = tape.slice_rows(logits_full, 0, virt_start)?;
        let after = tape.slice_rows(logits_full, virt_start + virt_len, total)?;
        Ok(tape.concat_rows(&[before, after])?)
    }

    /// Inference-only forward on a private tape.
    pub fn forward(
        &self,
        tokens: &[TokenId],
        prefix: Option<PrefixInjection<'_, S>>,
        lora: Option<&LoraSet<S>>,
    ) -> Result<Tensor<S>, ModelError> {
        let mut tape = Tape::new();
        let logits = self.forward_on_tape(&mut tape, tokens, prefix, lora, None)?;
        Ok(tape.tensor_of(logits))
    }
}
