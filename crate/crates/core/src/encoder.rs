//! Small pre-norm transformer encoder exposing every layer's hidden states.
//!
//! The encoder is deliberately desk-scale (4 layers of width 64 by default):
//! the pooling strategies and the training recipe are the object of study
//! here, not encoder capacity. All sizes are configurable. Because there are
//! no pretrained weights in scope, blocks are pre-norm (norm before attention
//! and before the FFN), which trains stably from random initialization.
//!
//! Masked positions receive -inf attention logits, so they carry exactly zero
//! attention weight: appending padding to a batch cannot change the states at
//! unmasked positions.

use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::{Seeder, StreamRng};
use crate::tape::{Tape, TensorRef};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 4,
            hidden: 64,
            heads: 4,
            ffn_dim: 256,
            vocab_size: 1000,
            max_positions: 128,
            dropout_rate: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden ({}) must be divisible by heads ({})",
                self.hidden, self.heads
            )));
        }
        if self.num_layers == 0
            || self.ffn_dim == 0
            || self.vocab_size == 0
            || self.max_positions == 0
        {
            return Err(Error::Config(
                "num_layers, ffn_dim, vocab_size and max_positions must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Closed-form parameter count for this architecture.
    pub fn parameter_count(&self) -> usize {
        let h = self.hidden;
        let f = self.ffn_dim;
        let per_layer = 2 * h            // pre-attention norm
            + 4 * h * h + 4 * h          // q, k, v, o projections with biases
            + 2 * h                      // pre-FFN norm
            + h * f + f + f * h + h; // two FFN matrices with biases
        self.vocab_size * h + self.max_positions * h + self.num_layers * per_layer
    }
}

#[derive(Debug)]
struct LayerParams {
    ln1_gain: ParamId,
    ln1_shift: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_gain: ParamId,
    ln2_shift: ParamId,
    w_ffn_in: ParamId,
    b_ffn_in: ParamId,
    w_ffn_out: ParamId,
    b_ffn_out: ParamId,
}

impl LayerParams {
    fn ids(&self) -> Vec<ParamId> {
        vec![
            self.ln1_gain,
            self.ln1_shift,
            self.wq,
            self.bq,
            self.wk,
            self.bk,
            self.wv,
            self.bv,
            self.wo,
            self.bo,
            self.ln2_gain,
            self.ln2_shift,
            self.w_ffn_in,
            self.b_ffn_in,
            self.w_ffn_out,
            self.b_ffn_out,
        ]
    }
}

#[derive(Debug)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    token_embedding: ParamId,
    position_embedding: ParamId,
    layers: Vec<LayerParams>,
}

/// Hidden states for a batch: index 0 is the embedding output, index `i` the
/// output of layer `i`. The last entry is the conventional "final layer"
/// representation. All tensors share the shape `[B, T, H]`.
#[derive(Debug)]
pub struct LayerStates {
    pub states: Vec<TensorRef>,
    pub batch: usize,
    pub seq: usize,
    pub hidden: usize,
}

impl LayerStates {
    pub fn last(&self) -> TensorRef {
        *self.states.last().expect("layer states never empty")
    }
}

/// Allocates and initializes encoder parameters: normal(0, 0.02) weights,
/// zero biases, unit layer-norm gains. Deterministic under the seeder.
pub fn init_encoder(
    config: &EncoderConfig,
    store: &mut ParamStore,
    seeder: &Seeder,
) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = seeder.stream("init/encoder");
    let h = config.hidden;
    let f = config.ffn_dim;

    let token_embedding = store.alloc(
        "encoder.token_embedding",
        Tensor::normal(vec![config.vocab_size, h], INIT_STD, &mut rng),
        false,
    );
    let position_embedding = store.alloc(
        "encoder.position_embedding",
        Tensor::normal(vec![config.max_positions, h], INIT_STD, &mut rng),
        false,
    );

    let mut layers = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        let p = |suffix: &str| format!("encoder.layer{l}.{suffix}");
        let weight = |name: String,
                      rows: usize,
                      cols: usize,
                      rng: &mut StreamRng,
                      store: &mut ParamStore| {
            store.alloc(name, Tensor::normal(vec![rows, cols], INIT_STD, rng), false)
        };
        let layer = LayerParams {
            ln1_gain: store.alloc(p("ln1.gain"), Tensor::ones(vec![h]), true),
            ln1_shift: store.alloc(p("ln1.shift"), Tensor::zeros(vec![h]), true),
            wq: weight(p("attn.wq"), h, h, &mut rng, store),
            bq: store.alloc(p("attn.bq"), Tensor::zeros(vec![h]), true),
            wk: weight(p("attn.wk"), h, h, &mut rng, store),
            bk: store.alloc(p("attn.bk"), Tensor::zeros(vec![h]), true),
            wv: weight(p("attn.wv"), h, h, &mut rng, store),
            bv: store.alloc(p("attn.bv"), Tensor::zeros(vec![h]), true),
            wo: weight(p("attn.wo"), h, h, &mut rng, store),
            bo: store.alloc(p("attn.bo"), Tensor::zeros(vec![h]), true),
            ln2_gain: store.alloc(p("ln2.gain"), Tensor::ones(vec![h]), true),
            ln2_shift: store.alloc(p("ln2.shift"), Tensor::zeros(vec![h]), true),
            w_ffn_in: weight(p("ffn.w_in"), h, f, &mut rng, store),
            b_ffn_in: store.alloc(p("ffn.b_in"), Tensor::zeros(vec![f]), true),
            w_ffn_out: weight(p("ffn.w_out"), f, h, &mut rng, store),
            b_ffn_out: store.alloc(p("ffn.b_out"), Tensor::zeros(vec![h]), true),
        };
        layers.push(layer);
    }

    Ok(EncoderParams {
        config: config.clone(),
        token_embedding,
        position_embedding,
        layers,
    })
}

impl EncoderParams {
    pub fn embedding_ids(&self) -> Vec<ParamId> {
        vec![self.token_embedding, self.position_embedding]
    }

    pub fn layer_ids(&self, layer: usize) -> Vec<ParamId> {
        self.layers[layer].ids()
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut ids = self.embedding_ids();
        for l in &self.layers {
            ids.extend(l.ids());
        }
        ids
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

/// Runs the encoder, returning all `L+1` per-layer states.
///
/// `token_ids` is row-major `[B, T]`; `mask` marks real tokens with 1.0 and
/// padding with 0.0 and must already live on the tape (a non-gradient leaf).
#[allow(clippy::too_many_arguments)]
pub fn encode(
    params: &EncoderParams,
    tape: &mut Tape,
    binding: &Binding,
    token_ids: &[usize],
    batch: usize,
    mask: TensorRef,
    training: bool,
    rng: &mut StreamRng,
) -> Result<LayerStates> {
    let cfg = &params.config;
    if batch == 0 || !token_ids.len().is_multiple_of(batch) {
        return Err(Error::Config(format!(
            "token id buffer of {} does not divide into {batch} rows",
            token_ids.len()
        )));
    }
    let seq = token_ids.len() / batch;
    if seq > cfg.max_positions {
        return Err(Error::SequenceTooLong {
            len: seq,
            max: cfg.max_positions,
        });
    }
    if let Some(&bad) = token_ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id: bad,
            vocab: cfg.vocab_size,
        });
    }
    let h = cfg.hidden;
    let heads = cfg.heads;
    let head_dim = h / heads;

    // Embeddings: token rows plus learned position rows.
    let tok = tape.embedding(binding.get(params.token_embedding), token_ids)?;
    let pos_ids: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
    let pos = tape.embedding(binding.get(params.position_embedding), &pos_ids)?;
    let summed = tape.add(tok, pos);
    let mut x = tape.dropout(summed, cfg.dropout_rate, training, rng)?;

    let mut states = Vec::with_capacity(cfg.num_layers + 1);
    states.push(tape.reshape(x, vec![batch, seq, h]));

    let scale = 1.0 / (head_dim as f64).sqrt();
    for layer in &params.layers {
        // Self-attention sublayer.
        let normed = tape.layer_norm(
            x,
            binding.get(layer.ln1_gain),
            binding.get(layer.ln1_shift),
            LAYER_NORM_EPS,
        )?;
        let project = |tape: &mut Tape, w, b| -> Result<TensorRef> {
            let p = tape.matmul(normed, binding.get(w))?;
            tape.add_bias(p, binding.get(b))
        };
        let q = project(tape, layer.wq, layer.bq)?;
        let k = project(tape, layer.wk, layer.bk)?;
        let v = project(tape, layer.wv, layer.bv)?;

        let to_heads = |tape: &mut Tape, t| -> Result<TensorRef> {
            let r = tape.reshape(t, vec![batch, seq, h]);
            tape.split_heads(r, heads)
        };
        let qh = to_heads(tape, q)?;
        let kh = to_heads(tape, k)?;
        let vh = to_heads(tape, v)?;

        let kt = tape.transpose_last2(kh);
        let raw_scores = tape.bmm(qh, kt)?;
        let scaled = tape.affine(raw_scores, scale, 0.0);
        let masked = tape.mask_fill_neg_inf(scaled, mask)?;
        let attn = tape.softmax(masked, 2);
        let ctx = tape.bmm(attn, vh)?;
        let merged = tape.merge_heads(ctx, heads)?;
        let flat = tape.reshape(merged, vec![batch * seq, h]);
        let proj = tape.matmul(flat, binding.get(layer.wo))?;
        let proj = tape.add_bias(proj, binding.get(layer.bo))?;
        let proj = tape.dropout(proj, cfg.dropout_rate, training, rng)?;
        x = tape.add(x, proj);

        // Feed-forward sublayer.
        let normed2 = tape.layer_norm(
            x,
            binding.get(layer.ln2_gain),
            binding.get(layer.ln2_shift),
            LAYER_NORM_EPS,
        )?;
        let up = tape.matmul(normed2, binding.get(layer.w_ffn_in))?;
        let up = tape.add_bias(up, binding.get(layer.b_ffn_in))?;
        let act = tape.gelu(up);
        let down = tape.matmul(act, binding.get(layer.w_ffn_out))?;
        let down = tape.add_bias(down, binding.get(layer.b_ffn_out))?;
        let down = tape.dropout(down, cfg.dropout_rate, training, rng)?;
        x = tape.add(x, down);

        states.push(tape.reshape(x, vec![batch, seq, h]));
    }

    Ok(LayerStates {
        states,
        batch,
        seq,
        hidden: h,
    })
}

/// Builds the `[B, T]` 0/1 mask leaf on the tape.
pub fn mask_leaf(tape: &mut Tape, mask: &[f64], batch: usize, seq: usize) -> TensorRef {
    assert_eq!(mask.len(), batch * seq);
    tape.constant(mask.to_vec(), vec![batch, seq])
}
