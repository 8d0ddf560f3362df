//! The four strategies for collapsing per-token states into one vector.
//!
//! Pipelines, in increasing parameter count:
//!
//! * `mean` — masked mean over the final layer. No parameters.
//! * `wlp_mean` — softmax-weighted combination of all `L+1` layer outputs
//!   (embedding output included), then masked mean.
//! * `wlp_attention` — the same layer combination, then multi-query
//!   attention pooling: each learned query scores the tokens, the per-query
//!   context vectors are concatenated and projected back to width `H`.
//! * `wlp_attention_gated` — sigmoid-gated fusion of the mean-pooled and
//!   attention-pooled vectors of the combined states. Gates are elementwise
//!   and computed from the concatenation of both pooled vectors.
//!
//! Layer weighting happens before token aggregation because it is a choice
//! of representation, made prior to deciding which tokens matter. Gates and
//! layer weights start neutral (all-zero parameters give uniform layer
//! weights and 0.5 gates) so none of the ablations starts with an advantage.

use crate::encoder::{LayerStates, INIT_STD};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::Seeder;
use crate::tape::{Tape, TensorRef};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingKind {
    Mean,
    WlpMean,
    WlpAttention,
    WlpAttentionGated,
}

impl PoolingKind {
    pub const ALL: [PoolingKind; 4] = [
        PoolingKind::Mean,
        PoolingKind::WlpMean,
        PoolingKind::WlpAttention,
        PoolingKind::WlpAttentionGated,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PoolingKind::Mean => "mean",
            PoolingKind::WlpMean => "wlp_mean",
            PoolingKind::WlpAttention => "wlp_attention",
            PoolingKind::WlpAttentionGated => "wlp_attention_gated",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(PoolingKind::Mean),
            "wlp_mean" => Ok(PoolingKind::WlpMean),
            "wlp_attention" => Ok(PoolingKind::WlpAttention),
            "wlp_attention_gated" => Ok(PoolingKind::WlpAttentionGated),
            other => Err(Error::Config(format!(
                "unknown pooling kind {other:?}; expected one of mean, wlp_mean, wlp_attention, wlp_attention_gated"
            ))),
        }
    }
}

impl std::fmt::Display for PoolingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Learnable state for one pooling pipeline. Exactly the parameters the kind
/// demands are allocated: `mean` allocates none.
#[derive(Debug)]
pub struct PoolingParams {
    pub kind: PoolingKind,
    pub attention_heads: usize,
    layer_weights: Option<ParamId>,
    queries: Option<ParamId>,
    projection: Option<ParamId>,
    gate_weights: Option<ParamId>,
    gate_bias: Option<ParamId>,
}

/// Number of pooled vectors merged by gated fusion (mean + attention).
const FUSION_INPUTS: usize = 2;

pub fn init_pooling(
    kind: PoolingKind,
    num_layers: usize,
    hidden: usize,
    attention_heads: usize,
    store: &mut ParamStore,
    seeder: &Seeder,
) -> Result<PoolingParams> {
    if attention_heads == 0 {
        return Err(Error::Config("attention_heads must be positive".into()));
    }
    let mut rng = seeder.stream("init/pooling");
    let l1 = num_layers + 1;
    let h = hidden;

    let needs_wlp = kind != PoolingKind::Mean;
    let needs_attention = matches!(
        kind,
        PoolingKind::WlpAttention | PoolingKind::WlpAttentionGated
    );
    let needs_gate = kind == PoolingKind::WlpAttentionGated;

    // Zero layer weights start the combination at a uniform softmax.
    let layer_weights =
        needs_wlp.then(|| store.alloc("pooling.layer_weights", Tensor::zeros(vec![l1]), true));
    let queries = needs_attention.then(|| {
        store.alloc(
            "pooling.queries",
            Tensor::normal(vec![attention_heads, h], INIT_STD, &mut rng),
            false,
        )
    });
    let projection = needs_attention.then(|| {
        store.alloc(
            "pooling.projection",
            Tensor::normal(vec![attention_heads * h, h], INIT_STD, &mut rng),
            false,
        )
    });
    // Zero gate parameters start every gate at sigmoid(0) = 0.5.
    let gate_weights = needs_gate.then(|| {
        store.alloc(
            "pooling.gate_weights",
            Tensor::zeros(vec![FUSION_INPUTS * h, FUSION_INPUTS * h]),
            false,
        )
    });
    let gate_bias = needs_gate.then(|| {
        store.alloc(
            "pooling.gate_bias",
            Tensor::zeros(vec![FUSION_INPUTS * h]),
            true,
        )
    });

    Ok(PoolingParams {
        kind,
        attention_heads,
        layer_weights,
        queries,
        projection,
        gate_weights,
        gate_bias,
    })
}

impl PoolingParams {
    pub fn param_ids(&self) -> Vec<ParamId> {
        [
            self.layer_weights,
            self.queries,
            self.projection,
            self.gate_weights,
            self.gate_bias,
        ]
        .into_iter()
        .flatten()
        .collect()
    }
}

/// Learnable parameter count for a pooling kind (strictly increasing across
/// the four kinds for any `num_layers >= 1`, `heads >= 1`).
pub fn parameter_count(
    kind: PoolingKind,
    num_layers: usize,
    hidden: usize,
    attention_heads: usize,
) -> usize {
    let l1 = num_layers + 1;
    let h = hidden;
    let attn = attention_heads * h + attention_heads * h * h;
    let gate = (FUSION_INPUTS * h) * (FUSION_INPUTS * h) + FUSION_INPUTS * h;
    match kind {
        PoolingKind::Mean => 0,
        PoolingKind::WlpMean => l1,
        PoolingKind::WlpAttention => l1 + attn,
        PoolingKind::WlpAttentionGated => l1 + attn + gate,
    }
}

/// Masked mean over the final layer's states.
pub fn mean_pool(tape: &mut Tape, states: &LayerStates, mask: TensorRef) -> Result<TensorRef> {
    tape.masked_mean(states.last(), mask)
}

/// `sum_i softmax(w)_i * states[i]`, elementwise over `[B, T, H]`.
pub fn weighted_layer_combine(
    tape: &mut Tape,
    states: &[TensorRef],
    layer_weights: TensorRef,
) -> Result<TensorRef> {
    let w_shape = tape.shape(layer_weights).to_vec();
    if w_shape != [states.len()] {
        return Err(Error::ShapeMismatch {
            op: "weighted_layer_combine",
            left: vec![states.len()],
            right: w_shape,
        });
    }
    let weights = tape.softmax(layer_weights, 0);
    tape.linear_combination(states, weights)
}

/// Multi-query attention pooling over `[B, T, H]` states.
///
/// Each query `q_j` scores token `t` as `q_j . h_t / sqrt(H)`; masked
/// positions score -inf. The per-query contexts are concatenated and
/// projected back to width `H`.
pub fn attention_pool(
    tape: &mut Tape,
    hidden_states: TensorRef,
    mask: TensorRef,
    queries: TensorRef,
    projection: TensorRef,
) -> Result<TensorRef> {
    let s = tape.shape(hidden_states).to_vec();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "attention_pool",
            left: s,
            right: vec![],
        });
    }
    let (b, t, h) = (s[0], s[1], s[2]);
    let q_shape = tape.shape(queries).to_vec();
    let heads = q_shape[0];
    if q_shape != [heads, h] || tape.shape(projection) != [heads * h, h] {
        return Err(Error::ShapeMismatch {
            op: "attention_pool",
            left: q_shape,
            right: tape.shape(projection).to_vec(),
        });
    }
    check_mask_rows(tape, mask)?;

    let flat = tape.reshape(hidden_states, vec![b * t, h]);
    let qt = tape.transpose_last2(queries);
    let scores = tape.matmul(flat, qt)?; // [B*T, heads]
    let scores = tape.affine(scores, 1.0 / (h as f64).sqrt(), 0.0);
    let scores = tape.reshape(scores, vec![b, t, heads]);
    let scores = tape.transpose_last2(scores); // [B, heads, T]
    let masked = tape.mask_fill_neg_inf(scores, mask)?;
    let attn = tape.softmax(masked, 2);
    let ctx = tape.bmm(attn, hidden_states)?; // [B, heads, H]
    let ctx_flat = tape.reshape(ctx, vec![b, heads * h]);
    tape.matmul(ctx_flat, projection)
}

/// Sigmoid-gated fusion of `k >= 2` pooled vectors.
///
/// Gates come from the concatenation `z` of all pooled vectors:
/// `g = sigmoid(z G + bias)` split into one elementwise gate block per
/// input, and the output is `sum_i g_i ⊙ pooled_i`.
pub fn gated_fusion(
    tape: &mut Tape,
    pooled: &[TensorRef],
    gate_weights: TensorRef,
    gate_bias: TensorRef,
) -> Result<TensorRef> {
    if pooled.len() < 2 {
        return Err(Error::Config(format!(
            "gated fusion needs at least 2 pooled inputs, got {}",
            pooled.len()
        )));
    }
    let shape = tape.shape(pooled[0]).to_vec();
    for &p in pooled {
        if tape.shape(p) != shape {
            return Err(Error::ShapeMismatch {
                op: "gated_fusion",
                left: shape,
                right: tape.shape(p).to_vec(),
            });
        }
    }
    let h = shape[1];
    let z = tape.concat_last(pooled)?;
    let pre = tape.matmul(z, gate_weights)?;
    let pre = tape.add_bias(pre, gate_bias)?;
    let gates = tape.sigmoid(pre);
    let mut out = None;
    for (i, &p) in pooled.iter().enumerate() {
        let gi = tape.slice_last(gates, i * h, h)?;
        let term = tape.mul(gi, p);
        out = Some(match out {
            None => term,
            Some(acc) => tape.add(acc, term),
        });
    }
    Ok(out.expect("k >= 2"))
}

/// Dispatches a full pooling pipeline for the configured kind.
pub fn pool(
    params: &PoolingParams,
    tape: &mut Tape,
    binding: &Binding,
    states: &LayerStates,
    mask: TensorRef,
) -> Result<TensorRef> {
    check_mask_rows(tape, mask)?;
    match params.kind {
        PoolingKind::Mean => mean_pool(tape, states, mask),
        PoolingKind::WlpMean => {
            let w = binding.get(
                params
                    .layer_weights
                    .expect("wlp_mean allocates layer weights"),
            );
            let combined = weighted_layer_combine(tape, &states.states, w)?;
            tape.masked_mean(combined, mask)
        }
        PoolingKind::WlpAttention => {
            let w = binding.get(
                params
                    .layer_weights
                    .expect("wlp_attention allocates layer weights"),
            );
            let combined = weighted_layer_combine(tape, &states.states, w)?;
            attention_pool(
                tape,
                combined,
                mask,
                binding.get(params.queries.expect("wlp_attention allocates queries")),
                binding.get(
                    params
                        .projection
                        .expect("wlp_attention allocates projection"),
                ),
            )
        }
        PoolingKind::WlpAttentionGated => {
            let w = binding.get(
                params
                    .layer_weights
                    .expect("gated kind allocates layer weights"),
            );
            let combined = weighted_layer_combine(tape, &states.states, w)?;
            let mean_branch = tape.masked_mean(combined, mask)?;
            let attn_branch = attention_pool(
                tape,
                combined,
                mask,
                binding.get(params.queries.expect("gated kind allocates queries")),
                binding.get(params.projection.expect("gated kind allocates projection")),
            )?;
            gated_fusion(
                tape,
                &[mean_branch, attn_branch],
                binding.get(
                    params
                        .gate_weights
                        .expect("gated kind allocates gate weights"),
                ),
                binding.get(params.gate_bias.expect("gated kind allocates gate bias")),
            )
        }
    }
}

fn check_mask_rows(tape: &Tape, mask: TensorRef) -> Result<()> {
    let shape = tape.shape(mask);
    let (b, t) = (shape[0], shape[1]);
    let values = tape.values(mask);
    for bi in 0..b {
        if values[bi * t..(bi + 1) * t].iter().sum::<f64>() == 0.0 {
            return Err(Error::EmptyMaskRow { row: bi });
        }
    }
    Ok(())
}
