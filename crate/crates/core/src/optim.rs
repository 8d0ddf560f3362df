//! Adam with decoupled weight decay, layer-wise learning-rate decay groups,
//! cosine-with-warmup scheduling, and gradient accumulation.
//!
//! LLRD gives the head and pooling parameters the full base rate and scales
//! encoder layer `i` by `llrd^(L-i)` (so the top layer gets one factor and
//! lower layers geometrically less), with the embeddings one factor below
//! the bottom layer. Biases and layer-norm parameters take no weight decay.

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::head::HeadParams;
use crate::params::{Binding, ParamId, ParamStore};
use crate::pooling::{PoolingKind, PoolingParams};
use crate::tape::{Tape, TensorRef};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Full training recipe. Defaults mirror the reference recipe: effective
/// batch 64 = 16 x 4 accumulation, lr 2e-5, weight decay 0.01, LLRD 0.95,
/// 10% warmup into a cosine decay, 2 epochs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub llrd: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub micro_batch: usize,
    pub grad_accum: usize,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub pooling: PoolingKind,
    pub max_seq_len: usize,
    pub seed: u64,
    pub adam: AdamHyper,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 2e-5,
            weight_decay: 0.01,
            llrd: 0.95,
            warmup_ratio: 0.10,
            epochs: 2,
            micro_batch: 16,
            grad_accum: 4,
            focal_gamma: 2.0,
            focal_alpha: 0.5,
            pooling: PoolingKind::Mean,
            max_seq_len: 512,
            seed: 42,
            adam: AdamHyper::default(),
        }
    }
}

impl TrainConfig {
    pub fn effective_batch(&self) -> usize {
        self.micro_batch * self.grad_accum
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.warmup_ratio && self.warmup_ratio < 1.0) {
            return Err(Error::Config(format!(
                "warmup_ratio {} must lie strictly between 0 and 1",
                self.warmup_ratio
            )));
        }
        if self.micro_batch == 0 || self.grad_accum == 0 {
            return Err(Error::Config(
                "micro_batch and grad_accum must be positive".into(),
            ));
        }
        if !(0.0 < self.llrd && self.llrd <= 1.0) {
            return Err(Error::Config(format!(
                "llrd {} must lie in (0, 1]",
                self.llrd
            )));
        }
        if self.base_lr <= 0.0 || self.max_seq_len == 0 {
            return Err(Error::Config(
                "base_lr and max_seq_len must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One learning-rate tier. Every trainable parameter belongs to exactly one
/// group; `lr_scale` multiplies the base learning rate.
#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub name: String,
    pub ids: Vec<ParamId>,
    pub lr_scale: f64,
    pub weight_decay: f64,
}

/// Builds the LLRD parameter groups: head and pooling at scale 1, encoder
/// layer `i` at `llrd^(L-i)`, embeddings at `llrd^(L+1)`. Each tier splits
/// into a decayed group and a no-decay group (biases, norms).
pub fn build_llrd_groups(
    encoder: &EncoderParams,
    pooling: &PoolingParams,
    head: &HeadParams,
    store: &ParamStore,
    cfg: &TrainConfig,
) -> Vec<ParamGroup> {
    let l = encoder.num_layers();
    let mut groups = Vec::new();
    let mut push_tier = |name: String, ids: Vec<ParamId>, lr_scale: f64| {
        let (decay, no_decay): (Vec<ParamId>, Vec<ParamId>) =
            ids.into_iter().partition(|id| !store.no_decay(*id));
        if !decay.is_empty() {
            groups.push(ParamGroup {
                name: name.clone(),
                ids: decay,
                lr_scale,
                weight_decay: cfg.weight_decay,
            });
        }
        if !no_decay.is_empty() {
            groups.push(ParamGroup {
                name: format!("{name}.no_decay"),
                ids: no_decay,
                lr_scale,
                weight_decay: 0.0,
            });
        }
    };

    let mut head_and_pooling = head.param_ids();
    head_and_pooling.extend(pooling.param_ids());
    push_tier("head_pooling".into(), head_and_pooling, 1.0);
    for i in (0..l).rev() {
        let scale = cfg.llrd.powi((l - i) as i32);
        push_tier(format!("encoder.layer{i}"), encoder.layer_ids(i), scale);
    }
    let emb_scale = cfg.llrd.powi((l + 1) as i32);
    push_tier(
        "encoder.embeddings".into(),
        encoder.embedding_ids(),
        emb_scale,
    );
    groups
}

/// Learning-rate multiplier in [0, 1]: linear warmup over
/// `round(warmup_ratio * total_steps)` steps, then cosine decay to zero.
pub fn lr_at(step: usize, total_steps: usize, warmup_ratio: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("total_steps must be positive".into()));
    }
    let warmup_steps = (warmup_ratio * total_steps as f64).round() as usize;
    if step < warmup_steps {
        return Ok(step as f64 / warmup_steps as f64);
    }
    let span = total_steps - warmup_steps;
    let progress = if span == 0 {
        1.0
    } else {
        (step - warmup_steps) as f64 / span as f64
    };
    Ok(0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Per-parameter Adam moments with bias correction.
#[derive(Debug)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store
            .ids()
            .map(|id| vec![0.0; store.tensor(id).numel()])
            .collect();
        let v = store
            .ids()
            .map(|id| vec![0.0; store.tensor(id).numel()])
            .collect();
        AdamState { step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> (&[f64], &[f64]) {
        (&self.m[id.0], &self.v[id.0])
    }

    pub fn restore(&mut self, id: ParamId, m: Vec<f64>, v: Vec<f64>, step: u64) {
        self.m[id.0] = m;
        self.v[id.0] = v;
        self.step = step;
    }
}

/// One optimizer step over all groups.
///
/// The effective rate is `base_lr * lr_scale * schedule_mult`. Weight decay
/// is decoupled: `p -= lr_eff * wd * p` using the pre-step value, applied
/// alongside the bias-corrected moment update.
pub fn adam_step(
    store: &mut ParamStore,
    groups: &[ParamGroup],
    state: &mut AdamState,
    hyper: &AdamHyper,
    base_lr: f64,
    schedule_mult: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - hyper.beta1.powi(t);
    let bias2 = 1.0 - hyper.beta2.powi(t);

    for group in groups {
        let lr_eff = base_lr * group.lr_scale * schedule_mult;
        for &id in &group.ids {
            if !store.grad_touched(id) {
                return Err(Error::Config(format!(
                    "parameter {} has no gradient; run backward before stepping",
                    store.name(id)
                )));
            }
            let grad = store.grad(id).to_vec();
            let m = &mut state.m[id.0];
            let v = &mut state.v[id.0];
            let values = store.values_mut(id);
            for i in 0..values.len() {
                let g = grad[i];
                m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
                v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                let p = values[i];
                values[i] =
                    p - lr_eff * (m_hat / (v_hat.sqrt() + hyper.eps) + group.weight_decay * p);
            }
        }
    }
    Ok(())
}

/// Accumulates gradients from `grad_accum` micro-batches into the store.
///
/// Each micro-batch loss is scaled by `1/grad_accum` before backward, so the
/// accumulated gradient equals the gradient of the mean loss over the whole
/// effective batch. Returns the mean (unscaled) micro-batch loss.
pub fn accumulate_gradients<F>(
    store: &mut ParamStore,
    grad_accum: usize,
    mut micro_loss: F,
) -> Result<f64>
where
    F: FnMut(usize, &mut Tape, &Binding) -> Result<TensorRef>,
{
    if grad_accum == 0 {
        return Err(Error::Config("grad_accum must be >= 1".into()));
    }
    store.zero_grads();
    let mut total = 0.0;
    for k in 0..grad_accum {
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let loss = micro_loss(k, &mut tape, &binding)?;
        total += tape.scalar_value(loss);
        let scaled = tape.affine(loss, 1.0 / grad_accum as f64, 0.0);
        tape.backward(scaled)?;
        store.accumulate_grads(&tape, &binding);
    }
    Ok(total / grad_accum as f64)
}

/// Gradient accumulation followed by one optimizer step.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_and_step<F>(
    store: &mut ParamStore,
    groups: &[ParamGroup],
    state: &mut AdamState,
    hyper: &AdamHyper,
    base_lr: f64,
    schedule_mult: f64,
    grad_accum: usize,
    micro_loss: F,
) -> Result<f64>
where
    F: FnMut(usize, &mut Tape, &Binding) -> Result<TensorRef>,
{
    let mean_loss = accumulate_gradients(store, grad_accum, micro_loss)?;
    adam_step(store, groups, state, hyper, base_lr, schedule_mult)?;
    store.zero_grads();
    Ok(mean_loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single_param_store(value: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.alloc("p", Tensor::new(vec![value], vec![1]), false);
        (store, id)
    }

    fn plain_group(id: ParamId, weight_decay: f64) -> Vec<ParamGroup> {
        vec![ParamGroup {
            name: "g".into(),
            ids: vec![id],
            lr_scale: 1.0,
            weight_decay,
        }]
    }

    #[test]
    fn warmup_endpoints_and_midpoints() {
        assert_eq!(lr_at(0, 100, 0.1).unwrap(), 0.0);
        assert!((lr_at(5, 100, 0.1).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(lr_at(10, 100, 0.1).unwrap(), 1.0);
        assert!((lr_at(55, 100, 0.1).unwrap() - 0.5).abs() < 1e-12);
        assert!(lr_at(100, 100, 0.1).unwrap().abs() < 1e-12);
    }

    #[test]
    fn schedule_is_continuous_at_warmup_boundary() {
        // Both branches give exactly 1.0 at step == warmup_steps.
        let w = 10;
        let just_before = lr_at(w - 1, 100, 0.1).unwrap();
        let at = lr_at(w, 100, 0.1).unwrap();
        assert_eq!(at, 1.0);
        assert!(at - just_before < 0.11);
    }

    #[test]
    fn zero_total_steps_is_an_error() {
        assert!(lr_at(0, 0, 0.1).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let (mut store, id) = single_param_store(1.0);
        let mut state = AdamState::new(&store);
        // Deposit a gradient of 1.
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let s = tape.sum_all(binding.get(id));
        tape.backward(s).unwrap();
        store.accumulate_grads(&tape, &binding);

        adam_step(
            &mut store,
            &plain_group(id, 0.0),
            &mut state,
            &AdamHyper::default(),
            0.1,
            1.0,
        )
        .unwrap();
        let p = store.tensor(id).values[0];
        assert!(
            (p - 0.9).abs() < 1e-6,
            "bias-corrected first step should move by ~lr, got {p}"
        );
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_parameters_alone() {
        let (mut store, id) = single_param_store(0.75);
        let mut state = AdamState::new(&store);
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let zero = tape.affine(binding.get(id), 0.0, 0.0);
        let s = tape.sum_all(zero);
        tape.backward(s).unwrap();
        store.accumulate_grads(&tape, &binding);

        adam_step(
            &mut store,
            &plain_group(id, 0.0),
            &mut state,
            &AdamHyper::default(),
            0.1,
            1.0,
        )
        .unwrap();
        assert_eq!(store.tensor(id).values[0], 0.75);
    }

    #[test]
    fn pure_decay_path_shrinks_parameter() {
        let (mut store, id) = single_param_store(1.0);
        let mut state = AdamState::new(&store);
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let zero = tape.affine(binding.get(id), 0.0, 0.0);
        let s = tape.sum_all(zero);
        tape.backward(s).unwrap();
        store.accumulate_grads(&tape, &binding);

        adam_step(
            &mut store,
            &plain_group(id, 0.01),
            &mut state,
            &AdamHyper::default(),
            0.1,
            1.0,
        )
        .unwrap();
        let p = store.tensor(id).values[0];
        assert!(
            (p - 0.999).abs() < 1e-12,
            "p should shrink to 1 * (1 - 0.001), got {p}"
        );
    }

    #[test]
    fn stepping_without_gradients_is_an_error() {
        let (mut store, id) = single_param_store(1.0);
        let mut state = AdamState::new(&store);
        let err = adam_step(
            &mut store,
            &plain_group(id, 0.0),
            &mut state,
            &AdamHyper::default(),
            0.1,
            1.0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("no gradient"));
    }

    #[test]
    fn accumulation_with_one_chunk_matches_plain_backward() {
        let (mut store, id) = single_param_store(3.0);
        let mean = accumulate_gradients(&mut store, 1, |_, tape, binding| {
            let sq = tape.mul(binding.get(id), binding.get(id));
            Ok(tape.sum_all(sq))
        })
        .unwrap();
        assert_eq!(mean, 9.0);
        assert_eq!(store.grad(id), &[6.0]);
    }

    #[test]
    fn accumulated_chunks_average_their_gradients() {
        // Two micro-batches with gradients 2 and 6 -> averaged gradient 4.
        let (mut store, id) = single_param_store(1.0);
        accumulate_gradients(&mut store, 2, |k, tape, binding| {
            let factor = if k == 0 { 2.0 } else { 6.0 };
            let scaled = tape.affine(binding.get(id), factor, 0.0);
            Ok(tape.sum_all(scaled))
        })
        .unwrap();
        assert_eq!(store.grad(id), &[4.0]);
    }

    #[test]
    fn grad_buffers_are_zeroed_between_steps() {
        let (mut store, id) = single_param_store(1.0);
        let mut state = AdamState::new(&store);
        let groups = plain_group(id, 0.0);
        for _ in 0..2 {
            accumulate_and_step(
                &mut store,
                &groups,
                &mut state,
                &AdamHyper::default(),
                0.01,
                1.0,
                1,
                |_, tape, binding| {
                    let sq = tape.mul(binding.get(id), binding.get(id));
                    Ok(tape.sum_all(sq))
                },
            )
            .unwrap();
            assert_eq!(
                store.grad(id),
                &[0.0],
                "grads must be cleared after stepping"
            );
        }
        assert_eq!(state.step_count(), 2);
    }
}
