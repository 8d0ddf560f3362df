//! Classification head: dense block, layer norm, GELU, multi-sample dropout,
//! linear classifier over {human, machine}.
//!
//! Multi-sample dropout draws five masks at rates 0.1/0.15/0.2/0.25/0.3 and
//! averages the five resulting logit vectors. The dense block is computed
//! once; because dropout is a diagonal linear map and the classifier is
//! linear, averaging the five masked activations before the classifier gives
//! exactly the same value and gradient as averaging the five logit vectors,
//! while keeping the all-rates-zero case bit-identical to the evaluation
//! path (a five-term float average of identical vectors would not be).

use crate::encoder::LAYER_NORM_EPS;
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::{Seeder, StreamRng};
use crate::tape::{Tape, TensorRef};
use crate::tensor::Tensor;
use rand::Rng;

pub const NUM_CLASSES: usize = 2;
pub const MULTI_SAMPLE_RATES: [f64; 5] = [0.1, 0.15, 0.2, 0.25, 0.3];

#[derive(Debug)]
pub struct HeadParams {
    pub hidden: usize,
    /// The five multi-sample dropout rates used in training mode.
    pub dropout_rates: [f64; 5],
    dense: ParamId,
    dense_bias: ParamId,
    norm_gain: ParamId,
    norm_shift: ParamId,
    classifier: ParamId,
    classifier_bias: ParamId,
}

pub fn init_head(hidden: usize, store: &mut ParamStore, seeder: &Seeder) -> HeadParams {
    let mut rng = seeder.stream("init/head");
    HeadParams {
        hidden,
        dropout_rates: MULTI_SAMPLE_RATES,
        dense: store.alloc(
            "head.dense",
            Tensor::normal(vec![hidden, hidden], crate::encoder::INIT_STD, &mut rng),
            false,
        ),
        dense_bias: store.alloc("head.dense_bias", Tensor::zeros(vec![hidden]), true),
        norm_gain: store.alloc("head.norm_gain", Tensor::ones(vec![hidden]), true),
        norm_shift: store.alloc("head.norm_shift", Tensor::zeros(vec![hidden]), true),
        classifier: store.alloc(
            "head.classifier",
            Tensor::normal(
                vec![hidden, NUM_CLASSES],
                crate::encoder::INIT_STD,
                &mut rng,
            ),
            false,
        ),
        classifier_bias: store.alloc(
            "head.classifier_bias",
            Tensor::zeros(vec![NUM_CLASSES]),
            true,
        ),
    }
}

impl HeadParams {
    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.dense,
            self.dense_bias,
            self.norm_gain,
            self.norm_shift,
            self.classifier,
            self.classifier_bias,
        ]
    }
}

/// Maps pooled vectors `[B, H]` to logits `[B, 2]`.
///
/// Training applies the five-mask dropout average after the GELU; evaluation
/// runs a single no-dropout pass.
pub fn head_forward(
    params: &HeadParams,
    tape: &mut Tape,
    binding: &Binding,
    pooled: TensorRef,
    training: bool,
    rng: &mut StreamRng,
) -> Result<TensorRef> {
    let shape = tape.shape(pooled).to_vec();
    if shape.len() != 2 || shape[1] != params.hidden {
        return Err(Error::ShapeMismatch {
            op: "head_forward",
            left: shape,
            right: vec![params.hidden],
        });
    }
    let dense = tape.matmul(pooled, binding.get(params.dense))?;
    let dense = tape.add_bias(dense, binding.get(params.dense_bias))?;
    let normed = tape.layer_norm(
        dense,
        binding.get(params.norm_gain),
        binding.get(params.norm_shift),
        LAYER_NORM_EPS,
    )?;
    let act = tape.gelu(normed);

    let features = if training {
        for rate in params.dropout_rates {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!(
                    "head dropout rate {rate} must satisfy 0 <= rate < 1"
                )));
            }
        }
        let n = tape.tensor(act).numel();
        // Mean of the five inverted-dropout masks; applying it before the
        // linear classifier equals averaging the five logit vectors.
        let mut mean_mask = vec![0.0f64; n];
        for rate in params.dropout_rates {
            let keep = 1.0 / (1.0 - rate);
            for slot in mean_mask.iter_mut() {
                if rng.random::<f64>() >= rate {
                    *slot += keep;
                }
            }
        }
        let k = params.dropout_rates.len() as f64;
        for slot in mean_mask.iter_mut() {
            *slot /= k;
        }
        tape.apply_scale_mask(act, mean_mask)
    } else {
        act
    };

    let logits = tape.matmul(features, binding.get(params.classifier))?;
    tape.add_bias(logits, binding.get(params.classifier_bias))
}

/// Argmax over the two logits with ties broken toward class 0 (human), plus
/// softmax probabilities.
pub fn predict(logits: &[f64]) -> (Vec<u8>, Vec<[f64; 2]>) {
    assert_eq!(logits.len() % NUM_CLASSES, 0, "logits must be rows of 2");
    let mut labels = Vec::with_capacity(logits.len() / 2);
    let mut probs = Vec::with_capacity(logits.len() / 2);
    for row in logits.chunks(NUM_CLASSES) {
        labels.push(u8::from(row[1] > row[0]));
        let m = row[0].max(row[1]);
        let e0 = (row[0] - m).exp();
        let e1 = (row[1] - m).exp();
        let z = e0 + e1;
        probs.push([e0 / z, e1 / z]);
    }
    (labels, probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (ParamStore, HeadParams, Seeder) {
        let mut store = ParamStore::new();
        let seeder = Seeder::new(42);
        let head = init_head(4, &mut store, &seeder);
        (store, head, seeder)
    }

    fn forward_values(
        store: &ParamStore,
        head: &HeadParams,
        pooled: &[f64],
        rows: usize,
        training: bool,
        rng: &mut StreamRng,
    ) -> Vec<f64> {
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let p = tape.constant(pooled.to_vec(), vec![rows, 4]);
        let logits = head_forward(head, &mut tape, &binding, p, training, rng).unwrap();
        tape.values(logits).to_vec()
    }

    #[test]
    fn eval_mode_is_deterministic_and_matches_itself() {
        let (store, head, seeder) = setup();
        let pooled = [0.4, -0.2, 1.0, 0.3];
        let mut rng = seeder.stream("head");
        let a = forward_values(&store, &head, &pooled, 1, false, &mut rng);
        let b = forward_values(&store, &head, &pooled, 1, false, &mut rng);
        assert_eq!(a, b);
    }

    #[test]
    fn training_with_zero_rates_is_bit_identical_to_eval() {
        let (store, mut head, seeder) = setup();
        head.dropout_rates = [0.0; 5];
        let pooled = [0.4, -0.2, 1.0, 0.3, -1.1, 0.8, 0.05, -0.6];
        let mut rng = seeder.stream("head");
        let train = forward_values(&store, &head, &pooled, 2, true, &mut rng);
        let eval = forward_values(&store, &head, &pooled, 2, false, &mut rng);
        assert_eq!(train, eval);
    }

    #[test]
    fn zeroed_network_passes_classifier_bias_through() {
        let (mut store, head, seeder) = setup();
        for id in head.param_ids() {
            let n = store.tensor(id).numel();
            store.set_values(id, vec![0.0; n]);
        }
        store.set_values(head.classifier_bias, vec![0.3, -0.3]);
        // Restore the norm gain so the block stays well-defined (zero gain
        // would zero the GELU input anyway; either way only the bias shows).
        let mut rng = seeder.stream("head");
        let logits = forward_values(&store, &head, &[0.7, -0.1, 2.0, 0.9], 1, false, &mut rng);
        assert_eq!(logits, vec![0.3, -0.3]);
    }

    #[test]
    fn training_logits_average_is_unbiased_at_scale() {
        // With many draws, the mean multi-sample mask approaches 1, so
        // training logits approach the eval logits.
        let (store, head, seeder) = setup();
        let pooled = [0.4, -0.2, 1.0, 0.3];
        let eval = forward_values(&store, &head, &pooled, 1, false, &mut seeder.stream("e"));
        let mut rng = seeder.stream("head-avg");
        let mut sums = [0.0; 2];
        let reps = 4000;
        for _ in 0..reps {
            let t = forward_values(&store, &head, &pooled, 1, true, &mut rng);
            sums[0] += t[0];
            sums[1] += t[1];
        }
        for (s, e) in sums.iter().zip(&eval) {
            let mean = s / reps as f64;
            assert!(
                (mean - e).abs() < 0.05,
                "training mean {mean} too far from eval {e}"
            );
        }
    }

    #[test]
    fn predict_follows_argmax_and_tie_rule() {
        let (labels, probs) = predict(&[0.3, -0.3, 0.0, 0.0, -1.0, 1.0]);
        assert_eq!(labels, vec![0, 0, 1]);
        assert!((probs[2][1] - 0.8807970779778823).abs() < 1e-9);
    }

    #[test]
    fn predict_is_shift_invariant() {
        let (a, _) = predict(&[0.2, 1.7]);
        let (b, _) = predict(&[0.2 + 100.0, 1.7 + 100.0]);
        assert_eq!(a, b);
    }
}
