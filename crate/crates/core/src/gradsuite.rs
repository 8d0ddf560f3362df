//! The verification suite behind the `gradcheck` command: every recorded
//! operation, each pooling pipeline, the head, the focal loss, and a full
//! model are checked against central finite differences on small random
//! inputs in [-2, 2] with h = 1e-5.

use crate::config::RunConfig;
use crate::data::Batch;
use crate::encoder::{encode, init_encoder, mask_leaf};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::head::{head_forward, init_head};
use crate::loss::{focal_loss, FocalConfig};
use crate::params::ParamStore;
use crate::pooling::{
    attention_pool, gated_fusion, init_pooling, pool, weighted_layer_combine, PoolingKind,
};
use crate::rng::{Seeder, StreamRng};
use crate::tape::{Tape, TensorRef};
use crate::tensor::Tensor;
use rand::Rng;

pub const DEFAULT_TOL: f64 = 1e-4;
pub const DEFAULT_H: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Default)]
pub struct SuiteReport {
    pub checks: Vec<CheckOutcome>,
}

impl SuiteReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

fn rand_values(n: usize, rng: &mut StreamRng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
}

fn rand_tensor(shape: Vec<usize>, rng: &mut StreamRng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(rand_values(n, rng), shape).with_grad()
}

/// Reduces any tensor to a scalar with a fixed random weighting, so the
/// gradient being checked is not a degenerate constant.
fn weighted_sum(tape: &mut Tape, t: TensorRef, seed: u64) -> TensorRef {
    let n = tape.tensor(t).numel();
    let mut rng = Seeder::new(seed).stream("gradsuite/readout");
    let w = tape.constant(rand_values(n, &mut rng), tape.shape(t).to_vec());
    let prod = tape.mul(t, w);
    tape.sum_all(prod)
}

/// Runs the whole suite. `inject_fault` adds one deliberately corrupted
/// backward rule that must FAIL; it proves the harness can detect a wrong
/// gradient.
pub fn run_suite(inject_fault: bool) -> Result<SuiteReport> {
    let mut report = SuiteReport::default();
    let mut rng = Seeder::new(20260811).stream("gradsuite/inputs");

    let mut check = |report: &mut SuiteReport,
                     name: &str,
                     tol: f64,
                     params: &[Tensor],
                     f: &dyn crate::gradcheck::LossFn|
     -> Result<()> {
        let r: GradCheckReport = grad_check(f, params, DEFAULT_H, tol)?;
        report.checks.push(CheckOutcome {
            name: name.to_string(),
            max_rel_err: r.max_rel_err,
            tol,
            pass: r.pass,
        });
        Ok(())
    };

    // ── individual operations ───────────────────────────────────────────
    {
        let a = rand_tensor(vec![3, 4], &mut rng);
        let b = rand_tensor(vec![4, 2], &mut rng);
        check(
            &mut report,
            "op/matmul",
            1e-6,
            &[a, b],
            &|tape: &mut Tape, p: &[TensorRef]| {
                let c = tape.matmul(p[0], p[1])?;
                Ok(tape.sum_all(c))
            },
        )?;
    }
    {
        let a = rand_tensor(vec![2, 3, 4], &mut rng);
        let b = rand_tensor(vec![2, 4, 2], &mut rng);
        check(
            &mut report,
            "op/bmm",
            DEFAULT_TOL,
            &[a, b],
            &|tape: &mut Tape, p: &[TensorRef]| {
                let c = tape.bmm(p[0], p[1])?;
                Ok(weighted_sum(tape, c, 1))
            },
        )?;
    }
    {
        let a = rand_tensor(vec![6], &mut rng);
        let b = rand_tensor(vec![6], &mut rng);
        check(
            &mut report,
            "op/add",
            DEFAULT_TOL,
            &[a.clone(), b.clone()],
            &|tape: &mut Tape, p: &[TensorRef]| {
                let c = tape.add(p[0], p[1]);
                Ok(weighted_sum(tape, c, 2))
            },
        )?;
        check(
            &mut report,
            "op/sub",
            DEFAULT_TOL,
            &[a.clone(), b.clone()],
            &|tape: &mut Tape, p: &[TensorRef]| {
                let c = tape.sub(p[0], p[1]);
                Ok(weighted_sum(tape, c, 3))
            },
        )?;
        check(
            &mut report,
            "op/mul",
            DEFAULT_TOL,
            &[a, b],
            &|tape: &mut Tape, p: &[TensorRef]| {
                let c = tape.mul(p[0], p[1]);
                Ok(weighted_sum(tape, c, 4))
            },
        )?;
    }
    {
        let a = rand_tensor(vec![5], &mut rng);
        check(
            &mut report,
            "op/affine",
            DEFAULT_TOL,
            std::slice::from_ref(&a),
            &|tape: &mut Tape, p: &[TensorRef]| {
                let c = tape.affine(p[0], -1.7, 0.3);
                Ok(weighted_sum(tape, c, 5))
            },
        )?;
        check(
            &mut report,
            "op/gelu",
            DEFAULT_TOL,
            std::slice::from_ref(&a),
            &|tape: &mut Tape, p: &[TensorRef]| {
                let c = tape.gelu(p[0]);
                Ok(weighted_sum(tape, c, 6))
            },
        )?;
        check(
            &mut report,
            "op/sigmoid",
            DEFAULT_TOL,
            std::slice::from_ref(&a),
            &|tape: &mut Tape, p: &[TensorRef]| {
                let c = tape.sigmoid(p[0]);
                Ok(weighted_sum(tape, c, 7))
            },
        )?;
        check(
            &mut report,
            "op/exp",
            DEFAULT_TOL,
            std::slice::from_ref(&a),
            &|tape: &mut Tape, p: &[TensorRef]| {
                let c = tape.exp(p[0]);
                Ok(weighted_sum(tape, c, 8))
            },
        )?;
        check(
            &mut report,
            "op/sum_mean",
            DEFAULT_TOL,
            &[a],
            &|tape: &mut Tape, p: &[TensorRef]| {
                let s = tape.sum_all(p[0]);
                let m = tape.mean_all(p[0]);
                Ok(tape.add(s, m))
            },
        )?;
    }
    {
        // pow_const needs non-negative inputs; shift into (0.5, 4.5).
        let base = Tensor::new(
            rand_values(6, &mut rng)
                .iter()
                .map(|x| x.abs() + 0.5)
                .collect(),
            vec![6],
        )
        .with_grad();
        check(
            &mut report,
            "op/pow_const",
            DEFAULT_TOL,
            &[base],
            &|tape: &mut Tape, p: &[TensorRef]| {
                let c = tape.pow_const(p[0], 2.7);
                Ok(weighted_sum(tape, c, 9))
            },
        )?;
    }
    {
        let a = rand_tensor(vec![2, 5], &mut rng);
        check(
            &mut report,
            "op/softmax",
            1e-5,
            std::slice::from_ref(&a),
            &|tape: &mut Tape, p: &[TensorRef]| {
                let c = tape.softmax(p[0], 1);
                Ok(weighted_sum(tape, c, 10))
            },
        )?;
        check(
            &mut report,
            "op/log_softmax",
            1e-5,
            &[a],
            &|tape: &mut Tape, p: &[TensorRef]| {
                let c = tape.log_softmax(p[0], 1);
                Ok(weighted_sum(tape, c, 11))
            },
        )?;
    }
    {
        let x = rand_tensor(vec![2, 8], &mut rng);
        let gamma = rand_tensor(vec![8], &mut rng);
        let beta = rand_tensor(vec![8], &mut rng);
        check(
            &mut report,
            "op/layer_norm",
            1e-5,
            &[x, gamma, beta],
            &|tape: &mut Tape, p: &[TensorRef]| {
                let c = tape.layer_norm(p[0], p[1], p[2], 1e-5)?;
                Ok(weighted_sum(tape, c, 12))
            },
        )?;
    }
    {
        let h = rand_tensor(vec![2, 3, 4], &mut rng);
        check(
            &mut report,
            "op/masked_mean",
            DEFAULT_TOL,
            &[h],
            &|tape: &mut Tape, p: &[TensorRef]| {
                let mask = tape.constant(vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0], vec![2, 3]);
                let c = tape.masked_mean(p[0], mask)?;
                Ok(weighted_sum(tape, c, 13))
            },
        )?;
    }
    {
        let scores = rand_tensor(vec![2, 2, 3], &mut rng);
        check(
            &mut report,
            "op/mask_fill_softmax",
            DEFAULT_TOL,
            &[scores],
            &|tape: &mut Tape, p: &[TensorRef]| {
                let mask = tape.constant(vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0], vec![2, 3]);
                let filled = tape.mask_fill_neg_inf(p[0], mask)?;
                let attn = tape.softmax(filled, 2);
                Ok(weighted_sum(tape, attn, 14))
            },
        )?;
    }
    {
        let a = rand_tensor(vec![2, 3, 4], &mut rng);
        check(
            &mut report,
            "op/transpose_reshape",
            DEFAULT_TOL,
            &[a],
            &|tape: &mut Tape, p: &[TensorRef]| {
                let t = tape.transpose_last2(p[0]);
                let r = tape.reshape(t, vec![6, 4]);
                Ok(weighted_sum(tape, r, 15))
            },
        )?;
    }
    {
        let a = rand_tensor(vec![2, 3, 8], &mut rng);
        check(
            &mut report,
            "op/split_merge_heads",
            DEFAULT_TOL,
            &[a],
            &|tape: &mut Tape, p: &[TensorRef]| {
                let s = tape.split_heads(p[0], 4)?;
                let scaled = tape.affine(s, 1.3, 0.0);
                let m = tape.merge_heads(scaled, 4)?;
                Ok(weighted_sum(tape, m, 16))
            },
        )?;
    }
    {
        let table = rand_tensor(vec![5, 3], &mut rng);
        check(
            &mut report,
            "op/embedding",
            DEFAULT_TOL,
            &[table],
            &|tape: &mut Tape, p: &[TensorRef]| {
                let rows = tape.embedding(p[0], &[0, 3, 3, 1])?;
                Ok(weighted_sum(tape, rows, 17))
            },
        )?;
    }
    {
        let x = rand_tensor(vec![3, 4], &mut rng);
        let b = rand_tensor(vec![4], &mut rng);
        check(
            &mut report,
            "op/add_bias",
            DEFAULT_TOL,
            &[x, b],
            &|tape: &mut Tape, p: &[TensorRef]| {
                let c = tape.add_bias(p[0], p[1])?;
                Ok(weighted_sum(tape, c, 18))
            },
        )?;
    }
    {
        let a = rand_tensor(vec![2, 3], &mut rng);
        let b = rand_tensor(vec![2, 2], &mut rng);
        check(
            &mut report,
            "op/concat_slice",
            DEFAULT_TOL,
            &[a, b],
            &|tape: &mut Tape, p: &[TensorRef]| {
                let cat = tape.concat_last(&[p[0], p[1]])?;
                let left = tape.slice_last(cat, 0, 3)?;
                let right = tape.slice_last(cat, 3, 2)?;
                let ls = weighted_sum(tape, left, 19);
                let rs = weighted_sum(tape, right, 20);
                Ok(tape.add(ls, rs))
            },
        )?;
    }
    {
        let a = rand_tensor(vec![2, 3], &mut rng);
        let b = rand_tensor(vec![2, 3], &mut rng);
        let w = rand_tensor(vec![2], &mut rng);
        check(
            &mut report,
            "op/linear_combination",
            DEFAULT_TOL,
            &[a, b, w],
            &|tape: &mut Tape, p: &[TensorRef]| {
                let c = tape.linear_combination(&[p[0], p[1]], p[2])?;
                Ok(weighted_sum(tape, c, 21))
            },
        )?;
    }
    {
        let a = rand_tensor(vec![3, 2], &mut rng);
        check(
            &mut report,
            "op/gather_index",
            DEFAULT_TOL,
            &[a],
            &|tape: &mut Tape, p: &[TensorRef]| {
                let g = tape.gather_index(p[0], &[1, 0, 1])?;
                Ok(weighted_sum(tape, g, 22))
            },
        )?;
    }
    {
        // Dropout under gradient check: masks are resampled per evaluation,
        // so the check runs with a fixed pre-drawn mask (training behavior
        // with the stochastic part frozen).
        let a = rand_tensor(vec![8], &mut rng);
        let mask: Vec<f64> = (0..8).map(|i| if i % 3 == 0 { 0.0 } else { 2.0 }).collect();
        let mask_clone = mask.clone();
        check(
            &mut report,
            "op/dropout_mask",
            DEFAULT_TOL,
            &[a],
            &move |tape: &mut Tape, p: &[TensorRef]| {
                let c = tape.apply_scale_mask(p[0], mask_clone.clone());
                Ok(weighted_sum(tape, c, 23))
            },
        )?;
    }

    // ── pooling pipelines, head, loss, encoder, full model ──────────────
    pipeline_checks(&mut report, &mut check)?;

    if inject_fault {
        let a = rand_tensor(vec![4], &mut rng);
        check(
            &mut report,
            "fault/scaled_backward",
            DEFAULT_TOL,
            &[a],
            &|tape: &mut Tape, p: &[TensorRef]| {
                let skewed = tape.scaled_grad_identity(p[0], 1.5);
                let sq = tape.mul(skewed, skewed);
                Ok(tape.sum_all(sq))
            },
        )?;
    }

    Ok(report)
}

type CheckFn<'a> = dyn FnMut(&mut SuiteReport, &str, f64, &[Tensor], &dyn crate::gradcheck::LossFn) -> Result<()>
    + 'a;

fn pipeline_checks(report: &mut SuiteReport, check: &mut CheckFn) -> Result<()> {
    let mut rng = Seeder::new(99).stream("gradsuite/pipelines");

    // Hand-built layer states: 3 "layers" of a [2, 3, 4] batch.
    let states_t: Vec<Tensor> = (0..3)
        .map(|_| rand_tensor(vec![2, 3, 4], &mut rng))
        .collect();
    let mask_values = vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0];

    {
        let mv = mask_values.clone();
        check(
            report,
            "pipeline/mean",
            DEFAULT_TOL,
            &states_t,
            &move |tape: &mut Tape, p: &[TensorRef]| {
                let mask = tape.constant(mv.clone(), vec![2, 3]);
                let pooled = tape.masked_mean(p[p.len() - 1], mask)?;
                Ok(weighted_sum(tape, pooled, 30))
            },
        )?;
    }
    {
        let mut params = states_t.clone();
        params.push(rand_tensor(vec![3], &mut rng)); // layer weights
        let mv = mask_values.clone();
        check(
            report,
            "pipeline/wlp_mean",
            DEFAULT_TOL,
            &params,
            &move |tape: &mut Tape, p: &[TensorRef]| {
                let mask = tape.constant(mv.clone(), vec![2, 3]);
                let combined = weighted_layer_combine(tape, &p[..3], p[3])?;
                let pooled = tape.masked_mean(combined, mask)?;
                Ok(weighted_sum(tape, pooled, 31))
            },
        )?;
    }
    {
        let mut params = states_t.clone();
        params.push(rand_tensor(vec![3], &mut rng)); // layer weights
        params.push(rand_tensor(vec![2, 4], &mut rng)); // queries
        params.push(rand_tensor(vec![8, 4], &mut rng)); // projection
        let mv = mask_values.clone();
        check(
            report,
            "pipeline/wlp_attention",
            DEFAULT_TOL,
            &params,
            &move |tape: &mut Tape, p: &[TensorRef]| {
                let mask = tape.constant(mv.clone(), vec![2, 3]);
                let combined = weighted_layer_combine(tape, &p[..3], p[3])?;
                let pooled = attention_pool(tape, combined, mask, p[4], p[5])?;
                Ok(weighted_sum(tape, pooled, 32))
            },
        )?;
    }
    {
        let mut params = states_t.clone();
        params.push(rand_tensor(vec![3], &mut rng)); // layer weights
        params.push(rand_tensor(vec![2, 4], &mut rng)); // queries
        params.push(rand_tensor(vec![8, 4], &mut rng)); // projection
        params.push(rand_tensor(vec![8, 8], &mut rng)); // gate weights
        params.push(rand_tensor(vec![8], &mut rng)); // gate bias
        let mv = mask_values.clone();
        check(
            report,
            "pipeline/wlp_attention_gated",
            DEFAULT_TOL,
            &params,
            &move |tape: &mut Tape, p: &[TensorRef]| {
                let mask = tape.constant(mv.clone(), vec![2, 3]);
                let combined = weighted_layer_combine(tape, &p[..3], p[3])?;
                let mean_branch = tape.masked_mean(combined, mask)?;
                let attn_branch = attention_pool(tape, combined, mask, p[4], p[5])?;
                let fused = gated_fusion(tape, &[mean_branch, attn_branch], p[6], p[7])?;
                Ok(weighted_sum(tape, fused, 33))
            },
        )?;
    }

    // Head (dense + norm + GELU + classifier, evaluation path).
    {
        let pooled = rand_tensor(vec![2, 4], &mut rng);
        let dense = rand_tensor(vec![4, 4], &mut rng);
        let dense_b = rand_tensor(vec![4], &mut rng);
        let gain = rand_tensor(vec![4], &mut rng);
        let shift = rand_tensor(vec![4], &mut rng);
        let cls = rand_tensor(vec![4, 2], &mut rng);
        let cls_b = rand_tensor(vec![2], &mut rng);
        check(
            report,
            "head/dense_norm_gelu_classifier",
            DEFAULT_TOL,
            &[pooled, dense, dense_b, gain, shift, cls, cls_b],
            &|tape: &mut Tape, p: &[TensorRef]| {
                let d = tape.matmul(p[0], p[1])?;
                let d = tape.add_bias(d, p[2])?;
                let n = tape.layer_norm(d, p[3], p[4], 1e-5)?;
                let a = tape.gelu(n);
                let logits = tape.matmul(a, p[5])?;
                let logits = tape.add_bias(logits, p[6])?;
                Ok(weighted_sum(tape, logits, 34))
            },
        )?;
    }

    // Focal loss with respect to logits.
    {
        let logits = rand_tensor(vec![4, 2], &mut rng);
        check(
            report,
            "loss/focal",
            1e-5,
            &[logits],
            &|tape: &mut Tape, p: &[TensorRef]| {
                focal_loss(
                    tape,
                    p[0],
                    &[0, 1, 1, 0],
                    &FocalConfig {
                        gamma: 2.0,
                        alpha: 0.5,
                    },
                )
            },
        )?;
    }
    {
        let logits = rand_tensor(vec![3, 2], &mut rng);
        check(
            report,
            "loss/focal_gamma0",
            1e-5,
            &[logits],
            &|tape: &mut Tape, p: &[TensorRef]| {
                focal_loss(
                    tape,
                    p[0],
                    &[1, 0, 1],
                    &FocalConfig {
                        gamma: 0.0,
                        alpha: 0.5,
                    },
                )
            },
        )?;
    }

    // A 2-layer encoder, every parameter checked.
    encoder_check(report, check, "encoder/2layer", false)?;
    // The full model: encoder, gated pooling (the superset pipeline), head,
    // focal loss; every parameter checked.
    encoder_check(report, check, "model/full", true)?;

    Ok(())
}

fn encoder_check(
    report: &mut SuiteReport,
    check: &mut CheckFn,
    name: &str,
    full_model: bool,
) -> Result<()> {
    let mut run = RunConfig::default();
    run.encoder.num_layers = 2;
    run.encoder.hidden = 6;
    run.encoder.heads = 2;
    run.encoder.ffn_dim = 10;
    run.encoder.vocab_size = 9;
    run.encoder.max_positions = 5;
    run.encoder.dropout_rate = 0.0;
    run.train.pooling = PoolingKind::WlpAttentionGated;
    run.attention_heads = 2;
    run.train.seed = 17;

    let seeder = Seeder::new(run.train.seed);
    let mut store = ParamStore::new();
    let encoder_params = init_encoder(&run.encoder, &mut store, &seeder)?;
    let pooling_params = init_pooling(
        run.train.pooling,
        run.encoder.num_layers,
        run.encoder.hidden,
        run.attention_heads,
        &mut store,
        &seeder,
    )?;
    let head_params = init_head(run.encoder.hidden, &mut store, &seeder);

    let batch = Batch {
        token_ids: vec![1, 2, 3, 0, 4, 5, 6, 7],
        mask: vec![1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0],
        labels: vec![0, 1],
        batch: 2,
        seq: 4,
    };

    // The leaves mirror the store's parameters in allocation order, so the
    // closure can rebuild a binding-like lookup from the slice.
    let param_tensors: Vec<Tensor> = store.ids().map(|id| store.tensor(id).clone()).collect();
    let focal = FocalConfig {
        gamma: 2.0,
        alpha: 0.5,
    };

    check(
        report,
        name,
        DEFAULT_TOL,
        &param_tensors,
        &move |tape: &mut Tape, p: &[TensorRef]| {
            let binding = crate::params::Binding::from_refs(p.to_vec());
            let mask = mask_leaf(tape, &batch.mask, batch.batch, batch.seq);
            let mut rng = Seeder::new(0).stream("unused");
            let states = encode(
                &encoder_params,
                tape,
                &binding,
                &batch.token_ids,
                batch.batch,
                mask,
                false,
                &mut rng,
            )?;
            if full_model {
                let pooled = pool(&pooling_params, tape, &binding, &states, mask)?;
                let logits = head_forward(&head_params, tape, &binding, pooled, false, &mut rng)?;
                focal_loss(tape, logits, &batch.labels, &focal)
            } else {
                let pooled = tape.masked_mean(states.last(), mask)?;
                Ok(weighted_sum(tape, pooled, 40))
            }
        },
    )?;
    Ok(())
}

/// One line per check: PASS/FAIL, name, max relative error, tolerance.
pub fn format_report(report: &SuiteReport) -> String {
    let mut out = String::new();
    for c in &report.checks {
        out.push_str(&format!(
            "{} {:<32} max_rel_err={:.3e} tol={:.0e}\n",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.max_rel_err,
            c.tol
        ));
    }
    let failed = report.checks.iter().filter(|c| !c.pass).count();
    out.push_str(&format!(
        "{} checks, {} failed\n",
        report.checks.len(),
        failed
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_passes_on_a_fresh_checkout() {
        let report = run_suite(false).unwrap();
        assert!(!report.checks.is_empty());
        for c in &report.checks {
            assert!(
                c.pass,
                "{} failed with max_rel_err {}",
                c.name, c.max_rel_err
            );
        }
    }

    #[test]
    fn injected_fault_is_detected() {
        let report = run_suite(true).unwrap();
        assert!(!report.all_pass());
        let fault = report
            .checks
            .iter()
            .find(|c| c.name.starts_with("fault/"))
            .unwrap();
        assert!(
            !fault.pass,
            "the corrupted backward rule must fail its check"
        );
        // Every genuine check still passes.
        for c in report
            .checks
            .iter()
            .filter(|c| !c.name.starts_with("fault/"))
        {
            assert!(c.pass, "{} failed", c.name);
        }
    }
}
