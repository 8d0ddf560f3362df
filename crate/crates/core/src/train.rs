//! Model assembly and the full training recipe: LLRD groups, cosine warmup,
//! gradient accumulation, multi-sample dropout, focal loss. Also evaluation,
//! the four-way pooling comparison, and the length-bias probe.

use crate::config::RunConfig;
use crate::data::{make_batches, Batch, LengthBand, Sample, Vocab};
use crate::encoder::{encode, init_encoder, mask_leaf, EncoderParams};
use crate::error::Result;
use crate::head::{head_forward, init_head, predict, HeadParams};
use crate::loss::{focal_loss, FocalConfig};
use crate::metrics::{compute_metrics, Metrics};
use crate::optim::{accumulate_and_step, build_llrd_groups, lr_at, AdamState};
use crate::params::{Binding, ParamStore};
use crate::pooling::{init_pooling, parameter_count, pool, PoolingKind, PoolingParams};
use crate::rng::{Seeder, StreamRng};
use crate::tape::{Tape, TensorRef};
use serde::{Deserialize, Serialize};
use std::time::Instant;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Encoder, pooling pipeline and head over one shared parameter store.
pub struct Model {
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub pooling: PoolingParams,
    pub head: HeadParams,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamCounts {
    pub total: usize,
    pub encoder: usize,
    pub pooling: usize,
    pub head: usize,
}

impl Model {
    pub fn new(run: &RunConfig) -> Result<Model> {
        run.validate()?;
        let seeder = Seeder::new(run.train.seed);
        let mut store = ParamStore::new();
        let encoder = init_encoder(&run.encoder, &mut store, &seeder)?;
        let pooling = init_pooling(
            run.train.pooling,
            run.encoder.num_layers,
            run.encoder.hidden,
            run.attention_heads,
            &mut store,
            &seeder,
        )?;
        let head = init_head(run.encoder.hidden, &mut store, &seeder);
        Ok(Model {
            store,
            encoder,
            pooling,
            head,
        })
    }

    pub fn parameter_counts(&self) -> ParamCounts {
        let count = |ids: &[crate::params::ParamId]| -> usize {
            ids.iter().map(|id| self.store.tensor(*id).numel()).sum()
        };
        let encoder = count(&self.encoder.all_ids());
        let pooling = count(&self.pooling.param_ids());
        let head = count(&self.head.param_ids());
        ParamCounts {
            total: self.store.scalar_count(),
            encoder,
            pooling,
            head,
        }
    }

    /// Forward pass to logits for one batch on the given tape.
    pub fn forward_logits(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        batch: &Batch,
        training: bool,
        rng: &mut StreamRng,
    ) -> Result<TensorRef> {
        let mask = mask_leaf(tape, &batch.mask, batch.batch, batch.seq);
        let states = encode(
            &self.encoder,
            tape,
            binding,
            &batch.token_ids,
            batch.batch,
            mask,
            training,
            rng,
        )?;
        let pooled = pool(&self.pooling, tape, binding, &states, mask)?;
        head_forward(&self.head, tape, binding, pooled, training, rng)
    }

    /// Evaluation-mode logits (flat `[B, 2]` values).
    pub fn eval_logits(&self, batch: &Batch) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let binding = self.store.bind(&mut tape);
        // Never sampled: evaluation mode applies no dropout.
        let mut rng = Seeder::new(0).stream("eval");
        let logits = self.forward_logits(&mut tape, &binding, batch, false, &mut rng)?;
        Ok(tape.values(logits).to_vec())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunReport {
    pub schema_version: u32,
    pub pooling: String,
    pub seed: u64,
    pub config: RunConfig,
    pub parameter_counts: ParamCounts,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub total_steps: usize,
    pub metrics: Metrics,
    /// Wall time is observational; every other field is seed-deterministic.
    pub wall_time_secs: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub vocab: Vocab,
    pub report: RunReport,
}

/// Runs the full recipe on `train_samples`; final metrics come from
/// `eval_samples` when given, otherwise from the training set.
pub fn train_model(
    run: &RunConfig,
    train_samples: &[Sample],
    eval_samples: Option<&[Sample]>,
) -> Result<TrainOutcome> {
    run.validate()?;
    let started = Instant::now();
    let seeder = Seeder::new(run.train.seed);
    let vocab = crate::data::build_vocab(train_samples, run.encoder.vocab_size)?;
    let mut model = Model::new(run)?;
    let groups = build_llrd_groups(
        &model.encoder,
        &model.pooling,
        &model.head,
        &model.store,
        &run.train,
    );
    let mut adam = AdamState::new(&model.store);

    // The schedule is exact: the step budget is fixed before training.
    let steps_per_epoch = train_samples.len().div_ceil(run.train.effective_batch());
    let total_steps = steps_per_epoch * run.train.epochs;
    let focal = FocalConfig {
        gamma: run.train.focal_gamma,
        alpha: run.train.focal_alpha,
    };

    let mut dropout_rng = seeder.stream("dropout");
    let mut epoch_losses = Vec::with_capacity(run.train.epochs);
    let mut step = 0usize;
    for epoch in 0..run.train.epochs {
        let mut shuffle_rng = seeder.stream(&format!("data/shuffle/epoch{epoch}"));
        let batches = make_batches(
            train_samples,
            &vocab,
            run.train.micro_batch,
            run.train.max_seq_len,
            Some(&mut shuffle_rng),
        )?;
        let mut epoch_loss = 0.0;
        let mut chunks = 0usize;
        for chunk in batches.chunks(run.train.grad_accum) {
            let mult = lr_at(step, total_steps, run.train.warmup_ratio)?;
            let loss = accumulate_and_step(
                &mut model.store,
                &groups,
                &mut adam,
                &run.train.adam,
                run.train.base_lr,
                mult,
                chunk.len(),
                |k, tape, binding| {
                    let logits = model_forward_for(
                        &model.encoder,
                        &model.pooling,
                        &model.head,
                        tape,
                        binding,
                        &chunk[k],
                        true,
                        &mut dropout_rng,
                    )?;
                    focal_loss(tape, logits, &chunk[k].labels, &focal)
                },
            )?;
            epoch_loss += loss;
            chunks += 1;
            step += 1;
        }
        epoch_losses.push(if chunks > 0 {
            epoch_loss / chunks as f64
        } else {
            0.0
        });
    }

    let metrics = match eval_samples {
        Some(samples) => evaluate_model(
            &model,
            &vocab,
            samples,
            run.train.max_seq_len,
            run.train.micro_batch,
        )?,
        None => evaluate_model(
            &model,
            &vocab,
            train_samples,
            run.train.max_seq_len,
            run.train.micro_batch,
        )?,
    };

    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        pooling: run.train.pooling.as_str().to_string(),
        seed: run.train.seed,
        config: run.clone(),
        parameter_counts: model.parameter_counts(),
        epoch_losses,
        total_steps,
        metrics,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        model,
        vocab,
        report,
    })
}

/// `Model::forward_logits` without borrowing the whole model, so the closure
/// in the training loop can hold `&mut ParamStore` at the same time.
#[allow(clippy::too_many_arguments)]
fn model_forward_for(
    encoder: &EncoderParams,
    pooling: &PoolingParams,
    head: &HeadParams,
    tape: &mut Tape,
    binding: &Binding,
    batch: &Batch,
    training: bool,
    rng: &mut StreamRng,
) -> Result<TensorRef> {
    let mask = mask_leaf(tape, &batch.mask, batch.batch, batch.seq);
    let states = encode(
        encoder,
        tape,
        binding,
        &batch.token_ids,
        batch.batch,
        mask,
        training,
        rng,
    )?;
    let pooled = pool(pooling, tape, binding, &states, mask)?;
    head_forward(head, tape, binding, pooled, training, rng)
}

/// Predictions for a whole sample set in evaluation mode.
pub fn predict_samples(
    model: &Model,
    vocab: &Vocab,
    samples: &[Sample],
    max_seq_len: usize,
    micro_batch: usize,
) -> Result<Vec<u8>> {
    let batches = make_batches(samples, vocab, micro_batch, max_seq_len, None)?;
    let mut predictions = Vec::with_capacity(samples.len());
    for batch in &batches {
        let logits = model.eval_logits(batch)?;
        let (labels, _) = predict(&logits);
        predictions.extend(labels);
    }
    Ok(predictions)
}

pub fn evaluate_model(
    model: &Model,
    vocab: &Vocab,
    samples: &[Sample],
    max_seq_len: usize,
    micro_batch: usize,
) -> Result<Metrics> {
    let predictions = predict_samples(model, vocab, samples, max_seq_len, micro_batch)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    compute_metrics(&predictions, &labels)
}

// ── pooling comparison ──────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CompareRow {
    pub pooling: String,
    pub f1: f64,
    pub accuracy: f64,
    pub pooling_params: usize,
    pub total_params: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CompareReport {
    pub schema_version: u32,
    pub seed: u64,
    pub rows: Vec<CompareRow>,
}

/// Trains all four pooling kinds on identical data and seed; rows come out
/// in fixed order (mean, wlp_mean, wlp_attention, wlp_attention_gated).
pub fn compare_poolings(
    run: &RunConfig,
    train_samples: &[Sample],
    eval_samples: &[Sample],
) -> Result<CompareReport> {
    let mut rows = Vec::with_capacity(PoolingKind::ALL.len());
    for kind in PoolingKind::ALL {
        let mut variant = run.clone();
        variant.train.pooling = kind;
        let outcome = train_model(&variant, train_samples, Some(eval_samples))?;
        rows.push(CompareRow {
            pooling: kind.as_str().to_string(),
            f1: outcome.report.metrics.f1,
            accuracy: outcome.report.metrics.accuracy,
            pooling_params: parameter_count(
                kind,
                run.encoder.num_layers,
                run.encoder.hidden,
                run.attention_heads,
            ),
            total_params: outcome.report.parameter_counts.total,
        });
    }
    Ok(CompareReport {
        schema_version: REPORT_SCHEMA_VERSION,
        seed: run.train.seed,
        rows,
    })
}

/// Renders the comparison as an aligned text table.
pub fn format_compare_table(report: &CompareReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<22} {:>8} {:>10} {:>16} {:>14}\n",
        "Pooling Strategy", "F1", "Accuracy", "Pooling Params", "Total Params"
    ));
    for row in &report.rows {
        out.push_str(&format!(
            "{:<22} {:>8.4} {:>10.4} {:>16} {:>14}\n",
            row.pooling, row.f1, row.accuracy, row.pooling_params, row.total_params
        ));
    }
    out
}

// ── overfit sanity ──────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct OverfitOutcome {
    pub steps_taken: usize,
    pub train_accuracy: f64,
    pub losses: Vec<f64>,
}

/// Trains on a small set until training accuracy reaches 1.0 or `max_steps`
/// optimizer steps have been spent. A correct implementation must be able to
/// memorize a handful of samples.
pub fn overfit(run: &RunConfig, samples: &[Sample], max_steps: usize) -> Result<OverfitOutcome> {
    overfit_with(run, samples, max_steps, true)
}

/// `overfit` with control over early stopping; training sanity checks use
/// `stop_early = false` to observe the full loss curve.
pub fn overfit_with(
    run: &RunConfig,
    samples: &[Sample],
    max_steps: usize,
    stop_early: bool,
) -> Result<OverfitOutcome> {
    run.validate()?;
    let seeder = Seeder::new(run.train.seed);
    let vocab = crate::data::build_vocab(samples, run.encoder.vocab_size)?;
    let mut model = Model::new(run)?;
    let groups = build_llrd_groups(
        &model.encoder,
        &model.pooling,
        &model.head,
        &model.store,
        &run.train,
    );
    let mut adam = AdamState::new(&model.store);
    let focal = FocalConfig {
        gamma: run.train.focal_gamma,
        alpha: run.train.focal_alpha,
    };
    let mut dropout_rng = seeder.stream("dropout");

    let batches = make_batches(
        samples,
        &vocab,
        run.train.micro_batch,
        run.train.max_seq_len,
        None,
    )?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let mut losses = Vec::new();
    let mut step = 0usize;
    let mut accuracy = 0.0;
    while step < max_steps {
        let chunk_start = (step * run.train.grad_accum) % batches.len();
        let chunk: Vec<Batch> = (0..run.train.grad_accum)
            .map(|k| batches[(chunk_start + k) % batches.len()].clone())
            .collect();
        let mult = lr_at(step, max_steps, run.train.warmup_ratio)?;
        let loss = accumulate_and_step(
            &mut model.store,
            &groups,
            &mut adam,
            &run.train.adam,
            run.train.base_lr,
            mult,
            chunk.len(),
            |k, tape, binding| {
                let logits = model_forward_for(
                    &model.encoder,
                    &model.pooling,
                    &model.head,
                    tape,
                    binding,
                    &chunk[k],
                    true,
                    &mut dropout_rng,
                )?;
                focal_loss(tape, logits, &chunk[k].labels, &focal)
            },
        )?;
        losses.push(loss);
        step += 1;

        let predictions = predict_samples(
            &model,
            &vocab,
            samples,
            run.train.max_seq_len,
            run.train.micro_batch,
        )?;
        let correct = predictions
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
        accuracy = correct as f64 / labels.len() as f64;
        if stop_early && accuracy == 1.0 {
            break;
        }
    }
    Ok(OverfitOutcome {
        steps_taken: step,
        train_accuracy: accuracy,
        losses,
    })
}

// ── length-bias probe ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LengthBiasReport {
    pub schema_version: u32,
    pub band_lo: usize,
    pub band_hi: Option<usize>,
    pub full: Metrics,
    pub banded: Metrics,
    /// Model F1 drop from full to banded evaluation.
    pub model_f1_delta: f64,
    pub baseline_full_f1: f64,
    pub baseline_banded_f1: f64,
    pub baseline_f1_delta: f64,
}

/// Model metrics on the full set vs the length-controlled subset, plus a
/// length-only logistic baseline for reference. The baseline is fit on the
/// full evaluation set itself (one weight and one bias over log word count;
/// it measures separability, not generalization).
pub fn probe_length_bias(
    model: &Model,
    vocab: &Vocab,
    samples: &[Sample],
    band: LengthBand,
    max_seq_len: usize,
    micro_batch: usize,
) -> Result<LengthBiasReport> {
    let full = evaluate_model(model, vocab, samples, max_seq_len, micro_batch)?;
    let banded_set = crate::data::length_controlled_eval_set(samples, band)?;
    let banded = evaluate_model(model, vocab, &banded_set, max_seq_len, micro_batch)?;

    let baseline = LengthBaseline::fit(samples);
    let baseline_full_f1 = baseline.f1_on(samples)?;
    let baseline_banded_f1 = baseline.f1_on(&banded_set)?;

    Ok(LengthBiasReport {
        schema_version: REPORT_SCHEMA_VERSION,
        band_lo: band.lo,
        band_hi: band.hi,
        full: full.clone(),
        banded: banded.clone(),
        model_f1_delta: full.f1 - banded.f1,
        baseline_full_f1,
        baseline_banded_f1,
        baseline_f1_delta: baseline_full_f1 - baseline_banded_f1,
    })
}

/// One-feature logistic classifier over standardized log word count,
/// fit by plain gradient descent (deterministic, no RNG).
#[derive(Debug, Clone)]
pub struct LengthBaseline {
    pub weight: f64,
    pub bias: f64,
    mean: f64,
    std: f64,
}

impl LengthBaseline {
    pub fn fit(samples: &[Sample]) -> Self {
        let features: Vec<f64> = samples
            .iter()
            .map(|s| (s.word_count.max(1) as f64).ln())
            .collect();
        let n = features.len() as f64;
        let mean = features.iter().sum::<f64>() / n;
        let var = features
            .iter()
            .map(|x| (x - mean) * (x - mean))
            .sum::<f64>()
            / n;
        let std = var.sqrt().max(1e-9);
        let xs: Vec<f64> = features.iter().map(|x| (x - mean) / std).collect();
        // Machine texts are the short ones, so the weight converges negative.
        let ys: Vec<f64> = samples.iter().map(|s| f64::from(s.label)).collect();

        let mut w = 0.0f64;
        let mut b = 0.0f64;
        let lr = 0.5;
        for _ in 0..500 {
            let mut gw = 0.0;
            let mut gb = 0.0;
            for (x, y) in xs.iter().zip(&ys) {
                let p = 1.0 / (1.0 + (-(w * x + b)).exp());
                gw += (p - y) * x;
                gb += p - y;
            }
            w -= lr * gw / n;
            b -= lr * gb / n;
        }
        LengthBaseline {
            weight: w,
            bias: b,
            mean,
            std,
        }
    }

    pub fn predict(&self, sample: &Sample) -> u8 {
        let x = ((sample.word_count.max(1) as f64).ln() - self.mean) / self.std;
        u8::from(self.weight * x + self.bias > 0.0)
    }

    pub fn f1_on(&self, samples: &[Sample]) -> Result<f64> {
        let predictions: Vec<u8> = samples.iter().map(|s| self.predict(s)).collect();
        let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
        Ok(compute_metrics(&predictions, &labels)?.f1)
    }
}

/// 80/10/10 split, stratified by class so both stay balanced; shuffling is
/// seed-deterministic.
pub fn split_corpus(
    samples: &[Sample],
    seeder: &Seeder,
) -> (Vec<Sample>, Vec<Sample>, Vec<Sample>) {
    use rand::Rng;
    let mut train = Vec::new();
    let mut dev = Vec::new();
    let mut test = Vec::new();
    for label in [0u8, 1u8] {
        let mut class: Vec<Sample> = samples
            .iter()
            .filter(|s| s.label == label)
            .cloned()
            .collect();
        let mut rng = seeder.stream(&format!("data/split/class{label}"));
        for i in (1..class.len()).rev() {
            let j = rng.random_range(0..=i);
            class.swap(i, j);
        }
        let n = class.len();
        let n_train = n * 8 / 10;
        let n_dev = n / 10;
        for (i, s) in class.into_iter().enumerate() {
            if i < n_train {
                train.push(s);
            } else if i < n_train + n_dev {
                dev.push(s);
            } else {
                test.push(s);
            }
        }
    }
    // Interleave classes deterministically rather than human-block-first.
    let shuffle = |set: &mut Vec<Sample>, label: &str| {
        use rand::Rng;
        let mut rng = seeder.stream(&format!("data/split/mix/{label}"));
        for i in (1..set.len()).rev() {
            let j = rng.random_range(0..=i);
            set.swap(i, j);
        }
    };
    shuffle(&mut train, "train");
    shuffle(&mut dev, "dev");
    shuffle(&mut test, "test");
    (train, dev, test)
}
