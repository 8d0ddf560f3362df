//! Property tests for the algebraic invariants: softmax normalization,
//! masked-mean padding invariance, gradient accumulation, batching and
//! serialization round trips, schedule continuity, metrics equivalence.

use mgtlab_core::data::{build_vocab, make_batches, read_jsonl, write_jsonl, Sample};
use mgtlab_core::head::predict;
use mgtlab_core::metrics::compute_metrics;
use mgtlab_core::optim::lr_at;
use mgtlab_core::rng::Seeder;
use mgtlab_core::Tape;
use proptest::prelude::*;

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in proptest::collection::vec(-1e3..1e3f64, 2..24)) {
        let mut tape = Tape::new();
        let n = values.len();
        let x = tape.constant(values, vec![n]);
        let s = tape.softmax(x, 0);
        let total: f64 = tape.values(s).iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12, "sum {total}");
        prop_assert!(tape.values(s).iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn masked_mean_ignores_appended_padding_bitwise(
        rows in proptest::collection::vec(-5.0..5.0f64, 6..30),
        pad in proptest::collection::vec(-100.0..100.0f64, 3),
    ) {
        let t = rows.len() / 3;
        let h = 3usize;
        let body = rows[..t * h].to_vec();

        let mut tape = Tape::new();
        let plain = tape.constant(body.clone(), vec![1, t, h]);
        let mask = tape.constant(vec![1.0; t], vec![1, t]);
        let a = tape.masked_mean(plain, mask).unwrap();

        let mut padded = body;
        padded.extend(pad);
        let wide = tape.constant(padded, vec![1, t + 1, h]);
        let mut mask_v = vec![1.0; t];
        mask_v.push(0.0);
        let wide_mask = tape.constant(mask_v, vec![1, t + 1]);
        let b = tape.masked_mean(wide, wide_mask).unwrap();

        prop_assert_eq!(tape.values(a), tape.values(b));
    }

    #[test]
    fn double_use_gradient_is_sum_of_single_uses(values in proptest::collection::vec(-2.0..2.0f64, 1..12)) {
        let n = values.len();
        // loss = sum(x) + sum(x) -> grad 2 everywhere.
        let mut tape = Tape::new();
        let x = tape.var(values.clone(), vec![n]);
        let a = tape.sum_all(x);
        let b = tape.sum_all(x);
        let loss = tape.add(a, b);
        tape.backward(loss).unwrap();
        prop_assert!(tape.grad(x).unwrap().iter().all(|g| *g == 2.0));
    }

    #[test]
    fn dropout_eval_is_bit_identical_identity(values in proptest::collection::vec(-10.0..10.0f64, 1..40)) {
        let mut rng = Seeder::new(1).stream("p");
        let mut tape = Tape::new();
        let n = values.len();
        let x = tape.var(values.clone(), vec![n]);
        let y = tape.dropout(x, 0.7, false, &mut rng).unwrap();
        prop_assert_eq!(tape.values(y), values.as_slice());
    }

    #[test]
    fn predict_is_invariant_to_logit_shifts(
        l0 in -20.0..20.0f64,
        l1 in -20.0..20.0f64,
        shift in -50.0..50.0f64,
    ) {
        prop_assume!((l0 - l1).abs() > 1e-9);
        let (a, _) = predict(&[l0, l1]);
        let (b, _) = predict(&[l0 + shift, l1 + shift]);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn metrics_match_independent_confusion_recount(
        pairs in proptest::collection::vec((0u8..2, 0u8..2), 1..1000),
    ) {
        let predictions: Vec<u8> = pairs.iter().map(|(p, _)| *p).collect();
        let labels: Vec<u8> = pairs.iter().map(|(_, l)| *l).collect();
        let m = compute_metrics(&predictions, &labels).unwrap();

        // Independent recount.
        let tp = pairs.iter().filter(|(p, l)| *p == 1 && *l == 1).count();
        let fp = pairs.iter().filter(|(p, l)| *p == 1 && *l == 0).count();
        let fneg = pairs.iter().filter(|(p, l)| *p == 0 && *l == 1).count();
        let tn = pairs.iter().filter(|(p, l)| *p == 0 && *l == 0).count();
        prop_assert_eq!((m.true_positive, m.false_positive, m.false_negative, m.true_negative), (tp, fp, fneg, tn));
        prop_assert_eq!(m.true_positive + m.false_positive + m.false_negative + m.true_negative, pairs.len());

        let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let recall = if tp + fneg > 0 { tp as f64 / (tp + fneg) as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        prop_assert_eq!(m.f1, f1);
        prop_assert_eq!(m.accuracy, (tp + tn) as f64 / pairs.len() as f64);
    }

    #[test]
    fn sample_round_trips_through_jsonl(
        id in "[a-z0-9]{1,12}",
        text in "[ -~а-яё]{0,120}",
        label in 0u8..2,
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.jsonl");
        let sample = Sample::new(id, text, label);
        write_jsonl(&path, std::slice::from_ref(&sample)).unwrap();
        let back = read_jsonl(&path).unwrap();
        prop_assert_eq!(back.len(), 1);
        prop_assert_eq!(&back[0], &sample);

        // Independent word count: transitions from whitespace to ink.
        let mut words = 0usize;
        let mut in_word = false;
        for c in back[0].text.chars() {
            if c.is_whitespace() {
                in_word = false;
            } else if !in_word {
                in_word = true;
                words += 1;
            }
        }
        prop_assert_eq!(back[0].word_count, words);
    }

    #[test]
    fn batches_never_have_empty_mask_rows(
        lens in proptest::collection::vec(0usize..40, 1..30),
        micro in 1usize..8,
        max_len in 4usize..24,
    ) {
        let samples: Vec<Sample> = lens
            .iter()
            .enumerate()
            .map(|(i, l)| Sample::new(format!("s{i}"), vec!["tok"; *l].join(" "), (i % 2) as u8))
            .collect();
        let vocab = build_vocab(&samples, 8).unwrap_or_else(|_| {
            // All-empty corpus: still exercisable with a tiny vocabulary.
            mgtlab_core::data::Vocab::from_words(vec!["<pad>".into(), "<unk>".into(), "tok".into()])
        });
        let batches = make_batches(&samples, &vocab, micro, max_len, None).unwrap();
        let mut seen = 0usize;
        for b in &batches {
            prop_assert!(b.seq <= max_len);
            let widest = b.mask.chunks(b.seq).map(|row| row.iter().filter(|m| **m == 1.0).count()).max().unwrap();
            prop_assert_eq!(widest, b.seq, "batch must be exactly as wide as its longest member");
            for (r, row) in b.mask.chunks(b.seq).enumerate() {
                let ones = row.iter().filter(|m| **m == 1.0).count();
                prop_assert!(ones >= 1, "empty mask row");
                // Left-aligned: all ones precede all zeros.
                let first_zero = row.iter().position(|m| *m == 0.0).unwrap_or(b.seq);
                prop_assert_eq!(ones, first_zero);
                // Tokenization maps empty text to one UNK, so every row has
                // min(max(len,1), max_len) real tokens.
                let expected = lens[seen + r].max(1).min(max_len);
                prop_assert_eq!(ones, expected);
            }
            seen += b.labels.len();
        }
        prop_assert_eq!(seen, samples.len());
    }

    #[test]
    fn lr_schedule_stays_in_unit_interval_and_is_continuous(
        total in 2usize..5000,
        ratio in 0.01..0.9f64,
    ) {
        let warmup = (ratio * total as f64).round() as usize;
        let span = total - warmup;
        // Exact per-step bounds of the two phases: 1/warmup_steps on the
        // ramp, pi/(2 span) for the steepest cosine increment.
        let ramp_step = if warmup > 0 { 1.0 / warmup as f64 } else { 1.0 };
        let cosine_step = if span > 0 {
            std::f64::consts::PI / (2.0 * span as f64)
        } else {
            1.0
        };
        let bound = ramp_step.max(cosine_step) + 1e-12;

        let mut last: Option<f64> = None;
        for step in 0..=total {
            let v = lr_at(step, total, ratio).unwrap();
            prop_assert!((0.0..=1.0).contains(&v), "lr {v} at step {step}");
            if let Some(prev) = last {
                let jump = (v - prev).abs();
                prop_assert!(jump <= bound, "jump {jump} at step {step} exceeds {bound}");
            }
            last = Some(v);
        }
        if warmup > 0 && warmup < total {
            // Both formulas meet at exactly 1.0 on the boundary step.
            prop_assert_eq!(lr_at(warmup, total, ratio).unwrap(), 1.0);
        }
    }
}
