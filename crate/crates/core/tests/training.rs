//! Training-dynamics checks: optimizer-group partition, loss-curve sanity on
//! the small overfit task, and schedule wiring inside the train loop.

use mgtlab_core::config::RunConfig;
use mgtlab_core::optim::build_llrd_groups;
use mgtlab_core::pooling::PoolingKind;
use mgtlab_core::rng::Seeder;
use mgtlab_core::synth::{generate_synthetic_corpus, GenConfig};
use mgtlab_core::train::{overfit_with, Model};

fn small_run(pooling: PoolingKind) -> RunConfig {
    let mut run = RunConfig::default();
    run.encoder.num_layers = 2;
    run.encoder.hidden = 32;
    run.encoder.heads = 4;
    run.encoder.ffn_dim = 128;
    run.encoder.vocab_size = 400;
    run.encoder.max_positions = 64;
    run.train.max_seq_len = 64;
    run.train.micro_batch = 16;
    run.train.grad_accum = 2;
    run.train.base_lr = 3e-3;
    run.train.pooling = pooling;
    run.train.seed = 7;
    run
}

#[test]
fn every_trainable_parameter_sits_in_exactly_one_group() {
    for kind in PoolingKind::ALL {
        let run = small_run(kind);
        let model = Model::new(&run).unwrap();
        let groups = build_llrd_groups(
            &model.encoder,
            &model.pooling,
            &model.head,
            &model.store,
            &run.train,
        );

        let mut seen = vec![0usize; model.store.len()];
        for group in &groups {
            assert!((0.0..=1.0).contains(&group.lr_scale) && group.lr_scale > 0.0);
            for id in &group.ids {
                seen[id.index()] += 1;
            }
        }
        for (i, count) in seen.iter().enumerate() {
            assert_eq!(
                *count, 1,
                "{kind}: parameter index {i} appears in {count} groups"
            );
        }
    }
}

#[test]
fn llrd_orders_encoder_tiers_strictly() {
    let run = small_run(PoolingKind::Mean);
    let model = Model::new(&run).unwrap();
    let groups = build_llrd_groups(
        &model.encoder,
        &model.pooling,
        &model.head,
        &model.store,
        &run.train,
    );
    let scale = |name: &str| groups.iter().find(|g| g.name == name).unwrap().lr_scale;
    assert!(scale("encoder.layer0") < scale("encoder.layer1"));
    assert!(scale("encoder.layer1") < scale("head_pooling"));
    assert!(scale("encoder.embeddings") < scale("encoder.layer0"));
}

#[test]
fn llrd_of_one_flattens_all_scales() {
    let mut run = small_run(PoolingKind::Mean);
    run.train.llrd = 1.0;
    let model = Model::new(&run).unwrap();
    let groups = build_llrd_groups(
        &model.encoder,
        &model.pooling,
        &model.head,
        &model.store,
        &run.train,
    );
    assert!(groups.iter().all(|g| g.lr_scale == 1.0));
}

#[test]
fn biases_and_norms_take_no_weight_decay() {
    let run = small_run(PoolingKind::WlpAttentionGated);
    let model = Model::new(&run).unwrap();
    let groups = build_llrd_groups(
        &model.encoder,
        &model.pooling,
        &model.head,
        &model.store,
        &run.train,
    );
    for group in &groups {
        for &id in &group.ids {
            let name = model.store.name(id);
            let is_1d = model.store.tensor(id).shape.len() == 1;
            if group.weight_decay > 0.0 {
                assert!(!is_1d, "1-d parameter {name} must not take weight decay");
            }
        }
    }
    // Layer weights, norm gains, and every bias land in no-decay groups.
    let no_decay_names: Vec<&str> = groups
        .iter()
        .filter(|g| g.weight_decay == 0.0)
        .flat_map(|g| g.ids.iter().map(|id| model.store.name(*id)))
        .collect();
    assert!(no_decay_names.iter().any(|n| n.contains("ln1.gain")));
    assert!(no_decay_names.iter().any(|n| n.contains("layer_weights")));
    assert!(no_decay_names.iter().any(|n| n.contains("classifier_bias")));
}

#[test]
fn overfit_loss_decreases_over_smoothed_windows() {
    // Mean loss over non-overlapping 5-step windows strictly decreases
    // across the first 20 steps of the 32-sample memorization task.
    let corpus = generate_synthetic_corpus(16, &GenConfig::default(), &Seeder::new(2026)).unwrap();
    let run = small_run(PoolingKind::Mean);
    let outcome = overfit_with(&run, &corpus, 20, false).unwrap();
    assert_eq!(outcome.losses.len(), 20);
    let windows: Vec<f64> = outcome
        .losses
        .chunks(5)
        .map(|w| w.iter().sum::<f64>() / w.len() as f64)
        .collect();
    assert_eq!(windows.len(), 4);
    for pair in windows.windows(2) {
        assert!(
            pair[1] < pair[0],
            "smoothed loss went up: {windows:?} (raw {:?})",
            outcome.losses
        );
    }
}
