use std::collections::BTreeSet;

use recall_core::data::{generate_synthetic, FeatureDataset, SequenceManifest, SyntheticSpec};
use recall_core::losses::LossMode;
use recall_core::metrics::predict_position;
use recall_core::model::MultiHeadModel;
use recall_core::rng::derive_seed;
use recall_core::trainer::{
    compute_recall_labels, run_curriculum, train_sequence, Optimizer, SequenceLoader, SequenceState, TrainConfig,
};

fn blobs(categories: usize, seed: u64) -> FeatureDataset {
    generate_synthetic(&SyntheticSpec {
        categories,
        instances_per_category: 4,
        samples_per_instance: 10,
        feature_dim: 6,
        category_spread: 2.0,
        instance_spread: 0.3,
        noise_spread: 0.1,
        seed,
    })
    .unwrap()
}

fn small_config(mode: LossMode, seed: u64) -> TrainConfig {
    let mut c = TrainConfig {
        mode,
        epochs_per_sequence: 5,
        batch_size: 16,
        hidden_width: 16,
        ..TrainConfig::default()
    }
    .with_seed(seed);
    c.optimizer.learning_rate = 1e-2;
    c
}

fn subset(ds: &FeatureDataset, cats: &[u32]) -> FeatureDataset {
    ds.restrict_to(&cats.iter().copied().collect::<BTreeSet<_>>())
}

fn accuracy(model: &MultiHeadModel, ds: &FeatureDataset) -> f64 {
    let order = model.category_order();
    let logits = model.forward(&ds.feature_matrix(0..ds.len())).unwrap().logits;
    let correct = ds
        .examples()
        .iter()
        .enumerate()
        .filter(|(i, e)| order[predict_position(logits.row(*i), &order)] == e.category_id)
        .count();
    correct as f64 / ds.len() as f64
}

fn train(
    model: &mut MultiHeadModel,
    s: usize,
    cats: &[u32],
    previous: &[u32],
    data: &FeatureDataset,
    config: &TrainConfig,
    optimizer: &mut Optimizer,
) -> recall_core::trainer::SequenceOutcome {
    let state = SequenceState::new(s, cats.to_vec(), previous.to_vec()).unwrap();
    let loader = SequenceLoader::new(data);
    train_sequence(model, &state, &loader, config, optimizer).unwrap()
}

#[test]
fn zero_learning_rate_leaves_the_expanded_model_untouched() {
    let ds = blobs(4, 1);
    for mode in LossMode::ALL {
        let mut config = small_config(mode, 3);
        config.optimizer.learning_rate = 0.0;
        config.zero_lr_diagnostic = true;
        let mut model = config.new_model(6).unwrap();
        let mut opt = Optimizer::new(config.optimizer);
        let mut previous = Vec::new();
        for (s, cats) in [[0u32, 1], [2, 3]].iter().enumerate() {
            let mut expected = model.clone();
            expected
                .expand(cats, derive_seed(config.init_seed, &[s as u64]))
                .unwrap();
            let out = train(&mut model, s, cats, &previous, &subset(&ds, cats), &config, &mut opt);
            assert!(model.bitwise_eq(&expected), "{mode} s{s}: parameters moved");
            let first = out.loss_trace[0].total.to_bits();
            assert!(
                out.loss_trace.iter().all(|l| l.total.to_bits() == first),
                "{mode} s{s}: loss trace varies"
            );
            previous = model.category_order();
        }
    }
}

#[test]
fn zero_learning_rate_requires_the_diagnostic_flag() {
    let mut config = small_config(LossMode::Recall, 1);
    config.optimizer.learning_rate = 0.0;
    assert!(config.validate().is_err());
    config.zero_lr_diagnostic = true;
    assert!(config.validate().is_ok());
}

#[test]
fn first_sequence_fits_separable_blobs() {
    let ds = blobs(2, 4);
    let mut config = small_config(LossMode::Recall, 4);
    config.epochs_per_sequence = 50;
    let mut model = config.new_model(6).unwrap();
    let mut opt = Optimizer::new(config.optimizer);
    train(&mut model, 0, &[0, 1], &[], &ds, &config, &mut opt);
    let acc = accuracy(&model, &ds);
    assert!(acc >= 0.99, "training accuracy {acc}");
}

fn old_logit_deviation(mode: LossMode) -> f64 {
    let ds = blobs(4, 8);
    let config = small_config(mode, 8);
    let mut model = config.new_model(6).unwrap();
    let mut opt = Optimizer::new(config.optimizer);
    train(&mut model, 0, &[0, 1], &[], &subset(&ds, &[0, 1]), &config, &mut opt);
    let second = subset(&ds, &[2, 3]);
    let reference = compute_recall_labels(&model, 1, &SequenceLoader::new(&second), 16).unwrap();
    let mut config = config;
    config.epochs_per_sequence = 30;
    train(&mut model, 1, &[2, 3], &[0, 1], &second, &config, &mut opt);
    let after = model.forward(&second.feature_matrix(0..second.len())).unwrap().logits;
    let mut sum = 0.0;
    for i in 0..second.len() {
        for c in 0..2 {
            let d = after.get(i, c) - reference.get(i, c);
            sum += d * d;
        }
    }
    sum / (2 * second.len()) as f64
}

#[test]
fn recall_keeps_old_logits_far_closer_than_naive_training() {
    let recall = old_logit_deviation(LossMode::Recall);
    let naive = old_logit_deviation(LossMode::NaiveBaseline);
    assert!(naive >= 5.0 * recall, "recall {recall} naive {naive}");
}

#[test]
fn recall_labels_are_the_previous_logits() {
    let ds = blobs(2, 9);
    let config = small_config(LossMode::Recall, 9);
    let mut model = config.new_model(6).unwrap();
    model.expand(&[0, 1], 1).unwrap();
    let loader = SequenceLoader::new(&ds);
    let labels = compute_recall_labels(&model, 1, &loader, 7).unwrap();
    assert_eq!(labels.rows(), ds.len());
    for (i, e) in ds.examples().iter().enumerate().take(100) {
        let x: Vec<f64> = e.features.iter().map(|&v| v as f64).collect();
        let direct = model.predict_without_softmax(&x).unwrap();
        assert!(direct
            .iter()
            .zip(labels.row(i))
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    for p in model.parameter_slices_mut() {
        p.fill(0.0);
    }
    let zero = compute_recall_labels(&model, 1, &loader, 7).unwrap();
    assert!(zero.data().iter().all(|&v| v == 0.0));
}

fn single_sequence_run(mode: LossMode) -> MultiHeadModel {
    let ds = blobs(3, 10);
    let config = small_config(mode, 10);
    let manifest = SequenceManifest {
        sequences: vec![vec![2, 0, 1]],
        train: "t".into(),
        val: "v".into(),
        notes: String::new(),
    };
    run_curriculum(&manifest, &ds, &ds, &config, |_, _| Ok(()))
        .unwrap()
        .model
}

#[test]
fn one_sequence_curriculum_is_plain_supervised_training() {
    let ds = blobs(3, 10);
    let config = small_config(LossMode::Recall, 10);
    let mut model = config.new_model(6).unwrap();
    let mut opt = Optimizer::new(config.optimizer);
    train(&mut model, 0, &[2, 0, 1], &[], &ds, &config, &mut opt);
    assert!(single_sequence_run(LossMode::Recall).bitwise_eq(&model));
}

#[test]
fn modes_coincide_on_the_first_sequence() {
    let recall = single_sequence_run(LossMode::Recall);
    assert!(single_sequence_run(LossMode::RecallVar).bitwise_eq(&recall));
    assert!(single_sequence_run(LossMode::NaiveBaseline).bitwise_eq(&recall));
    let reg = single_sequence_run(LossMode::RecallReg);
    assert!(single_sequence_run(LossMode::RecallVarReg).bitwise_eq(&reg));
}

#[test]
fn identical_seeds_give_identical_reports() {
    let ds = blobs(4, 11);
    let manifest = SequenceManifest {
        sequences: vec![vec![1, 3], vec![0, 2]],
        train: "t".into(),
        val: "v".into(),
        notes: String::new(),
    };
    let config = small_config(LossMode::RecallVar, 11);
    let a = run_curriculum(&manifest, &ds, &ds, &config, |_, _| Ok(())).unwrap();
    let b = run_curriculum(&manifest, &ds, &ds, &config, |_, _| Ok(())).unwrap();
    assert_eq!(a.report, b.report);
    assert!(a.model.bitwise_eq(&b.model));
    assert!(a.audits.iter().all(|x| x.violations.is_empty()));
}

#[test]
fn sequence_callback_sees_every_sequence_in_order() {
    let ds = blobs(4, 12);
    let manifest = SequenceManifest {
        sequences: vec![vec![0], vec![1, 2], vec![3]],
        train: "t".into(),
        val: "v".into(),
        notes: String::new(),
    };
    let config = small_config(LossMode::Recall, 12);
    let mut seen = Vec::new();
    run_curriculum(&manifest, &ds, &ds, &config, |s, m| {
        seen.push((s, m.num_categories()));
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![(0, 1), (1, 3), (2, 4)]);
}

#[test]
fn training_data_from_another_sequence_is_rejected() {
    let ds = blobs(4, 13);
    let config = small_config(LossMode::Recall, 13);
    let mut model = config.new_model(6).unwrap();
    let state = SequenceState::new(0, vec![0, 1], vec![]).unwrap();
    let loader = SequenceLoader::new(&ds);
    let err = train_sequence(
        &mut model,
        &state,
        &loader,
        &config,
        &mut Optimizer::new(config.optimizer),
    );
    assert!(err.is_err());
    assert_eq!(loader.access_count(), 0);
}
