use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use recall_core::data::{
    generate_synthetic, split_by_instance, Example, FeatureDataset, SequenceManifest, SyntheticSpec,
};
use recall_core::math::{init_parameters, softmax, ActivationSpec, DenseMatrix, InitScheme, InitSpec};
use recall_core::metrics::{evaluate, logit_variance};
use recall_core::model::{ArchMode, HeadShape, MultiHeadModel};
use recall_core::rng::stream;

fn manifest(sequences: Vec<Vec<u32>>) -> SequenceManifest {
    SequenceManifest {
        sequences,
        train: "t".into(),
        val: "v".into(),
        notes: String::new(),
    }
}

fn random_dataset(n: usize, dim: usize, categories: u32, seed: u64) -> FeatureDataset {
    let mut rng = stream(seed);
    let examples = (0..n)
        .map(|i| Example {
            example_id: i as u64,
            instance_id: i as u32,
            category_id: rng.random_range(0..categories),
            features: (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect(),
        })
        .collect();
    FeatureDataset::new(dim, examples).unwrap()
}

#[test]
fn softmax_of_one_two_three_matches_the_direct_formula() {
    let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
    let e = [1f64.exp(), 2f64.exp(), 3f64.exp()];
    let sum: f64 = e.iter().sum();
    for (pi, ei) in p.iter().zip(e) {
        assert!((pi - ei / sum).abs() < 1e-12);
    }
}

#[test]
fn glorot_draws_have_the_uniform_variance() {
    let spec = InitSpec {
        scheme: InitScheme::GlorotUniform,
        rng_seed: 21,
    };
    let (w, _) = init_parameters(&spec, 100, 100);
    let n = w.data().len() as f64;
    assert_eq!(n, 1e4);
    let mean = w.data().iter().sum::<f64>() / n;
    let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    // U[-a, a] has variance a²/3, which for Glorot is 2 / (fan_in + fan_out)
    let bound = InitScheme::GlorotUniform.bound(100, 100);
    let expected = bound * bound / 3.0;
    assert!((expected - 2.0 / 200.0).abs() < 1e-15);
    assert!((var - expected).abs() < 0.2 * expected, "variance {var} vs {expected}");
}

fn manual_logits(model: &MultiHeadModel, x: &[f64]) -> Vec<f64> {
    let act = model.activation();
    let mut out = Vec::new();
    for head in model.heads() {
        let mut a = x.to_vec();
        let last = head.layers.len() - 1;
        for (l, layer) in head.layers.iter().enumerate() {
            let w = &layer.weights;
            let mut z = vec![0.0; w.rows()];
            for (j, zj) in z.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (k, ak) in a.iter().enumerate() {
                    acc += w.get(j, k) * ak;
                }
                *zj = acc + layer.bias[j];
            }
            a = if l == last {
                z
            } else {
                let omega = if l == 0 { act.omega_first } else { act.omega_hidden };
                match act.kind {
                    recall_core::math::ActivationKind::Relu => z.iter().map(|v| v.max(0.0)).collect(),
                    recall_core::math::ActivationKind::Siren => z.iter().map(|v| (omega * v).sin()).collect(),
                }
            };
        }
        out.extend(a);
    }
    out
}

#[test]
fn model_output_matches_layer_by_layer_evaluation() {
    for act in [ActivationSpec::relu(), ActivationSpec::siren(30.0, 30.0)] {
        for arch in [ArchMode::PerSequenceHead, ArchMode::ExpandLastLayer] {
            let shape = HeadShape {
                hidden_width: 9,
                hidden_layers: 2,
            };
            let mut model = MultiHeadModel::new(5, shape, act, arch).unwrap();
            model.expand(&[3, 1], 3).unwrap();
            model.expand(&[0, 2, 4], 4).unwrap();
            let mut rng = stream(3);
            for _ in 0..20 {
                let x: Vec<f64> = (0..5).map(|_| rng.sample(StandardNormal)).collect();
                let got = model.predict_without_softmax(&x).unwrap();
                let want = manual_logits(&model, &x);
                assert_eq!(got.len(), 5);
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0), "{act:?} {arch:?}");
                }
            }
        }
    }
}

#[test]
fn expanding_the_last_layer_keeps_the_old_block() {
    let shape = HeadShape {
        hidden_width: 7,
        hidden_layers: 1,
    };
    let mut model = MultiHeadModel::new(4, shape, ActivationSpec::relu(), ArchMode::ExpandLastLayer).unwrap();
    model.expand(&[0, 1, 2], 1).unwrap();
    let before = model.heads()[0].layers[1].clone();
    model.expand(&[5, 6], 2).unwrap();
    let after = &model.heads()[0].layers[1];
    assert_eq!(after.weights.rows(), 5);
    for r in 0..3 {
        assert!(before
            .weights
            .row(r)
            .iter()
            .zip(after.weights.row(r))
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    assert_eq!(&after.bias[..3], &before.bias[..]);
    assert_eq!(model.heads().len(), 1);
}

#[test]
fn random_model_scores_chance_on_random_labels() {
    let k = 5u32;
    let n = 10_000;
    let val = random_dataset(n, 6, k, 31);
    let shape = HeadShape {
        hidden_width: 8,
        hidden_layers: 1,
    };
    let mut model = MultiHeadModel::new(6, shape, ActivationSpec::relu(), ArchMode::PerSequenceHead).unwrap();
    model.expand(&(0..k).collect::<Vec<_>>(), 32).unwrap();
    let m = manifest(vec![(0..k).collect()]);
    let acc = evaluate(&model, &val, &m, 0, 64).unwrap().overall();
    let p = 1.0 / k as f64;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    assert!((acc - p).abs() <= 3.0 * sigma, "accuracy {acc}");
}

#[test]
fn constant_and_perfect_models() {
    // balanced 5-category set, features are one-hot category codes
    let examples: Vec<Example> = (0..50)
        .map(|i| {
            let c = (i % 5) as u32;
            let mut features = vec![0.0f32; 5];
            features[c as usize] = 1.0;
            Example {
                example_id: i,
                instance_id: i as u32,
                category_id: c,
                features,
            }
        })
        .collect();
    let val = FeatureDataset::new(5, examples).unwrap();
    let m = manifest(vec![vec![0, 1], vec![2, 3, 4]]);
    let shape = HeadShape {
        hidden_width: 0,
        hidden_layers: 0,
    };
    let mut model = MultiHeadModel::new(5, shape, ActivationSpec::relu(), ArchMode::ExpandLastLayer).unwrap();
    model.expand(&[0, 1], 1).unwrap();
    model.expand(&[2, 3, 4], 2).unwrap();

    {
        let mut params = model.parameter_slices_mut();
        params[0].fill(0.0);
        params[1].fill(0.0);
        params[1][0] = 1.0;
    }
    let eval = evaluate(&model, &val, &m, 1, 8).unwrap();
    assert!((eval.overall() - 0.2).abs() < 1e-15);
    assert_eq!(eval.per_origin(), vec![0.5, 0.0]);

    {
        let mut params = model.parameter_slices_mut();
        params[1].fill(0.0);
        let w = &mut params[0];
        for c in 0..5 {
            w[c * 5 + c] = 1.0;
        }
    }
    let eval = evaluate(&model, &val, &m, 1, 8).unwrap();
    assert_eq!(eval.per_origin(), vec![1.0, 1.0]);
}

#[test]
fn logit_variance_matches_brute_force() {
    let val = random_dataset(300, 6, 4, 41);
    let shape = HeadShape {
        hidden_width: 8,
        hidden_layers: 1,
    };
    let mut model = MultiHeadModel::new(6, shape, ActivationSpec::relu(), ArchMode::PerSequenceHead).unwrap();
    model.expand(&[0, 1], 42).unwrap();
    model.expand(&[2, 3], 43).unwrap();
    let mut all = Vec::new();
    for e in val.examples() {
        let x: Vec<f64> = e.features.iter().map(|&v| v as f64).collect();
        all.extend(model.predict_without_softmax(&x).unwrap());
    }
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let brute = all.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let got = logit_variance(&model, &val, 16).unwrap();
    assert!((got - brute).abs() <= 1e-9 * brute.max(1.0));

    for p in model.parameter_slices_mut() {
        p.fill(0.0);
    }
    assert_eq!(logit_variance(&model, &val, 16).unwrap(), 0.0);
}

#[test]
fn default_benchmark_is_learnable_by_nearest_centroid() {
    for seed in 1..=5 {
        let ds = generate_synthetic(&SyntheticSpec {
            seed,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let (train, val) = split_by_instance(&ds, 0.2, seed).unwrap();
        let mut sums: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
        for e in train.examples() {
            let entry = sums
                .entry(e.category_id)
                .or_insert_with(|| (vec![0.0; e.features.len()], 0));
            for (s, &v) in entry.0.iter_mut().zip(&e.features) {
                *s += v as f64;
            }
            entry.1 += 1;
        }
        let centroids: Vec<(u32, Vec<f64>)> = sums
            .into_iter()
            .map(|(c, (s, n))| (c, s.into_iter().map(|v| v / n as f64).collect()))
            .collect();
        let correct = val
            .examples()
            .iter()
            .filter(|e| {
                let best = centroids
                    .iter()
                    .map(|(c, m)| {
                        let d: f64 = m.iter().zip(&e.features).map(|(a, &b)| (a - b as f64).powi(2)).sum();
                        (d, *c)
                    })
                    .min_by(|a, b| a.0.total_cmp(&b.0))
                    .unwrap();
                best.1 == e.category_id
            })
            .count();
        let acc = correct as f64 / val.len() as f64;
        assert!(acc >= 0.95, "seed {seed}: nearest-centroid accuracy {acc}");
    }
}

#[test]
fn dense_matrix_rejects_bad_input() {
    assert!(DenseMatrix::new(2, 2, vec![1.0; 3]).is_err());
    assert!(DenseMatrix::new(1, 1, vec![f64::NAN]).is_err());
}
