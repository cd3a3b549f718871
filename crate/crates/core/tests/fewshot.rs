use std::collections::HashSet;

use mtslvr::audio::{MelFrontend, SpectrogramConfig, Waveform};
use mtslvr::fewshot::{
    ci95_half_width, classify_clip, evaluate_features, fit_linear, head_weight_norms, sample_episode, BankEntry,
    ClassIndex, EvalConfig, FeatureBank, FeatureExtractor, HeadLayout, LinearClassifier, LinearConfig,
};
use mtslvr::model::{BackboneConfig, Model, Variant};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn items(classes: usize, per: usize) -> Vec<(String, String)> {
    (0..classes * per)
        .map(|i| (format!("clip{i:04}"), format!("class{:02}", i % classes)))
        .collect()
}

fn index(items: &[(String, String)]) -> ClassIndex {
    ClassIndex::new(items.iter().map(|(a, b)| (a.as_str(), b.as_str())))
}

fn bank(classes: usize, per: usize, dim: usize, feature: impl Fn(usize, &mut ChaCha8Rng) -> Vec<f64>) -> FeatureBank {
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let entries = items(classes, per)
        .into_iter()
        .enumerate()
        .map(|(i, (id, label))| BankEntry {
            id,
            label,
            segments: vec![feature(i % classes, &mut rng)],
        })
        .collect();
    FeatureBank::new(entries, HeadLayout::Single { dim }).unwrap()
}

fn fast(tasks: usize, seed: u64) -> EvalConfig {
    EvalConfig {
        tasks,
        seed,
        ..Default::default()
    }
}

#[test]
fn class_frequency_matches_hypergeometric_expectation() {
    let it = items(10, 8);
    let idx = index(&it);
    let mut counts = vec![0usize; 10];
    let episodes = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..episodes {
        let ep = sample_episode(&idx, 5, 1, 5, &mut rng).unwrap();
        for label in &ep.labels {
            counts[label[5..].parse::<usize>().unwrap()] += 1;
        }
    }
    for (c, n) in counts.iter().enumerate() {
        let freq = *n as f64 / episodes as f64;
        assert!((freq - 0.5).abs() < 0.02, "class {c}: {freq}");
    }
}

#[test]
fn five_class_dataset_always_uses_every_class() {
    let it = items(5, 6);
    let idx = index(&it);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let ep = sample_episode(&idx, 5, 1, 5, &mut rng).unwrap();
        let labels: HashSet<_> = ep.labels.iter().collect();
        assert_eq!(labels.len(), 5);
        assert_eq!((ep.support.len(), ep.query.len()), (5, 25));
    }
}

#[test]
fn short_class_is_named() {
    let mut it = items(6, 6);
    it.retain(|(id, label)| !(label == "class03" && id.as_str() > "clip0020"));
    let err = sample_episode(&index(&it), 5, 1, 5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
    assert!(err.to_string().contains("class03"), "{err}");
}

proptest! {
    #[test]
    fn episodes_are_disjoint_and_balanced(
        classes in 2usize..9,
        extra in 0usize..4,
        k in 1usize..4,
        q in 1usize..4,
        seed in any::<u64>(),
    ) {
        let n = classes.min(5);
        let it = items(classes, k + q + extra);
        let ep = sample_episode(&index(&it), n, k, q, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let support: HashSet<usize> = ep.support.iter().map(|s| s.0).collect();
        let query: HashSet<usize> = ep.query.iter().map(|s| s.0).collect();
        prop_assert_eq!(support.len(), n * k);
        prop_assert_eq!(query.len(), n * q);
        prop_assert!(support.is_disjoint(&query));
        for c in 0..n {
            prop_assert_eq!(ep.support.iter().filter(|s| s.1 == c).count(), k);
            prop_assert_eq!(ep.query.iter().filter(|s| s.1 == c).count(), q);
            let label = &ep.labels[c];
            prop_assert!(ep.support.iter().chain(&ep.query).filter(|s| s.1 == c).all(|s| &it[s.0].1 == label));
        }
    }

    #[test]
    fn one_hot_features_are_nearly_perfect(n in 2usize..=8, seed in 0u64..1000) {
        let b = bank(8, 7, 8, |c, _| (0..8).map(|j| (j == c) as u8 as f64).collect());
        let cfg = EvalConfig { n_way: n, ..fast(40, seed) };
        prop_assert!(evaluate_features(&b, &cfg).unwrap().mean >= 0.99);
    }
}

#[test]
fn one_hot_oracle_over_two_thousand_tasks() {
    let b = bank(10, 8, 10, |c, _| (0..10).map(|j| (j == c) as u8 as f64).collect());
    let r = evaluate_features(&b, &fast(2000, 1)).unwrap();
    assert!(r.mean >= 0.99, "{}", r.mean);
}

#[test]
fn isotropic_noise_features_sit_at_chance() {
    let b = bank(10, 20, 16, |_, rng| (0..16).map(|_| -> f64 { StandardNormal.sample(rng) }).collect());
    let r = evaluate_features(&b, &fast(2000, 3)).unwrap();
    assert!((r.mean - 0.2).abs() < 0.015, "{}", r.mean);
}

#[test]
fn ci_matches_direct_recomputation() {
    let b = bank(10, 20, 16, |_, rng| (0..16).map(|_| -> f64 { StandardNormal.sample(rng) }).collect());
    let r = evaluate_features(&b, &fast(300, 5)).unwrap();
    let t = r.accuracies.len() as f64;
    let mean = r.accuracies.iter().sum::<f64>() / t;
    let sd = (r.accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / t).sqrt();
    assert!((r.ci95 - 1.96 * sd / t.sqrt()).abs() < 1e-12);
    assert!((r.mean - mean).abs() < 1e-12);
    assert_eq!(ci95_half_width(&[0.4]), 0.0);
    assert_eq!(evaluate_features(&b, &fast(1, 5)).unwrap().ci95, 0.0);
}

#[test]
fn shuffled_dataset_gives_identical_report() {
    let b = bank(10, 8, 6, |c, rng| (0..6).map(|j| (j == c % 6) as u8 as f64 + rng.gen_range(-0.8..0.8)).collect());
    let mut entries = b.entries().to_vec();
    entries.shuffle(&mut ChaCha8Rng::seed_from_u64(77));
    let shuffled = FeatureBank::new(entries, b.layout()).unwrap();
    let cfg = fast(200, 9);
    assert_eq!(evaluate_features(&b, &cfg).unwrap(), evaluate_features(&shuffled, &cfg).unwrap());
}

#[test]
fn duplicated_dimensions_keep_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let cfg = LinearConfig::default();
    let (mut same, mut total) = (0usize, 0usize);
    for task in 0..200u64 {
        let centers: Vec<Vec<f64>> = (0..5).map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let draw = |c: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            centers[c].iter().map(|m| { let e: f64 = StandardNormal.sample(rng); m + 0.7 * e }).collect()
        };
        let x: Vec<Vec<f64>> = (0..5).map(|c| draw(c, &mut rng)).collect();
        let y: Vec<usize> = (0..5).collect();
        let dup = |v: &[f64]| [v, v].concat();
        let a = fit_linear(&x, &y, 5, &cfg, task).unwrap();
        let b = fit_linear(&x.iter().map(|v| dup(v)).collect::<Vec<_>>(), &y, 5, &cfg, task).unwrap();
        for c in 0..5 {
            for _ in 0..5 {
                let q = draw(c, &mut rng);
                same += (a.predict(&q).unwrap() == b.predict(&dup(&q)).unwrap()) as usize;
                total += 1;
            }
        }
    }
    assert_eq!(same, total);
}

#[test]
fn separable_two_class_support_is_fit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for c in 0..2 {
        for _ in 0..5 {
            let mut v: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.1..0.1)).collect();
            v[0] = if c == 0 { 1.0 } else { -1.0 };
            x.push(v);
            y.push(c);
        }
    }
    let clf = fit_linear(&x, &y, 2, &LinearConfig::default(), 0).unwrap();
    assert!(x.iter().zip(&y).all(|(v, &c)| clf.predict(v).unwrap() == c));
}

#[test]
fn majority_vote_and_probability_tie_break() {
    // Identity scaling, logits = W x; one-hot segments pick a class.
    let clf = LinearClassifier::from_weights(2, vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]).unwrap();
    let a = vec![3.0, 0.0];
    let b = vec![0.0, 3.0];
    assert_eq!(classify_clip(&clf, &[a.clone()]).unwrap(), 0);
    assert_eq!(classify_clip(&clf, &[a.clone(), a.clone(), b.clone()]).unwrap(), 0);
    assert_eq!(classify_clip(&clf, &[b.clone(), b.clone(), a.clone()]).unwrap(), 1);
    // p(A) = 0.9 / 0.2 across the two segments: A wins on the summed mass.
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let s1 = vec![logit(0.9), 0.0];
    let s2 = vec![logit(0.2), 0.0];
    let p1 = clf.predict_proba(&s1).unwrap();
    let p2 = clf.predict_proba(&s2).unwrap();
    assert!((p1[0] - 0.9).abs() < 1e-12 && (p2[0] - 0.2).abs() < 1e-12);
    assert_eq!(classify_clip(&clf, &[s1, s2]).unwrap(), 0);
}

#[test]
fn head_weights_on_equal_classifier() {
    let clf = LinearClassifier::from_weights(5, vec![0.7; 5 * 12], vec![0.0; 5]).unwrap();
    let w = head_weight_norms(&clf, HeadLayout::Pair { head_dim: 6 }).unwrap();
    assert_eq!(w, [0.5, 0.5]);
    assert!(head_weight_norms(&clf, HeadLayout::Single { dim: 12 }).is_err());
}

proptest! {
    #[test]
    fn head_weights_sum_to_one(w in prop::collection::vec(-3.0..3.0f64, 3 * 8)) {
        prop_assume!(w.iter().any(|x| *x != 0.0));
        let clf = LinearClassifier::from_weights(3, w, vec![0.0; 3]).unwrap();
        let [c, p] = head_weight_norms(&clf, HeadLayout::Pair { head_dim: 4 }).unwrap();
        prop_assert!((c + p - 1.0).abs() < 1e-9);
        prop_assert!(c >= 0.0 && p >= 0.0);
    }
}

fn tiny_model() -> Model<f32> {
    let cfg = BackboneConfig {
        widths: vec![4, 8],
        output_dim: 6,
        ..BackboneConfig::desk(Variant::Parallel)
    };
    Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
}

#[test]
fn segments_follow_ceiling_division_and_are_repeatable() {
    let fe = MelFrontend::new(SpectrogramConfig {
        sample_rate: 2000,
        n_fft: 256,
        hop: 128,
        n_mels: 12,
        ..Default::default()
    })
    .unwrap();
    let m = tiny_model();
    let ext = FeatureExtractor::new(&fe, 5 * 2000).unwrap();
    let tone = |secs: usize| {
        let s = (0..secs * 2000).map(|i| (0.3 * (i as f64 * 0.37).sin()) as f32).collect();
        Waveform::new(s, 2000).unwrap()
    };
    let twelve = ext.extract(&m, &tone(12)).unwrap();
    assert_eq!(twelve.len(), 3);
    assert!(twelve.iter().all(|v| v.len() == 12));
    assert_eq!(ext.extract(&m, &tone(5)).unwrap().len(), 1);
    assert_eq!(ext.extract(&m, &tone(12)).unwrap(), twelve);
    assert!(Waveform::new(vec![], 2000).is_err());
}
