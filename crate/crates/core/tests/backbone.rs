use mtslvr::model::{BackboneConfig, HeadId, Model, Phase, Variant};
use mtslvr::tensor::{Graph, Group, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(variant: Variant) -> BackboneConfig {
    BackboneConfig {
        widths: vec![4, 6, 8],
        output_dim: 10,
        ..BackboneConfig::desk(variant)
    }
}

fn build(variant: Variant, seed: u64) -> Model<f64> {
    Model::new(tiny(variant), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn input(seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[3, 3, 12, 10], |_| rng.gen_range(-1.0..1.0))
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn resnet18_simple_matches_reference_count() {
    let m: Model<f32> = Model::new(BackboneConfig::resnet18(Variant::Simple), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(m.total_params(), 11_689_512);
}

#[test]
fn resnet18_multipliers_in_band() {
    let count = |v| {
        let m: Model<f32> = Model::new(BackboneConfig::resnet18(v), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        m.total_params() as f64
    };
    let simple = count(Variant::Simple);
    for (v, lo, hi) in [
        (Variant::BatchNorm, 0.98, 1.05),
        (Variant::Series, 1.1, 1.35),
        (Variant::Parallel, 1.1, 1.35),
    ] {
        let r = count(v) / simple;
        assert!((lo..=hi).contains(&r), "{v}: ratio {r}");
    }
}

#[test]
fn adapters_at_init_match_simple() {
    let x = input(1);
    let simple = build(Variant::Simple, 7).forward_head(&x, HeadId::Contrastive).unwrap();
    for v in [Variant::BatchNorm, Variant::Series, Variant::Parallel] {
        let m = build(v, 7);
        for h in HeadId::BOTH {
            let out = m.forward_head(&x, h).unwrap();
            assert!(max_abs_diff(&out, &simple) <= 1e-12, "{v} {h:?}");
        }
    }
}

#[test]
fn simple_heads_are_identical() {
    let m = build(Variant::Simple, 3);
    let x = input(2);
    assert_eq!(
        m.forward_head(&x, HeadId::Contrastive).unwrap(),
        m.forward_head(&x, HeadId::Predictive).unwrap()
    );
}

#[test]
fn perturbing_predictive_parameters_leaves_contrastive_bit_identical() {
    let x = input(4);
    for v in [Variant::Split, Variant::BatchNorm, Variant::Series, Variant::Parallel] {
        let mut m = build(v, 9);
        let before_c = m.forward_head(&x, HeadId::Contrastive).unwrap();
        let before_p = m.forward_head(&x, HeadId::Predictive).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ids: Vec<_> = m.store().ids().filter(|&id| m.store().group(id) == Group::Predictive && m.store().is_trainable(id)).collect();
        for id in ids {
            for v in m.store_mut().get_mut(id).data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        let after_c = m.forward_head(&x, HeadId::Contrastive).unwrap();
        let after_p = m.forward_head(&x, HeadId::Predictive).unwrap();
        assert_eq!(before_c, after_c, "{v}");
        assert!(max_abs_diff(&before_p, &after_p) > 1e-6, "{v}");
    }
}

#[test]
fn head_gradients_are_disjoint() {
    let x = input(5);
    for v in [Variant::Split, Variant::BatchNorm, Variant::Series, Variant::Parallel] {
        let m = build(v, 2);
        for head in HeadId::BOTH {
            let mut g = Graph::new();
            let b = m.store().bind(&mut g, true);
            let xv = g.constant(x.clone());
            let out = m.forward_one(&mut g, &b, xv, head, Phase::Train, &mut Vec::new()).unwrap();
            let sq = g.mul(out, out).unwrap();
            let loss = g.sum(sq);
            let grads = b.grads(&g.backward(loss).unwrap());
            let other = HeadId::BOTH[1 - head.index()].group();
            for id in m.store().ids() {
                let grad = &grads[id.index()];
                if m.store().group(id) == other {
                    let zero = grad.as_ref().is_none_or(|t| t.data().iter().all(|&v| v == 0.0));
                    assert!(zero, "{v}: {} received gradient from {head:?}", m.store().name(id));
                }
            }
        }
    }
}

/// With the 3x3 conv weights at one site zeroed, a series adapter sees only
/// zeros while a parallel adapter sees the site input.
#[test]
fn series_acts_on_conv_output_parallel_on_conv_input() {
    let x = input(6);
    for (v, adapter_matters) in [(Variant::Series, false), (Variant::Parallel, true)] {
        let mut m = build(v, 4);
        let conv = m.store().find("stage1.block0.conv1.weight").unwrap();
        m.store_mut().get_mut(conv).data_mut().fill(0.0);
        let base = m.forward_head(&x, HeadId::Contrastive).unwrap();
        let adapter = m.store().find("stage1.block0.conv1.adapter.contrastive.weight").unwrap();
        m.store_mut().get_mut(adapter).data_mut().fill(0.5);
        let out = m.forward_head(&x, HeadId::Contrastive).unwrap();
        assert_eq!(max_abs_diff(&base, &out) > 1e-9, adapter_matters, "{v}");
    }
}

#[test]
fn parameter_count_ordering_across_shapes() {
    for widths in [vec![2], vec![3, 5], vec![8, 8, 16]] {
        for depth in 1..=2 {
            let count = |v| {
                let cfg = BackboneConfig {
                    widths: widths.clone(),
                    depth,
                    output_dim: 4,
                    ..BackboneConfig::desk(v)
                };
                Model::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().total_params()
            };
            let simple = count(Variant::Simple);
            assert!(count(Variant::Series) > simple);
            assert!(count(Variant::Parallel) > simple);
            assert!(count(Variant::BatchNorm) >= simple);
            assert_eq!(count(Variant::Split), simple);
        }
    }
}
