//! Test-only oracles shared between integration test targets.
#![allow(dead_code)]

use mtslvr::tensor::{BnMode, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Build = fn(&mut Graph<f64>, &[Var], &mut OpAttrs) -> mtslvr::Result<Var>;

/// Extra fixed data an op needs (targets, masks), drawn once per instance.
#[derive(Default, Clone)]
pub struct OpAttrs {
    pub targets: Vec<usize>,
    pub labels: Option<Tensor<f64>>,
}

pub struct OpCase {
    pub name: &'static str,
    pub make: fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, OpAttrs),
    pub build: Build,
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero so ReLU kinks are not straddled by the
/// finite-difference stencil.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values so max-pool has a unique arg-max everywhere.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape, vals).unwrap()
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

/// Loss = sum(out * R) for a fixed random R, plus gradients of every input.
fn loss_and_grads(
    inputs: &[Tensor<f64>],
    attrs: &OpAttrs,
    build: Build,
    weights: Option<&Tensor<f64>>,
    want_grads: bool,
) -> (f64, Tensor<f64>, Vec<Tensor<f64>>) {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let mut a = attrs.clone();
    let out = build(&mut g, &vars, &mut a).expect("op builds");
    let w = match weights {
        Some(w) => w.clone(),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            randn(g.shape(out), &mut rng)
        }
    };
    let wv = g.constant(w.clone());
    let prod = g.mul(out, wv).unwrap();
    let loss = g.sum(prod);
    let value = g.value(loss).item().unwrap();
    let grads = if want_grads {
        let gr = g.backward(loss).unwrap();
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| gr.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    } else {
        Vec::new()
    };
    (value, w, grads)
}

/// Relative error `|a - n| / max(|a|, |n|)` (Euclidean norms) between the
/// analytic gradient and the central finite difference with step `h`.
pub fn gradcheck(inputs: &[Tensor<f64>], attrs: &OpAttrs, build: Build, h: f64) -> f64 {
    let (_, w, analytic) = loss_and_grads(inputs, attrs, build, None, true);
    let mut num = Vec::new();
    let mut ana = Vec::new();
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let (lp, _, _) = loss_and_grads(&plus, attrs, build, Some(&w), false);
            let (lm, _, _) = loss_and_grads(&minus, attrs, build, Some(&w), false);
            num.push((lp - lm) / (2.0 * h));
            ana.push(analytic[k].data()[i]);
        }
    }
    let diff: f64 = num.iter().zip(&ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let nn: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt();
    let na: f64 = ana.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / nn.max(na).max(1e-10)
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "add",
            make: |r| {
                let s = [dims(r, 1, 4), dims(r, 1, 5)];
                (vec![randn(&s, r), randn(&s, r)], OpAttrs::default())
            },
            build: |g, v, _| g.add(v[0], v[1]),
        },
        OpCase {
            name: "sub",
            make: |r| {
                let s = [dims(r, 1, 4), dims(r, 1, 5)];
                (vec![randn(&s, r), randn(&s, r)], OpAttrs::default())
            },
            build: |g, v, _| g.sub(v[0], v[1]),
        },
        OpCase {
            name: "mul",
            make: |r| {
                let s = [dims(r, 1, 4), dims(r, 1, 5)];
                (vec![randn(&s, r), randn(&s, r)], OpAttrs::default())
            },
            build: |g, v, _| g.mul(v[0], v[1]),
        },
        OpCase {
            name: "scale",
            make: |r| (vec![randn(&[dims(r, 1, 6)], r)], OpAttrs::default()),
            build: |g, v, _| Ok(g.scale(v[0], -1.7)),
        },
        OpCase {
            name: "add_bias",
            make: |r| {
                let c = dims(r, 1, 4);
                let s = [dims(r, 1, 3), c, dims(r, 1, 3), dims(r, 1, 3)];
                (vec![randn(&s, r), randn(&[c], r)], OpAttrs::default())
            },
            build: |g, v, _| g.add_bias(v[0], v[1]),
        },
        OpCase {
            name: "matmul",
            make: |r| {
                let (m, k, n) = (dims(r, 1, 4), dims(r, 1, 4), dims(r, 1, 4));
                (vec![randn(&[m, k], r), randn(&[k, n], r)], OpAttrs::default())
            },
            build: |g, v, _| g.matmul(v[0], v[1]),
        },
        OpCase {
            name: "matmul_transposed",
            make: |r| {
                let (m, k, n) = (dims(r, 1, 4), dims(r, 1, 4), dims(r, 1, 4));
                let ta = r.gen_bool(0.5);
                let tb = r.gen_bool(0.5);
                let a = if ta { randn(&[k, m], r) } else { randn(&[m, k], r) };
                let b = if tb { randn(&[n, k], r) } else { randn(&[k, n], r) };
                let attrs = OpAttrs {
                    targets: vec![ta as usize, tb as usize],
                    labels: None,
                };
                (vec![a, b], attrs)
            },
            build: |g, v, a| g.matmul_ex(v[0], v[1], a.targets[0] == 1, a.targets[1] == 1),
        },
        OpCase {
            name: "dense",
            make: |r| {
                let (n, i, o) = (dims(r, 1, 4), dims(r, 1, 5), dims(r, 1, 4));
                (
                    vec![randn(&[n, i], r), randn(&[o, i], r), randn(&[o], r)],
                    OpAttrs::default(),
                )
            },
            build: |g, v, _| g.dense(v[0], v[1], Some(v[2])),
        },
        OpCase {
            name: "conv2d",
            make: |r| {
                let (c, o) = (dims(r, 1, 3), dims(r, 1, 3));
                let k = [1, 3][r.gen_range(0..2)];
                let stride = dims(r, 1, 2);
                let pad = if k == 3 { r.gen_range(0..=1) } else { 0 };
                let (h, w) = (dims(r, 3, 6), dims(r, 3, 6));
                let attrs = OpAttrs {
                    targets: vec![stride, pad],
                    labels: None,
                };
                (
                    vec![randn(&[dims(r, 1, 2), c, h, w], r), randn(&[o, c, k, k], r)],
                    attrs,
                )
            },
            build: |g, v, a| g.conv2d(v[0], v[1], a.targets[0], a.targets[1]),
        },
        OpCase {
            name: "batch_norm_train",
            make: |r| {
                let c = dims(r, 1, 3);
                let s = if r.gen_bool(0.5) {
                    vec![dims(r, 2, 4), c, dims(r, 1, 3), dims(r, 1, 3)]
                } else {
                    vec![dims(r, 3, 6), c]
                };
                (
                    vec![randn(&s, r), randn(&[c], r), randn(&[c], r)],
                    OpAttrs::default(),
                )
            },
            build: |g, v, _| {
                g.batch_norm(v[0], v[1], v[2], BnMode::Train { eps: 1e-5 })
                    .map(|(y, _)| y)
            },
        },
        OpCase {
            name: "batch_norm_eval",
            make: |r| {
                let c = dims(r, 1, 3);
                let s = [dims(r, 1, 3), c, dims(r, 1, 3), dims(r, 1, 3)];
                (
                    vec![randn(&s, r), randn(&[c], r), randn(&[c], r)],
                    OpAttrs::default(),
                )
            },
            build: |g, v, _| {
                let c = g.shape(v[1])[0];
                let mean: Vec<f64> = (0..c).map(|i| 0.1 * i as f64).collect();
                let var: Vec<f64> = (0..c).map(|i| 0.5 + i as f64).collect();
                g.batch_norm(v[0], v[1], v[2], BnMode::Eval { mean: &mean, var: &var, eps: 1e-5 })
                    .map(|(y, _)| y)
            },
        },
        OpCase {
            name: "relu",
            make: |r| (vec![away_from_zero(&[dims(r, 1, 4), dims(r, 1, 4)], r)], OpAttrs::default()),
            build: |g, v, _| Ok(g.relu(v[0])),
        },
        OpCase {
            name: "sigmoid",
            make: |r| (vec![randn(&[dims(r, 1, 8)], r)], OpAttrs::default()),
            build: |g, v, _| Ok(g.sigmoid(v[0])),
        },
        OpCase {
            name: "exp",
            make: |r| (vec![randn(&[dims(r, 1, 8)], r)], OpAttrs::default()),
            build: |g, v, _| Ok(g.exp(v[0])),
        },
        OpCase {
            name: "log",
            make: |r| {
                let n = dims(r, 1, 8);
                (vec![Tensor::from_fn(&[n], |_| r.gen_range(0.2..2.0))], OpAttrs::default())
            },
            build: |g, v, _| g.log(v[0]),
        },
        OpCase {
            name: "max_pool2d",
            make: |r| {
                let s = [dims(r, 1, 2), dims(r, 1, 2), dims(r, 3, 6), dims(r, 3, 6)];
                (vec![distinct(&s, r)], OpAttrs::default())
            },
            build: |g, v, _| g.max_pool2d(v[0], 3, 2, 1),
        },
        OpCase {
            name: "global_avg_pool",
            make: |r| {
                let s = [dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 4), dims(r, 1, 4)];
                (vec![randn(&s, r)], OpAttrs::default())
            },
            build: |g, v, _| g.global_avg_pool(v[0]),
        },
        OpCase {
            name: "concat",
            make: |r| {
                let axis = r.gen_range(0..2);
                let other = dims(r, 1, 3);
                let mk = |r: &mut ChaCha8Rng| {
                    let d = dims(r, 1, 3);
                    if axis == 0 {
                        randn(&[d, other], r)
                    } else {
                        randn(&[other, d], r)
                    }
                };
                let (a, b, c) = (mk(r), mk(r), mk(r));
                let attrs = OpAttrs {
                    targets: vec![axis],
                    labels: None,
                };
                (vec![a, b, c], attrs)
            },
            build: |g, v, a| g.concat(v, a.targets[0]),
        },
        OpCase {
            name: "slice",
            make: |r| {
                let s = [dims(r, 2, 4), dims(r, 2, 5)];
                let axis = r.gen_range(0..2);
                let start = r.gen_range(0..s[axis] - 1);
                let end = r.gen_range(start + 1..=s[axis]);
                let attrs = OpAttrs {
                    targets: vec![axis, start, end],
                    labels: None,
                };
                (vec![randn(&s, r)], attrs)
            },
            build: |g, v, a| g.slice(v[0], a.targets[0], a.targets[1], a.targets[2]),
        },
        OpCase {
            name: "reshape",
            make: |r| (vec![randn(&[2, dims(r, 1, 3), 3], r)], OpAttrs::default()),
            build: |g, v, _| {
                let n = g.value(v[0]).len();
                g.reshape(v[0], &[n / 3, 3])
            },
        },
        OpCase {
            name: "sum",
            make: |r| (vec![randn(&[dims(r, 1, 4), dims(r, 1, 4)], r)], OpAttrs::default()),
            build: |g, v, _| Ok(g.sum(v[0])),
        },
        OpCase {
            name: "mean",
            make: |r| (vec![randn(&[dims(r, 1, 4), dims(r, 1, 4)], r)], OpAttrs::default()),
            build: |g, v, _| Ok(g.mean(v[0])),
        },
        OpCase {
            name: "row_sum",
            make: |r| (vec![randn(&[dims(r, 1, 4), dims(r, 1, 4)], r)], OpAttrs::default()),
            build: |g, v, _| g.row_sum(v[0]),
        },
        OpCase {
            name: "l2_normalize",
            make: |r| (vec![randn(&[dims(r, 1, 4), dims(r, 2, 5)], r)], OpAttrs::default()),
            build: |g, v, _| g.l2_normalize(v[0]),
        },
        OpCase {
            name: "softmax_cross_entropy",
            make: |r| {
                let (n, c) = (dims(r, 1, 4), dims(r, 2, 5));
                let attrs = OpAttrs {
                    targets: (0..n).map(|_| r.gen_range(0..c)).collect(),
                    labels: None,
                };
                (vec![Tensor::from_fn(&[n, c], |_| r.gen_range(-3.0..3.0))], attrs)
            },
            build: |g, v, a| g.softmax_cross_entropy(v[0], &a.targets),
        },
        OpCase {
            name: "bce_with_logits",
            make: |r| {
                let (n, k) = (dims(r, 1, 4), dims(r, 1, 7));
                let labels = Tensor::from_fn(&[n, k], |_| if r.gen_bool(0.5) { 1.0 } else { 0.0 });
                let attrs = OpAttrs {
                    targets: vec![],
                    labels: Some(labels),
                };
                (vec![Tensor::from_fn(&[n, k], |_| r.gen_range(-4.0..4.0))], attrs)
            },
            build: |g, v, a| g.bce_with_logits(v[0], a.labels.as_ref().unwrap()),
        },
    ]
}

/// Worst relative error over `instances` random draws of one op.
pub fn worst_gradcheck(case: &OpCase, instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..instances)
        .map(|_| {
            let (inputs, attrs) = (case.make)(&mut rng);
            gradcheck(&inputs, &attrs, case.build, 1e-5)
        })
        .fold(0.0, f64::max)
}
