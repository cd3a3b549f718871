use rand::RngCore;

use super::ContrastiveKind;
use crate::audio::AugmentationKind;
use crate::error::Result;
use crate::model::{uniform, BN_EPS};
use crate::scalar::Scalar;
use crate::tensor::{BnMode, Bound, Graph, Group, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug)]
struct Layer {
    weight: ParamId,
    bias: ParamId,
    norm: Option<(ParamId, ParamId)>,
    relu: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadsConfig {
    pub kind: ContrastiveKind,
    /// Width of one backbone head output.
    pub feature_dim: usize,
    pub projection_dim: usize,
    pub mlap_hidden: usize,
}

impl HeadsConfig {
    pub fn new(kind: ContrastiveKind, feature_dim: usize) -> Self {
        HeadsConfig {
            kind,
            feature_dim,
            projection_dim: 128,
            mlap_hidden: 256,
        }
    }
}

/// Projection/prediction MLPs used only during pre-training, in their own
/// store. Contrastive heads carry [`Group::Contrastive`], the augmentation
/// predictor [`Group::Predictive`].
#[derive(Clone, Debug)]
pub struct SslHeads<T> {
    config: HeadsConfig,
    store: ParamStore<T>,
    projector: Vec<Layer>,
    predictor: Vec<Layer>,
    mlap: Vec<Layer>,
}

/// `(fan_in, fan_out, batch_norm, relu)` per layer.
type LayerSpec = (usize, usize, bool, bool);

fn mlp<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut dyn RngCore,
    prefix: &str,
    group: Group,
    specs: &[LayerSpec],
) -> Vec<Layer> {
    specs
        .iter()
        .enumerate()
        .map(|(i, &(fan_in, fan_out, norm, relu))| {
            let bound = (1.0 / fan_in as f64).sqrt();
            let name = |s: &str| format!("{prefix}.{i}.{s}");
            let weight = store.add(&name("weight"), group, uniform(&[fan_out, fan_in], bound, rng));
            let bias = store.add(&name("bias"), group, uniform(&[fan_out], bound, rng));
            let norm = norm.then(|| {
                (
                    store.add(&name("gamma"), group, Tensor::ones(&[fan_out])),
                    store.add(&name("beta"), group, Tensor::zeros(&[fan_out])),
                )
            });
            Layer { weight, bias, norm, relu }
        })
        .collect()
}

fn run<T: Scalar>(g: &mut Graph<T>, b: &Bound<T>, layers: &[Layer], mut x: Var) -> Result<Var> {
    for l in layers {
        x = g.dense(x, b.var(l.weight), Some(b.var(l.bias)))?;
        if let Some((gamma, beta)) = l.norm {
            let mode = BnMode::Train { eps: T::lit(BN_EPS) };
            x = g.batch_norm(x, b.var(gamma), b.var(beta), mode)?.0;
        }
        if l.relu {
            x = g.relu(x);
        }
    }
    Ok(x)
}

impl<T: Scalar> SslHeads<T> {
    pub fn new(config: HeadsConfig, rng: &mut impl RngCore) -> Self {
        let mut store = ParamStore::new();
        let (d, p, h) = (config.feature_dim, config.projection_dim, config.mlap_hidden);
        let (projector, predictor) = match config.kind {
            ContrastiveKind::SimClr { .. } => (
                mlp(&mut store, rng, "projector", Group::Contrastive, &[(d, d, false, true), (d, p, false, false)]),
                Vec::new(),
            ),
            ContrastiveKind::SimSiam => {
                let q = (p / 4).max(1);
                (
                    mlp(
                        &mut store,
                        rng,
                        "projector",
                        Group::Contrastive,
                        &[(d, d, true, true), (d, d, true, true), (d, p, true, false)],
                    ),
                    mlp(&mut store, rng, "predictor", Group::Contrastive, &[(p, q, true, true), (q, p, false, false)]),
                )
            }
        };
        let mlap = mlp(
            &mut store,
            rng,
            "mlap",
            Group::Predictive,
            &[(2 * d, h, false, true), (h, h, false, true), (h, AugmentationKind::COUNT, false, false)],
        );
        SslHeads {
            config,
            store,
            projector,
            predictor,
            mlap,
        }
    }

    pub fn config(&self) -> &HeadsConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn project(&self, g: &mut Graph<T>, b: &Bound<T>, x: Var) -> Result<Var> {
        run(g, b, &self.projector, x)
    }

    /// SimSiam predictor; identity for SimCLR.
    pub fn predict(&self, g: &mut Graph<T>, b: &Bound<T>, z: Var) -> Result<Var> {
        run(g, b, &self.predictor, z)
    }

    /// Augmentation logits `[N, 7]` from the two views' features.
    pub fn mlap_logits(&self, g: &mut Graph<T>, b: &Bound<T>, f1: Var, f2: Var) -> Result<Var> {
        let x = g.concat(&[f1, f2], 1)?;
        run(g, b, &self.mlap, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn head_shapes() {
        for kind in [ContrastiveKind::SimClr { temperature: 0.5 }, ContrastiveKind::SimSiam] {
            let heads: SslHeads<f64> = SslHeads::new(HeadsConfig::new(kind, 12), &mut ChaCha8Rng::seed_from_u64(0));
            let mut g = Graph::new();
            let b = heads.store().bind(&mut g, true);
            let x = g.constant(Tensor::from_fn(&[4, 12], |i| (i as f64).sin()));
            let z = heads.project(&mut g, &b, x).unwrap();
            assert_eq!(g.shape(z), &[4, 128]);
            let p = heads.predict(&mut g, &b, z).unwrap();
            assert_eq!(g.shape(p), &[4, 128]);
            let logits = heads.mlap_logits(&mut g, &b, x, x).unwrap();
            assert_eq!(g.shape(logits), &[4, 7]);
        }
    }

    #[test]
    fn groups_separate_contrastive_and_predictive_heads() {
        let heads: SslHeads<f32> = SslHeads::new(
            HeadsConfig::new(ContrastiveKind::SimSiam, 8),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        for id in heads.store().ids() {
            let name = heads.store().name(id);
            let expect = if name.starts_with("mlap") { Group::Predictive } else { Group::Contrastive };
            assert_eq!(heads.store().group(id), expect, "{name}");
        }
    }
}
