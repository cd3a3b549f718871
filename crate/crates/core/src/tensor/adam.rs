use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter Adam moments for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Option<Vec<T>>>,
    second: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        AdamState {
            config,
            step: 0,
            first: vec![None; store.len()],
            second: vec![None; store.len()],
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> Option<&[T]> {
        self.first.get(i).and_then(|m| m.as_deref())
    }

    pub fn second_moment(&self, i: usize) -> Option<&[T]> {
        self.second.get(i).and_then(|m| m.as_deref())
    }
}

/// One bias-corrected Adam update. Parameters whose gradient is `None` are
/// left untouched. Nothing is mutated if any gradient is non-finite.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
) -> Result<()> {
    let cfg = state.config;
    if cfg.lr.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::arg(format!("learning rate must be > 0, got {}", cfg.lr)));
    }
    if grads.len() != store.len() || state.first.len() != store.len() {
        return Err(Error::op(
            "adam_step",
            format!(
                "{} gradients / {} moment slots for {} parameters",
                grads.len(),
                state.first.len(),
                store.len()
            ),
        ));
    }
    for (id, g) in store.ids().zip(grads) {
        let Some(g) = g else { continue };
        if g.shape() != store.get(id).shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: store.get(id).shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !store.is_trainable(id) {
            return Err(Error::op("adam_step", format!("gradient for buffer {}", store.name(id))));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(store.name(id).to_string()));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let one = T::one();
    let corr1 = T::lit(1.0 - cfg.beta1.powi(t));
    let corr2 = T::lit(1.0 - cfg.beta2.powi(t));
    let lr = T::lit(cfg.lr);
    let eps = T::lit(cfg.eps);
    let ids: Vec<_> = store.ids().collect();
    for (id, g) in ids.into_iter().zip(grads) {
        let Some(g) = g else { continue };
        let i = id.index();
        let n = g.len();
        let m = state.first[i].get_or_insert_with(|| vec![T::zero(); n]);
        let v = state.second[i].get_or_insert_with(|| vec![T::zero(); n]);
        let p = store.get_mut(id).data_mut();
        for j in 0..n {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let mh = m[j] / corr1;
            let vh = v[j] / corr2;
            p[j] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}
