use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Dimensions with a support spread below this are treated as constant.
const MIN_STD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearConfig {
    pub l2: f64,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for LinearConfig {
    fn default() -> Self {
        LinearConfig {
            l2: 1e-4,
            epochs: 100,
            lr: 0.01,
        }
    }
}

impl LinearConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.l2 >= 0.0 && self.l2.is_finite()) || self.epochs == 0 {
            return Err(Error::Config(format!(
                "linear probe needs lr > 0, l2 >= 0 and epochs >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Multinomial logistic regression on standardized features, each scaled
/// by `1 / sqrt(dim)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    mean: Vec<f64>,
    /// `1 / (std * sqrt(dim))`, or 0 for constant dimensions.
    inv_std: Vec<f64>,
    /// `[classes, dim]`, row-major.
    weights: Vec<f64>,
    bias: Vec<f64>,
    degenerate: bool,
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

impl LinearClassifier {
    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// True when every support dimension was constant; such a classifier
    /// only reflects class priors.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// Builds a classifier directly from weights, with identity scaling.
    pub fn from_weights(classes: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if classes == 0 || bias.len() != classes || weights.len() % classes != 0 {
            return Err(Error::arg(format!(
                "{} weights and {} biases do not form a {classes}-class classifier",
                weights.len(),
                bias.len()
            )));
        }
        let dim = weights.len() / classes;
        Ok(LinearClassifier {
            mean: vec![0.0; dim],
            inv_std: vec![1.0; dim],
            weights,
            bias,
            degenerate: false,
        })
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.inv_std)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    fn logits(&self, z: &[f64]) -> Vec<f64> {
        self.weights
            .chunks(self.dim().max(1))
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(z).map(|(a, c)| a * c).sum::<f64>())
            .collect()
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::shape("predict_proba", &[self.dim()], &[x.len()]));
        }
        let mut p = self.logits(&self.standardize(x));
        softmax_in_place(&mut p);
        Ok(p)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.predict_proba(x)?))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-sample SGD on the softmax log-loss with L2 decay, zero init,
/// a fresh shuffle each epoch.
pub fn fit_linear(x: &[Vec<f64>], y: &[usize], classes: usize, cfg: &LinearConfig, seed: u64) -> Result<LinearClassifier> {
    cfg.validate()?;
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::arg(format!("{} feature rows for {} labels", x.len(), y.len())));
    }
    let dim = x[0].len();
    if let Some(r) = x.iter().position(|r| r.len() != dim) {
        return Err(Error::shape("fit_linear row", &[dim], &[x[r].len()]));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
        return Err(Error::arg(format!("label {bad} out of range for {classes} classes")));
    }
    let n = x.len() as f64;
    // Dividing by sqrt(dim) keeps the per-step logit change independent of
    // the feature count, so duplicated dimensions train identically.
    let dim_scale = 1.0 / (dim as f64).sqrt();
    let mean: Vec<f64> = (0..dim).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let inv_std: Vec<f64> = (0..dim)
        .map(|j| {
            let var = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            if sd > MIN_STD { dim_scale / sd } else { 0.0 }
        })
        .collect();
    let mut clf = LinearClassifier {
        degenerate: inv_std.iter().all(|&s| s == 0.0),
        mean,
        inv_std,
        weights: vec![0.0; classes * dim],
        bias: vec![0.0; classes],
    };
    if clf.degenerate {
        // Nothing to separate on: score classes by support frequency.
        for &c in y {
            clf.bias[c] += 1.0 / n;
        }
        return Ok(clf);
    }
    let z: Vec<Vec<f64>> = x.iter().map(|r| clf.standardize(r)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..z.len()).collect();
    let decay = 1.0 - cfg.lr * cfg.l2;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let mut p = clf.logits(&z[i]);
            softmax_in_place(&mut p);
            p[y[i]] -= 1.0;
            for (c, err) in p.iter().enumerate() {
                let row = &mut clf.weights[c * dim..(c + 1) * dim];
                for (w, v) in row.iter_mut().zip(&z[i]) {
                    *w = decay * *w - cfg.lr * err * v;
                }
                clf.bias[c] -= cfg.lr * err;
            }
        }
    }
    if clf.weights.iter().chain(&clf.bias).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("linear probe weights".into()));
    }
    Ok(clf)
}

/// Majority vote over segment predictions; ties go to the class with the
/// larger summed probability, then to the lower index.
pub fn classify_clip(clf: &LinearClassifier, segments: &[Vec<f64>]) -> Result<usize> {
    if segments.is_empty() {
        return Err(Error::arg("clip has no segments"));
    }
    let probs = segments.iter().map(|s| clf.predict_proba(s)).collect::<Result<Vec<_>>>()?;
    vote(&probs)
}

pub(crate) fn vote(probs: &[Vec<f64>]) -> Result<usize> {
    let classes = probs.first().map_or(0, Vec::len);
    if classes == 0 {
        return Err(Error::arg("no class probabilities to vote on"));
    }
    let mut votes = vec![0usize; classes];
    let mut mass = vec![0.0; classes];
    for p in probs {
        votes[argmax(p)] += 1;
        for (m, v) in mass.iter_mut().zip(p) {
            *m += v;
        }
    }
    let top = *votes.iter().max().expect("non-empty");
    let mut best: Option<usize> = None;
    for c in (0..classes).filter(|&c| votes[c] == top) {
        if best.is_none_or(|b| mass[c] > mass[b]) {
            best = Some(c);
        }
    }
    Ok(best.expect("at least one class has the top vote"))
}
