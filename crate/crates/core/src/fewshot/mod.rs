//! Episodic N-way K-shot evaluation of frozen features.

mod episode;
mod linear;

use rand::RngCore;
use rayon::prelude::*;

use crate::audio::{sample_rng, MelFrontend, Waveform};
use crate::error::{Error, Result};
use crate::model::{Model, Variant};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use episode::{sample_episode, ClassIndex, Episode};
pub use linear::{classify_clip, fit_linear, LinearClassifier, LinearConfig};

/// How a feature vector splits into backbone heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadLayout {
    Single { dim: usize },
    /// Contrastive block first, then predictive, `head_dim` each.
    Pair { head_dim: usize },
}

impl HeadLayout {
    pub fn of<T: Scalar>(model: &Model<T>) -> Self {
        if model.variant() == Variant::Simple {
            HeadLayout::Single { dim: model.concat_dim() }
        } else {
            HeadLayout::Pair { head_dim: model.head_dim() }
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            HeadLayout::Single { dim } => dim,
            HeadLayout::Pair { head_dim } => 2 * head_dim,
        }
    }
}

/// Mean absolute classifier weight per head block, normalized to sum to 1.
/// Returns `[contrastive, predictive]`.
pub fn head_weight_norms(clf: &LinearClassifier, layout: HeadLayout) -> Result<[f64; 2]> {
    let HeadLayout::Pair { head_dim } = layout else {
        return Err(Error::arg("head weight analysis needs a two-head model"));
    };
    if clf.dim() != 2 * head_dim || head_dim == 0 {
        return Err(Error::shape("head_weight_norms", &[2 * head_dim], &[clf.dim()]));
    }
    let mut sums = [0.0; 2];
    for row in clf.weights().chunks(clf.dim()) {
        for (h, block) in row.chunks(head_dim).enumerate() {
            sums[h] += block.iter().map(|w| w.abs()).sum::<f64>();
        }
    }
    let total = sums[0] + sums[1];
    if !(total > 0.0) {
        return Err(Error::NonFinite("classifier weights are all zero".into()));
    }
    Ok(sums.map(|s| s / total))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub id: String,
    pub label: String,
    /// One feature vector per fixed-length segment.
    pub segments: Vec<Vec<f64>>,
}

/// Frozen features of a labeled corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    entries: Vec<BankEntry>,
    layout: HeadLayout,
}

impl FeatureBank {
    pub fn new(entries: Vec<BankEntry>, layout: HeadLayout) -> Result<Self> {
        let dim = layout.dim();
        for e in &entries {
            if e.segments.is_empty() {
                return Err(Error::Data(format!("clip '{}' has no feature segments", e.id)));
            }
            if let Some(s) = e.segments.iter().find(|s| s.len() != dim) {
                return Err(Error::shape("feature bank entry", &[dim], &[s.len()]));
            }
        }
        Ok(FeatureBank { entries, layout })
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn layout(&self) -> HeadLayout {
        self.layout
    }

    pub fn class_index(&self) -> ClassIndex {
        ClassIndex::new(self.entries.iter().map(|e| (e.id.as_str(), e.label.as_str())))
    }
}

pub struct LabeledClip {
    pub id: String,
    pub label: String,
    pub audio: Waveform,
}

/// Splits clips into fixed-length segments and embeds them with a frozen
/// backbone.
pub struct FeatureExtractor<'a> {
    frontend: &'a MelFrontend,
    segment_len: usize,
}

impl<'a> FeatureExtractor<'a> {
    pub fn new(frontend: &'a MelFrontend, segment_len: usize) -> Result<Self> {
        if segment_len < frontend.config().n_fft {
            return Err(Error::Config(format!(
                "segment of {segment_len} samples is shorter than one fft window ({})",
                frontend.config().n_fft
            )));
        }
        Ok(FeatureExtractor { frontend, segment_len })
    }

    /// `ceil(len / segment_len)` vectors, the last segment zero-padded.
    pub fn extract<T: Scalar>(&self, model: &Model<T>, clip: &Waveform) -> Result<Vec<Vec<f64>>> {
        if clip.is_empty() {
            return Err(Error::arg("cannot embed an empty clip"));
        }
        let specs = clip
            .samples()
            .chunks(self.segment_len)
            .map(|seg| {
                let mut s = seg.to_vec();
                s.resize(self.segment_len, 0.0);
                Ok(self.frontend.compute(&Waveform::new(s, clip.sample_rate())?)?.cast::<T>())
            })
            .collect::<Result<Vec<Tensor<T>>>>()?;
        let feats = model.concat_head_features(&Tensor::stack(&specs)?)?;
        if !feats.is_finite() {
            return Err(Error::NonFinite("backbone features".into()));
        }
        let dim = feats.shape()[1];
        Ok(feats.data().chunks(dim).map(|r| r.iter().map(|v| v.to_f64_lossy()).collect()).collect())
    }

    pub fn bank<T: Scalar>(&self, model: &Model<T>, clips: &[LabeledClip]) -> Result<FeatureBank> {
        let entries = clips
            .par_iter()
            .map(|c| {
                Ok(BankEntry {
                    id: c.id.clone(),
                    label: c.label.clone(),
                    segments: self.extract(model, &c.audio)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        FeatureBank::new(entries, HeadLayout::of(model))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub queries: usize,
    pub tasks: usize,
    pub seed: u64,
    pub linear: LinearConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_way: 5,
            k_shot: 1,
            queries: 5,
            tasks: 10_000,
            seed: 0,
            linear: LinearConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mean: f64,
    pub ci95: f64,
    pub tasks: usize,
    pub accuracies: Vec<f64>,
    /// Task-averaged `[contrastive, predictive]`; `None` for one head.
    pub head_weights: Option<[f64; 2]>,
    /// Tasks whose support features were all constant.
    pub degenerate_tasks: usize,
}

/// `1.96 * std / sqrt(T)` with the population standard deviation.
pub fn ci95_half_width(accuracies: &[f64]) -> f64 {
    let t = accuracies.len() as f64;
    if accuracies.len() < 2 {
        return 0.0;
    }
    let mean = accuracies.iter().sum::<f64>() / t;
    let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / t;
    1.96 * var.sqrt() / t.sqrt()
}

struct TaskOutcome {
    accuracy: f64,
    head_weights: Option<[f64; 2]>,
    degenerate: bool,
}

fn run_task(bank: &FeatureBank, index: &ClassIndex, cfg: &EvalConfig, task: usize) -> Result<TaskOutcome> {
    let mut rng = sample_rng(cfg.seed, task as u64);
    let ep = sample_episode(index, cfg.n_way, cfg.k_shot, cfg.queries, &mut rng)?;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for &(pos, class) in &ep.support {
        for seg in &bank.entries[pos].segments {
            x.push(seg.clone());
            y.push(class);
        }
    }
    let clf = fit_linear(&x, &y, cfg.n_way, &cfg.linear, rng.next_u64())?;
    let mut correct = 0usize;
    for &(pos, class) in &ep.query {
        correct += (classify_clip(&clf, &bank.entries[pos].segments)? == class) as usize;
    }
    let head_weights = match bank.layout {
        HeadLayout::Pair { .. } if !clf.is_degenerate() => head_weight_norms(&clf, bank.layout).ok(),
        _ => None,
    };
    Ok(TaskOutcome {
        accuracy: correct as f64 / ep.query.len() as f64,
        head_weights,
        degenerate: clf.is_degenerate(),
    })
}

/// Mean query accuracy over `cfg.tasks` independent episodes. Task `t`
/// draws from the stream `(seed, t)`, so the result does not depend on
/// entry order or thread count.
pub fn evaluate_features(bank: &FeatureBank, cfg: &EvalConfig) -> Result<EvalReport> {
    if cfg.tasks == 0 {
        return Err(Error::Config("tasks must be >= 1".into()));
    }
    cfg.linear.validate()?;
    let index = bank.class_index();
    index.check(cfg.n_way, cfg.k_shot, cfg.queries)?;
    let outcomes = (0..cfg.tasks)
        .into_par_iter()
        .map(|t| run_task(bank, &index, cfg, t))
        .collect::<Result<Vec<_>>>()?;
    let accuracies: Vec<f64> = outcomes.iter().map(|o| o.accuracy).collect();
    let weighed: Vec<[f64; 2]> = outcomes.iter().filter_map(|o| o.head_weights).collect();
    let head_weights = (!weighed.is_empty()).then(|| {
        let n = weighed.len() as f64;
        let c = weighed.iter().map(|w| w[0]).sum::<f64>() / n;
        [c, 1.0 - c]
    });
    Ok(EvalReport {
        mean: accuracies.iter().sum::<f64>() / accuracies.len() as f64,
        ci95: ci95_half_width(&accuracies),
        tasks: cfg.tasks,
        head_weights,
        degenerate_tasks: outcomes.iter().filter(|o| o.degenerate).count(),
        accuracies,
    })
}

pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    extractor: &FeatureExtractor<'_>,
    clips: &[LabeledClip],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    evaluate_features(&extractor.bank(model, clips)?, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_norms_examples() {
        let equal = LinearClassifier::from_weights(2, vec![0.3; 8], vec![0.0; 2]).unwrap();
        assert_eq!(head_weight_norms(&equal, HeadLayout::Pair { head_dim: 2 }).unwrap(), [0.5, 0.5]);
        let w = vec![0.0, 0.0, 1.0, -2.0, 0.0, 0.0, 0.5, 0.5];
        let zero_c = LinearClassifier::from_weights(2, w, vec![0.0; 2]).unwrap();
        assert_eq!(head_weight_norms(&zero_c, HeadLayout::Pair { head_dim: 2 }).unwrap(), [0.0, 1.0]);
        let w = vec![0.43, 0.57];
        let table = LinearClassifier::from_weights(1, w, vec![0.0]).unwrap();
        let [c, p] = head_weight_norms(&table, HeadLayout::Pair { head_dim: 1 }).unwrap();
        assert!((c - 0.43).abs() < 1e-12 && (p - 0.57).abs() < 1e-12);
        assert!(head_weight_norms(&equal, HeadLayout::Single { dim: 4 }).is_err());
    }

    #[test]
    fn ci_of_single_task_is_zero() {
        assert_eq!(ci95_half_width(&[0.4]), 0.0);
        let acc = [0.2, 0.4, 0.6];
        let sd = (((0.2f64 - 0.4).powi(2) * 2.0) / 3.0).sqrt();
        assert!((ci95_half_width(&acc) - 1.96 * sd / 3f64.sqrt()).abs() < 1e-15);
    }
}
