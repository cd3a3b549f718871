//! Augmentation invariance of backbone heads, measured as the mean
//! Mahalanobis distance between clean and augmented features.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::audio::{apply_augmentation, sample_rng, AugmentationKind, AugmentationParams, MelFrontend, Waveform};
use crate::error::{Error, Result};
use crate::fewshot::{HeadLayout, LabeledClip};
use crate::model::{HeadId, Model};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Relative ridge added to the covariance diagonal.
pub const RELATIVE_RIDGE: f64 = 1e-4;
const MIN_RIDGE: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct FeatureCovariance {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    epsilon: f64,
    factor: Cholesky<f64, Dyn>,
    samples: usize,
}

fn as_matrix(features: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let dim = features.first().map_or(0, Vec::len);
    if dim == 0 {
        return Err(Error::arg("features are empty"));
    }
    if let Some(r) = features.iter().find(|r| r.len() != dim) {
        return Err(Error::shape("covariance rows", &[dim], &[r.len()]));
    }
    Ok(DMatrix::from_fn(features.len(), dim, |i, j| features[i][j]))
}

/// Unbiased sample covariance of the rows of `features`, factorized with
/// `epsilon * I` added.
pub fn fit_covariance(features: &[Vec<f64>], epsilon: f64) -> Result<FeatureCovariance> {
    if features.len() < 2 {
        return Err(Error::arg(format!("covariance needs at least 2 samples, got {}", features.len())));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::arg(format!("epsilon must be > 0, got {epsilon}")));
    }
    let x = as_matrix(features)?;
    let n = x.nrows();
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, x.ncols(), |i, j| x[(i, j)] - mean[j]);
    let mut cov = centered.tr_mul(&centered) / (n - 1) as f64;
    cov = (&cov + cov.transpose()) * 0.5;
    let mut reg = cov.clone();
    for i in 0..reg.nrows() {
        reg[(i, i)] += epsilon;
    }
    let factor = Cholesky::new(reg).ok_or_else(|| Error::NonFinite("regularized covariance is not positive definite".into()))?;
    Ok(FeatureCovariance {
        mean,
        cov,
        epsilon,
        factor,
        samples: n,
    })
}

/// As [`fit_covariance`] with `epsilon = 1e-4 * trace / dim`, floored at
/// `1e-12`.
pub fn fit_covariance_scaled(features: &[Vec<f64>]) -> Result<FeatureCovariance> {
    let x = as_matrix(features)?;
    if x.nrows() < 2 {
        return Err(Error::arg(format!("covariance needs at least 2 samples, got {}", x.nrows())));
    }
    let n = x.nrows() as f64;
    let trace: f64 = x
        .column_iter()
        .map(|c| {
            let m = c.mean();
            c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
        })
        .sum();
    fit_covariance(features, (RELATIVE_RIDGE * trace / x.ncols() as f64).max(MIN_RIDGE))
}

impl FeatureCovariance {
    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// `(Σ + εI)⁻¹`
    pub fn inverse(&self) -> DMatrix<f64> {
        self.factor.inverse()
    }

    /// `sqrt(dᵀ (Σ + εI)⁻¹ d)` with `d = a - b`, via the Cholesky factor so
    /// the quadratic form is a sum of squares.
    pub fn mahalanobis(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        if a.len() != self.dim() || b.len() != self.dim() {
            return Err(Error::shape("mahalanobis", &[self.dim()], &[a.len(), b.len()]));
        }
        let d = DVector::from_iterator(a.len(), a.iter().zip(b).map(|(x, y)| x - y));
        let y = self
            .factor
            .l_dirty()
            .solve_lower_triangular(&d)
            .ok_or_else(|| Error::NonFinite("singular covariance factor".into()))?;
        Ok(y.norm_squared().max(0.0).sqrt())
    }
}

/// Parameter draws `Φ` for one augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationParamSpace {
    kind: AugmentationKind,
    draws: Vec<AugmentationParams>,
}

impl AugmentationParamSpace {
    pub fn new(kind: AugmentationKind, draws: Vec<AugmentationParams>) -> Result<Self> {
        if draws.is_empty() {
            return Err(Error::arg("parameter space is empty"));
        }
        for d in &draws {
            if d.kind() != kind {
                return Err(Error::arg(format!("draw {d} does not belong to {kind}")));
            }
            d.validate()?;
        }
        Ok(AugmentationParamSpace { kind, draws })
    }

    /// `count` uniform draws from the augmentation's full range.
    pub fn sample(kind: AugmentationKind, count: usize, seed: u64) -> Result<Self> {
        let mut rng = sample_rng(seed, kind.index() as u64);
        Self::new(kind, (0..count).map(|_| AugmentationParams::sample(kind, &mut rng)).collect())
    }

    pub fn kind(&self) -> AugmentationKind {
        self.kind
    }

    pub fn draws(&self) -> &[AugmentationParams] {
        &self.draws
    }
}

/// Features of both heads for a batch of waveforms; Simple models report
/// the shared output for each head.
fn head_features<T: Scalar>(model: &Model<T>, frontend: &MelFrontend, clips: &[Waveform]) -> Result<[Vec<Vec<f64>>; 2]> {
    let specs = clips
        .iter()
        .map(|w| Ok(frontend.compute(w)?.cast::<T>()))
        .collect::<Result<Vec<Tensor<T>>>>()?;
    let feats = model.concat_head_features(&Tensor::stack(&specs)?)?;
    if !feats.is_finite() {
        return Err(Error::NonFinite("backbone features".into()));
    }
    let rows: Vec<Vec<f64>> = feats
        .data()
        .chunks(feats.shape()[1])
        .map(|r| r.iter().map(|v| v.to_f64_lossy()).collect())
        .collect();
    Ok(match HeadLayout::of(model) {
        HeadLayout::Single { .. } => [rows.clone(), rows],
        HeadLayout::Pair { head_dim } => [
            rows.iter().map(|r| r[..head_dim].to_vec()).collect(),
            rows.iter().map(|r| r[head_dim..].to_vec()).collect(),
        ],
    })
}

/// Clips in id order, so stream seeds follow identity rather than position.
fn ordered(clips: &[LabeledClip]) -> Vec<&LabeledClip> {
    let mut v: Vec<&LabeledClip> = clips.iter().collect();
    v.sort_by(|a, b| a.id.cmp(&b.id));
    v
}

/// Per-clip, per-draw distances for every head; draw `j` of clip `i` uses
/// the stream `(seed, i * |Φ| + j)`.
fn pair_distances<T: Scalar>(
    model: &Model<T>,
    frontend: &MelFrontend,
    clips: &[&LabeledClip],
    clean: &[[Vec<f64>; 2]],
    space: &AugmentationParamSpace,
    covs: &[FeatureCovariance; 2],
    seed: u64,
) -> Result<[Vec<f64>; 2]> {
    let phi = space.draws.len();
    let per_clip = clips
        .par_iter()
        .enumerate()
        .map(|(i, clip)| {
            let views = space
                .draws
                .iter()
                .enumerate()
                .map(|(j, p)| {
                    let mut rng = sample_rng(seed, (i * phi + j) as u64);
                    apply_augmentation(&clip.audio, p, &mut rng)?.fit_length(clip.audio.len())
                })
                .collect::<Result<Vec<_>>>()?;
            let feats = head_features(model, frontend, &views)?;
            let mut out = [Vec::with_capacity(phi), Vec::with_capacity(phi)];
            for h in 0..2 {
                for f in &feats[h] {
                    out[h].push(covs[h].mahalanobis(&clean[i][h], f)?);
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut all = [Vec::new(), Vec::new()];
    for [c, p] in per_clip {
        all[0].extend(c);
        all[1].extend(p);
    }
    Ok(all)
}

fn clean_features<T: Scalar>(model: &Model<T>, frontend: &MelFrontend, clips: &[&LabeledClip]) -> Result<Vec<[Vec<f64>; 2]>> {
    clips
        .par_iter()
        .map(|c| {
            let [a, b] = head_features(model, frontend, std::slice::from_ref(&c.audio))?;
            Ok([a.into_iter().next().expect("one row"), b.into_iter().next().expect("one row")])
        })
        .collect()
}

fn fit_head_covariances(clean: &[[Vec<f64>; 2]]) -> Result<[FeatureCovariance; 2]> {
    let head = |h: usize| clean.iter().map(|f| f[h].clone()).collect::<Vec<_>>();
    Ok([fit_covariance_scaled(&head(0))?, fit_covariance_scaled(&head(1))?])
}

/// Covariance of one head's clean features over `clips`, with the scaled
/// ridge used by [`analyze`].
pub fn fit_head_covariance<T: Scalar>(
    model: &Model<T>,
    head: HeadId,
    frontend: &MelFrontend,
    clips: &[LabeledClip],
) -> Result<FeatureCovariance> {
    let clean = clean_features(model, frontend, &ordered(clips))?;
    fit_covariance_scaled(&clean.iter().map(|f| f[head.index()].clone()).collect::<Vec<_>>())
}

/// Mean distance `M` of one head for one parameter space, with `cov`
/// fitted on the same head's clean features.
pub fn invariance_score<T: Scalar>(
    model: &Model<T>,
    head: HeadId,
    frontend: &MelFrontend,
    clips: &[LabeledClip],
    space: &AugmentationParamSpace,
    cov: &FeatureCovariance,
    seed: u64,
) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::Data("no clips to measure invariance on".into()));
    }
    let clips = ordered(clips);
    let clean = clean_features(model, frontend, &clips)?;
    let covs = [cov.clone(), cov.clone()];
    let d = pair_distances(model, frontend, &clips, &clean, space, &covs, seed)?;
    let d = &d[head.index()];
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvarianceRow {
    pub head: HeadId,
    pub augmentation: AugmentationKind,
    pub mean_distance: f64,
    pub n_pairs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvarianceReport {
    pub rows: Vec<InvarianceRow>,
}

impl InvarianceReport {
    /// Mean over augmentations of the per-augmentation scores.
    pub fn head_average(&self, head: HeadId) -> f64 {
        let scores: Vec<f64> = self.rows.iter().filter(|r| r.head == head).map(|r| r.mean_distance).collect();
        scores.iter().sum::<f64>() / scores.len() as f64
    }

    pub fn get(&self, head: HeadId, kind: AugmentationKind) -> Option<&InvarianceRow> {
        self.rows.iter().find(|r| r.head == head && r.augmentation == kind)
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "head,augmentation,mean_distance,n_pairs")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{}", r.head.as_str(), r.augmentation.code(), r.mean_distance, r.n_pairs)?;
        }
        Ok(())
    }
}

/// Full head × augmentation grid with `param_samples` draws each.
pub fn analyze<T: Scalar>(
    model: &Model<T>,
    frontend: &MelFrontend,
    clips: &[LabeledClip],
    param_samples: usize,
    seed: u64,
) -> Result<InvarianceReport> {
    if clips.len() < 2 {
        return Err(Error::Data(format!("invariance analysis needs at least 2 clips, got {}", clips.len())));
    }
    if param_samples == 0 {
        return Err(Error::Config("param samples must be >= 1".into()));
    }
    let clips = ordered(clips);
    let clean = clean_features(model, frontend, &clips)?;
    let covs = fit_head_covariances(&clean)?;
    let mut scores = Vec::new();
    for kind in AugmentationKind::ALL {
        let space = AugmentationParamSpace::sample(kind, param_samples, seed)?;
        let d = pair_distances(model, frontend, &clips, &clean, &space, &covs, seed ^ (kind.index() as u64 + 1) << 32)?;
        scores.push((kind, d));
    }
    let mut rows = Vec::new();
    for head in HeadId::BOTH {
        for (kind, d) in &scores {
            let d = &d[head.index()];
            rows.push(InvarianceRow {
                head,
                augmentation: *kind,
                mean_distance: d.iter().sum::<f64>() / d.len() as f64,
                n_pairs: d.len(),
            });
        }
    }
    Ok(InvarianceReport { rows })
}
