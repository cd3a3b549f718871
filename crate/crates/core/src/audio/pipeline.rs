use rand::seq::SliceRandom;
use rand::Rng;

use super::{apply_augmentation, AugmentationKind, AugmentationParams, Waveform};
use crate::error::{Error, Result};

/// Per-kind Bernoulli activation probabilities, indexed by
/// [`AugmentationKind::index`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActivationProbs([f64; AugmentationKind::COUNT]);

impl ActivationProbs {
    pub fn new(probs: [f64; AugmentationKind::COUNT]) -> Result<Self> {
        for (k, p) in AugmentationKind::ALL.iter().zip(probs) {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::arg(format!("activation probability for {k} = {p} outside [0, 1]")));
            }
        }
        Ok(ActivationProbs(probs))
    }

    pub fn uniform(p: f64) -> Result<Self> {
        ActivationProbs::new([p; AugmentationKind::COUNT])
    }

    pub fn get(&self, kind: AugmentationKind) -> f64 {
        self.0[kind.index()]
    }
}

impl Default for ActivationProbs {
    fn default() -> Self {
        ActivationProbs([0.5; AugmentationKind::COUNT])
    }
}

/// An ordered composition of distinct augmentation kinds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PipelineSpec {
    kinds: Vec<AugmentationKind>,
}

impl PipelineSpec {
    pub fn new(kinds: Vec<AugmentationKind>) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::arg("a pipeline needs at least one augmentation"));
        }
        for (i, k) in kinds.iter().enumerate() {
            if kinds[..i].contains(k) {
                return Err(Error::arg(format!("augmentation {k} appears twice in one pipeline")));
            }
        }
        Ok(PipelineSpec { kinds })
    }

    pub fn kinds(&self) -> &[AugmentationKind] {
        &self.kinds
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    /// Indicator vector over the seven kinds: 1 where the kind is present.
    pub fn labels(&self) -> [f32; AugmentationKind::COUNT] {
        let mut y = [0.0; AugmentationKind::COUNT];
        for k in &self.kinds {
            y[k.index()] = 1.0;
        }
        y
    }
}

/// One kind is chosen uniformly and always applied; every other kind joins
/// with its own Bernoulli probability. The result is shuffled.
pub fn sample_pipeline(rng: &mut impl Rng, probs: &ActivationProbs) -> PipelineSpec {
    let first = *AugmentationKind::ALL.choose(rng).expect("seven kinds");
    let mut kinds = vec![first];
    for k in AugmentationKind::ALL {
        if k != first && rng.gen_bool(probs.get(k)) {
            kinds.push(k);
        }
    }
    kinds.shuffle(rng);
    PipelineSpec { kinds }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub first: Waveform,
    pub second: Waveform,
    /// Shared by both views: which kinds were applied.
    pub labels: [f32; AugmentationKind::COUNT],
    pub first_params: Vec<AugmentationParams>,
    pub second_params: Vec<AugmentationParams>,
}

fn apply_chain(x: &Waveform, spec: &PipelineSpec, rng: &mut impl Rng) -> Result<(Waveform, Vec<AugmentationParams>)> {
    let mut w = x.clone();
    let mut drawn = Vec::with_capacity(spec.len());
    for &k in spec.kinds() {
        let p = AugmentationParams::sample(k, rng);
        w = apply_augmentation(&w, &p, rng)?;
        drawn.push(p);
    }
    Ok((w, drawn))
}

/// Two views through the same composition with independently drawn
/// parameters.
pub fn make_view_pair(x: &Waveform, spec: &PipelineSpec, rng: &mut impl Rng) -> Result<ViewPair> {
    let (first, first_params) = apply_chain(x, spec, rng)?;
    let (second, second_params) = apply_chain(x, spec, rng)?;
    Ok(ViewPair {
        first,
        second,
        labels: spec.labels(),
        first_params,
        second_params,
    })
}

/// Random window of `len` samples; shorter clips are zero-padded.
pub fn random_crop(w: &Waveform, len: usize, rng: &mut impl Rng) -> Result<Waveform> {
    if len == 0 {
        return Err(Error::arg("crop length must be > 0"));
    }
    if w.len() <= len {
        return w.fit_length(len);
    }
    let start = rng.gen_range(0..=w.len() - len);
    w.with_samples(w.samples()[start..start + len].to_vec())
}
