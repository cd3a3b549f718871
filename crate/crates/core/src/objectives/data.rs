use rayon::prelude::*;

use crate::audio::{
    make_view_pair, random_crop, sample_pipeline, sample_rng, ActivationProbs, AugmentationKind, MelFrontend,
    SpectrogramConfig, Waveform,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Two augmented views per clip plus the shared augmentation labels.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// `[B, 3, mels, frames]`
    pub first: Tensor<T>,
    pub second: Tensor<T>,
    /// `[B, 7]`, 1 where the augmentation was applied.
    pub labels: Tensor<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.first.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Both views stacked along the batch axis, first views on top.
    pub fn joint_input(&self) -> Result<Tensor<T>> {
        let mut shape = self.first.shape().to_vec();
        shape[0] *= 2;
        let mut data = self.first.data().to_vec();
        data.extend_from_slice(self.second.data());
        Tensor::new(&shape, data)
    }
}

/// Turns raw clips into spectrogram view pairs: crop, sample a composition,
/// augment twice, fit to the crop length, convert.
pub struct ViewBatcher {
    frontend: MelFrontend,
    crop_len: usize,
    probs: ActivationProbs,
}

impl ViewBatcher {
    pub fn new(spectrogram: SpectrogramConfig, crop_len: usize, probs: ActivationProbs) -> Result<Self> {
        let frontend = MelFrontend::new(spectrogram)?;
        if crop_len < frontend.config().n_fft {
            return Err(Error::Config(format!(
                "crop of {crop_len} samples is shorter than one fft window ({})",
                frontend.config().n_fft
            )));
        }
        Ok(ViewBatcher {
            frontend,
            crop_len,
            probs,
        })
    }

    pub fn frontend(&self) -> &MelFrontend {
        &self.frontend
    }

    pub fn crop_len(&self) -> usize {
        self.crop_len
    }

    /// Shape of one view tensor.
    pub fn view_shape(&self) -> [usize; 3] {
        let cfg = self.frontend.config();
        [3, cfg.n_mels, cfg.frames(self.crop_len).expect("crop checked against fft size")]
    }

    /// Sample `i` of the batch draws everything from the stream
    /// `(seed, first_index + i)`, so batches do not depend on thread count.
    pub fn batch<T: Scalar>(&self, clips: &[&Waveform], seed: u64, first_index: u64) -> Result<Batch<T>> {
        if clips.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let items: Vec<(Tensor<f32>, Tensor<f32>, [f32; AugmentationKind::COUNT])> = clips
            .par_iter()
            .enumerate()
            .map(|(i, clip)| {
                let mut rng = sample_rng(seed, first_index + i as u64);
                let crop = random_crop(clip, self.crop_len, &mut rng)?;
                let spec = sample_pipeline(&mut rng, &self.probs);
                let pair = make_view_pair(&crop, &spec, &mut rng)?;
                let a = self.frontend.compute(&pair.first.fit_length(self.crop_len)?)?;
                let b = self.frontend.compute(&pair.second.fit_length(self.crop_len)?)?;
                Ok((a, b, pair.labels))
            })
            .collect::<Result<_>>()?;
        let stack = |pick: &dyn Fn(&(Tensor<f32>, Tensor<f32>, [f32; 7])) -> &Tensor<f32>| {
            let parts: Vec<Tensor<T>> = items.iter().map(|it| pick(it).cast()).collect();
            Tensor::stack(&parts)
        };
        let labels = items.iter().flat_map(|it| it.2.map(|v| T::lit(v as f64))).collect();
        Ok(Batch {
            first: stack(&|it| &it.0)?,
            second: stack(&|it| &it.1)?,
            labels: Tensor::new(&[clips.len(), AugmentationKind::COUNT], labels)?,
        })
    }

    /// Un-augmented spectrogram of a fixed-length clip.
    pub fn clean<T: Scalar>(&self, clip: &Waveform) -> Result<Tensor<T>> {
        Ok(self.frontend.compute(&clip.fit_length(self.crop_len)?)?.cast())
    }
}
