//! Waveforms, WAV IO, the seven augmentations, the stochastic pipeline and
//! the log-mel frontend.

mod augment;
mod pipeline;
mod spectrogram;
mod vocoder;

use std::cell::RefCell;
use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub use augment::{apply_augmentation, AugmentationKind, AugmentationParams, FadeShape};
pub use pipeline::{
    make_view_pair, random_crop, sample_pipeline, ActivationProbs, PipelineSpec, ViewPair,
};
pub use spectrogram::{
    hz_to_mel, mel_to_hz, to_spectrogram, ChannelMode, MelFrontend, SpectrogramConfig, WindowKind,
    LOG_FLOOR, POWER_FLOOR,
};
pub use vocoder::{pitch_shift, time_stretch};

/// Mono audio with its sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::arg("sample rate must be > 0"));
        }
        if samples.is_empty() {
            return Err(Error::arg("waveform must contain at least one sample"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform samples".into()));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Result<Self> {
        Waveform::new(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn power(&self) -> f64 {
        self.samples.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / self.len() as f64
    }

    /// Same rate, new samples. Keeps the non-empty invariant.
    pub(crate) fn with_samples(&self, samples: Vec<f32>) -> Result<Self> {
        Waveform::new(samples, self.sample_rate)
    }

    /// Truncates or zero-pads at the end to exactly `len` samples.
    pub fn fit_length(&self, len: usize) -> Result<Self> {
        let mut s = self.samples.clone();
        s.resize(len, 0.0);
        self.with_samples(s)
    }

    /// Band-limited resampling to `rate`.
    pub fn resample(&self, rate: u32) -> Result<Self> {
        if rate == 0 {
            return Err(Error::arg("target sample rate must be > 0"));
        }
        if rate == self.sample_rate {
            return Ok(self.clone());
        }
        let n = ((self.len() as u64 * rate as u64) as f64 / self.sample_rate as f64).round() as usize;
        Waveform::new(resample_to_len(&self.samples, n.max(1)), rate)
    }
}

/// Distinct lengths kept per thread before the plan cache is dropped.
const PLAN_CACHE_LIMIT: usize = 64;

thread_local! {
    static PLANNER: RefCell<(FftPlanner<f64>, HashSet<(usize, bool)>)> = RefCell::new((FftPlanner::new(), HashSet::new()));
}

/// Per-thread FFT plans, bounded so random resampling lengths cannot grow
/// the cache without limit.
pub(crate) fn fft_plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|cell| {
        let (planner, seen) = &mut *cell.borrow_mut();
        if seen.insert((len, inverse)) && seen.len() > PLAN_CACHE_LIMIT {
            *planner = FftPlanner::new();
            seen.clear();
            seen.insert((len, inverse));
        }
        if inverse {
            planner.plan_fft_inverse(len)
        } else {
            planner.plan_fft_forward(len)
        }
    })
}

/// Fourier-domain resampling of `x` to exactly `m` samples, preserving
/// amplitude of the retained band.
pub(crate) fn resample_to_len(x: &[f32], m: usize) -> Vec<f32> {
    let n = x.len();
    if n == m {
        return x.to_vec();
    }
    let mut spec: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
    fft_plan(n, false).process(&mut spec);

    let mut out = vec![Complex::new(0.0, 0.0); m];
    let keep = n.min(m);
    let half = keep.div_ceil(2);
    for k in 0..half {
        out[k] = spec[k];
        if k > 0 {
            out[m - k] = spec[n - k];
        }
    }
    if keep % 2 == 0 {
        let k = keep / 2;
        if m > n {
            // split the old Nyquist bin across both new half-band bins
            out[k] = spec[k] * 0.5;
            out[m - k] = spec[k] * 0.5;
        } else {
            out[k] = spec[k] + spec[n - k];
        }
    }
    fft_plan(m, true).process(&mut out);
    out.iter().map(|c| (c.re / n as f64) as f32).collect()
}

/// Per-sample RNG stream derived from `(seed, index)`, independent of how
/// work is split across threads.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Reads a WAV file of any bit depth and channel count, averaged to mono.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader.samples::<f32>().collect::<std::result::Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    let ch = spec.channels.max(1) as usize;
    let mono: Vec<f32> = interleaved
        .chunks(ch)
        .map(|frame| frame.iter().sum::<f32>() / ch as f32)
        .collect();
    if mono.is_empty() {
        return Err(Error::Data(format!("{}: no audio samples", path.display())));
    }
    Waveform::new(mono, spec.sample_rate)
}

/// Writes 16-bit PCM mono, clipping to [-1, 1].
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &w.samples {
        writer.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16)?;
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f32, len: usize, rate: u32) -> Vec<f32> {
        (0..len)
            .map(|i| (2.0 * std::f32::consts::PI * freq * i as f32 / rate as f32).sin())
            .collect()
    }

    #[test]
    fn rejects_empty_and_zero_rate() {
        assert!(Waveform::new(vec![], 16000).is_err());
        assert!(Waveform::new(vec![0.0], 0).is_err());
        assert!(Waveform::new(vec![f32::NAN], 16000).is_err());
    }

    #[test]
    fn resample_round_trip_preserves_band_limited_tone() {
        let w = Waveform::new(tone(440.0, 4410, 44100), 44100).unwrap();
        let down = w.resample(16000).unwrap();
        assert_eq!(down.len(), 1600);
        let reference = tone(440.0, 1600, 16000);
        let err: f32 = down.samples().iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err < 1e-3, "max error {err}");
    }

    #[test]
    fn wav_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let w = Waveform::new(tone(300.0, 800, 8000).iter().map(|v| v * 0.5).collect(), 8000).unwrap();
        write_wav(&path, &w).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate(), 8000);
        assert_eq!(back.len(), 800);
        for (a, b) in back.samples().iter().zip(w.samples()) {
            assert!((a - b).abs() < 1.0 / 16000.0);
        }
    }

    #[test]
    fn sample_rng_streams_differ_and_repeat() {
        use rand::Rng;
        let a: u64 = sample_rng(1, 0).gen();
        let b: u64 = sample_rng(1, 1).gen();
        assert_ne!(a, b);
        assert_eq!(a, sample_rng(1, 0).gen::<u64>());
    }
}
