use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::Waveform;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Power below this is clamped before the log.
pub const POWER_FLOOR: f64 = 1e-10;
/// `ln(POWER_FLOOR)`: the value silence maps to.
pub const LOG_FLOOR: f32 = -23.025_85;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowKind {
    Hann,
    Hamming,
}

/// How the three input channels are built from the log-mel image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelMode {
    /// log-mel, first and second temporal differences
    Deltas,
    /// log-mel copied into all three channels
    Repeat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrogramConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub window: WindowKind,
    pub channels: ChannelMode,
    pub f_min: f64,
    /// Defaults to Nyquist when `None`.
    pub f_max: Option<f64>,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        SpectrogramConfig {
            sample_rate: 16000,
            n_fft: 1024,
            hop: 512,
            n_mels: 128,
            window: WindowKind::Hann,
            channels: ChannelMode::Deltas,
            f_min: 0.0,
            f_max: None,
        }
    }
}

impl SpectrogramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::arg("spectrogram sample rate must be > 0"));
        }
        if self.n_fft < 2 || self.hop == 0 || self.hop > self.n_fft {
            return Err(Error::arg(format!(
                "need 0 < hop <= fft size and fft size >= 2, got hop {} fft {}",
                self.hop, self.n_fft
            )));
        }
        if self.n_mels == 0 {
            return Err(Error::arg("mel bins must be >= 1"));
        }
        let f_max = self.f_max();
        if !(self.f_min >= 0.0 && self.f_min < f_max && f_max <= self.sample_rate as f64 / 2.0) {
            return Err(Error::arg(format!("mel range [{}, {f_max}] invalid", self.f_min)));
        }
        Ok(())
    }

    pub fn f_max(&self) -> f64 {
        self.f_max.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    pub fn frames(&self, len: usize) -> Option<usize> {
        (len >= self.n_fft).then(|| (len - self.n_fft) / self.hop + 1)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the mel scale, `n_mels` rows by `n_fft/2+1` bins.
fn filterbank(cfg: &SpectrogramConfig) -> Vec<Vec<f64>> {
    let bins = cfg.n_fft / 2 + 1;
    let (m_lo, m_hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max()));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = bin_hz(k);
                    let up = (f - lo) / (mid - lo);
                    let down = (hi - f) / (hi - mid);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Cached window, FFT plan and filterbank for one configuration.
pub struct MelFrontend {
    cfg: SpectrogramConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    filters: Vec<Vec<f64>>,
}

impl MelFrontend {
    pub fn new(cfg: SpectrogramConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n_fft;
        let window = (0..n)
            .map(|i| {
                let c = (2.0 * PI * i as f64 / n as f64).cos();
                match cfg.window {
                    WindowKind::Hann => 0.5 - 0.5 * c,
                    WindowKind::Hamming => 0.54 - 0.46 * c,
                }
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(n);
        let filters = filterbank(&cfg);
        Ok(MelFrontend {
            cfg,
            window,
            fft,
            filters,
        })
    }

    pub fn config(&self) -> &SpectrogramConfig {
        &self.cfg
    }

    pub fn filters(&self) -> &[Vec<f64>] {
        &self.filters
    }

    /// Natural-log mel energies, `[n_mels][frames]`.
    fn log_mel(&self, w: &Waveform) -> Result<Vec<Vec<f32>>> {
        let cfg = &self.cfg;
        if w.sample_rate() != cfg.sample_rate {
            return Err(Error::arg(format!(
                "waveform at {} Hz, frontend expects {} Hz",
                w.sample_rate(),
                cfg.sample_rate
            )));
        }
        let frames = cfg.frames(w.len()).ok_or_else(|| {
            Error::arg(format!(
                "clip has {} samples; at least {} (one fft window) required",
                w.len(),
                cfg.n_fft
            ))
        })?;
        let bins = cfg.n_fft / 2 + 1;
        let mut out = vec![vec![0.0f32; frames]; cfg.n_mels];
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
        let mut power = vec![0.0f64; bins];
        for t in 0..frames {
            let frame = &w.samples()[t * cfg.hop..t * cfg.hop + cfg.n_fft];
            for ((b, &s), &win) in buf.iter_mut().zip(frame).zip(&self.window) {
                *b = Complex::new(s as f64 * win, 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for (row, filt) in out.iter_mut().zip(&self.filters) {
                let e: f64 = filt.iter().zip(&power).map(|(a, b)| a * b).sum();
                row[t] = e.max(POWER_FLOOR).ln() as f32;
            }
        }
        Ok(out)
    }

    /// `[3, n_mels, frames]` feature map.
    pub fn compute(&self, w: &Waveform) -> Result<Tensor<f32>> {
        let mel = self.log_mel(w)?;
        let (m, t) = (mel.len(), mel[0].len());
        let diff = |x: &[Vec<f32>]| -> Vec<Vec<f32>> {
            x.iter()
                .map(|row| (0..t).map(|i| if i == 0 { 0.0 } else { row[i] - row[i - 1] }).collect())
                .collect()
        };
        let (c1, c2) = match self.cfg.channels {
            ChannelMode::Deltas => {
                let d1 = diff(&mel);
                let d2 = diff(&d1);
                (d1, d2)
            }
            ChannelMode::Repeat => (mel.clone(), mel.clone()),
        };
        let data: Vec<f32> = [mel, c1, c2].into_iter().flatten().flatten().collect();
        Tensor::new(&[3, m, t], data)
    }
}

pub fn to_spectrogram(w: &Waveform, cfg: &SpectrogramConfig) -> Result<Tensor<f32>> {
    MelFrontend::new(cfg.clone())?.compute(w)
}
