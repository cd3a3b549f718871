//! Bundled synthetic corpora. Tone classes cross five textures with two
//! pitch registers two octaves apart. Each class boundary is one an
//! augmentation can move: register against pitch shift, noise bursts
//! against added noise, pulse rate against time stretch, swells against
//! fades. Waveform shape and glide are per-clip nuisances.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::audio::{sample_rng, Waveform};
use crate::error::{Error, Result};
use crate::fewshot::LabeledClip;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    Steady,
    NoiseBursts,
    SlowPulse,
    FastPulse,
    Swell,
}

impl Texture {
    pub const ALL: [Texture; 5] = [
        Texture::Steady,
        Texture::NoiseBursts,
        Texture::SlowPulse,
        Texture::FastPulse,
        Texture::Swell,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Texture::Steady => "steady",
            Texture::NoiseBursts => "bursts",
            Texture::SlowPulse => "slowpulse",
            Texture::FastPulse => "fastpulse",
            Texture::Swell => "swell",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Register {
    Low,
    High,
}

impl Register {
    /// Fundamental range in Hz.
    pub fn range(self) -> (f64, f64) {
        match self {
            Register::Low => (110.0, 220.0),
            Register::High => (440.0, 880.0),
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Register::Low => "low",
            Register::High => "high",
        }
    }
}

/// The ten tone classes in a fixed order.
pub fn tone_classes() -> Vec<(Texture, Register)> {
    Texture::ALL
        .iter()
        .flat_map(|&t| [(t, Register::Low), (t, Register::High)])
        .collect()
}

pub fn class_label(texture: Texture, register: Register) -> String {
    format!("{}_{}", texture.as_str(), register.as_str())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub clips_per_class: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            clips_per_class: 20,
            duration_s: 1.0,
            sample_rate: 16_000,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn samples(&self) -> Result<usize> {
        let n = (self.duration_s * self.sample_rate as f64).round();
        if !(n >= 1.0) || self.clips_per_class == 0 || self.sample_rate == 0 {
            return Err(Error::Config(format!("synthetic corpus settings produce no audio: {self:?}")));
        }
        Ok(n as usize)
    }
}

const SHAPES: [&[(f64, f64)]; 3] = [
    &[(1.0, 1.0)],
    &[(1.0, 1.0), (3.0, 1.0 / 3.0), (5.0, 1.0 / 5.0), (7.0, 1.0 / 7.0)],
    &[(1.0, 1.0), (2.0, 0.5), (3.0, 1.0 / 3.0), (4.0, 0.25), (5.0, 0.2), (6.0, 1.0 / 6.0)],
];

/// Raised-cosine gate at `rate` Hz.
fn pulse(t: f64, rate: f64, phase: f64) -> f64 {
    (0.5 - 0.5 * (TAU * rate * t + phase).cos()).powi(2)
}

fn tone(texture: Texture, register: Register, n: usize, rate: f64, rng: &mut impl Rng) -> Vec<f32> {
    let (lo, hi) = register.range();
    let f0 = lo * (hi / lo).powf(rng.gen::<f64>());
    let partials = SHAPES[rng.gen_range(0..SHAPES.len())];
    let glide = rng.gen_range(-0.2..0.2);
    let gain = rng.gen_range(0.2..0.6);
    let norm: f64 = partials.iter().map(|&(_, a)| a).sum();
    let phase0: f64 = rng.gen_range(0.0..TAU);
    let gate_phase: f64 = rng.gen_range(0.0..TAU);
    let dur = n as f64 / rate;
    let pulse_rate = match texture {
        Texture::SlowPulse => rng.gen_range(1.5..2.5),
        _ => rng.gen_range(7.0..10.0),
    };
    let decay = rng.gen_range(0.0..0.8);
    let bursts: Vec<(f64, f64)> = (0..rng.gen_range(3..6))
        .map(|_| (rng.gen_range(0.0..dur), rng.gen_range(0.05..0.15)))
        .collect();
    let attack = 0.01;
    (0..n)
        .map(|i| {
            let t = i as f64 / rate;
            let phase = TAU * f0 * (t + glide * t * t / (2.0 * dur)) + phase0;
            let s: f64 = partials.iter().map(|&(k, a)| a * (k * phase).sin()).sum::<f64>() / norm;
            let env = match texture {
                Texture::Steady | Texture::NoiseBursts => (-decay * t).exp(),
                Texture::SlowPulse | Texture::FastPulse => pulse(t, pulse_rate, gate_phase),
                Texture::Swell => (t / dur).powi(2),
            } * (t / attack).min(1.0);
            let hiss: f64 = StandardNormal.sample(rng);
            let burst = if texture == Texture::NoiseBursts && bursts.iter().any(|&(at, len)| t >= at && t < at + len) {
                0.5
            } else {
                0.01
            };
            (gain * (env * s + burst * hiss)).clamp(-1.0, 1.0) as f32
        })
        .collect()
}

/// Ten tone classes, `clips_per_class` each. Clip `j` of class `c` draws
/// from its own stream, so any subset is reproducible on its own.
pub fn tone_corpus(cfg: &SynthConfig) -> Result<Vec<LabeledClip>> {
    let n = cfg.samples()?;
    let mut out = Vec::new();
    for (c, (texture, register)) in tone_classes().into_iter().enumerate() {
        let label = class_label(texture, register);
        for j in 0..cfg.clips_per_class {
            let mut rng = sample_rng(cfg.seed, (c * cfg.clips_per_class + j) as u64);
            let audio = Waveform::new(tone(texture, register, n, cfg.sample_rate as f64, &mut rng), cfg.sample_rate)?;
            out.push(LabeledClip {
                id: format!("{label}_{j:04}"),
                label: label.clone(),
                audio,
            });
        }
    }
    Ok(out)
}

/// `classes` labels of i.i.d. Gaussian noise; labels carry no signal.
pub fn noise_corpus(classes: usize, cfg: &SynthConfig) -> Result<Vec<LabeledClip>> {
    let n = cfg.samples()?;
    let mut out = Vec::new();
    for c in 0..classes {
        for j in 0..cfg.clips_per_class {
            let mut rng = sample_rng(cfg.seed ^ 0x6e6f_6973_65, (c * cfg.clips_per_class + j) as u64);
            let samples = (0..n)
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    0.3 * v as f32
                })
                .collect();
            out.push(LabeledClip {
                id: format!("noise{c:02}_{j:04}"),
                label: format!("noise{c:02}"),
                audio: Waveform::new(samples, cfg.sample_rate)?,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tone_corpus_layout_and_determinism() {
        let cfg = SynthConfig {
            clips_per_class: 3,
            duration_s: 0.25,
            ..Default::default()
        };
        let a = tone_corpus(&cfg).unwrap();
        assert_eq!(a.len(), 30);
        assert_eq!(a[0].label, "steady_low");
        assert_eq!(a[29].label, "swell_high");
        assert!(a.iter().all(|c| c.audio.len() == 4000 && c.audio.samples().iter().all(|v| v.abs() <= 1.0)));
        let b = tone_corpus(&cfg).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.audio == y.audio && x.id == y.id));
        let labels: std::collections::BTreeSet<_> = a.iter().map(|c| c.label.clone()).collect();
        assert_eq!(labels.len(), 10);
    }

    #[test]
    fn noise_corpus_is_labeled_noise() {
        let cfg = SynthConfig {
            clips_per_class: 2,
            duration_s: 0.1,
            ..Default::default()
        };
        let c = noise_corpus(10, &cfg).unwrap();
        assert_eq!(c.len(), 20);
        assert!((c[0].audio.power() - 0.09).abs() < 0.02);
    }
}
