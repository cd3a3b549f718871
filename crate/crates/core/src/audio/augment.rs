use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;

use super::{fft_plan, pitch_shift, time_stretch, Waveform};
use crate::error::{Error, Result};

/// The seven augmentation families, in label order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AugmentationKind {
    PitchShift,
    Fade,
    WhiteNoise,
    MixedNoise,
    TimeMask,
    TimeShift,
    TimeStretch,
}

impl AugmentationKind {
    pub const ALL: [AugmentationKind; 7] = [
        AugmentationKind::PitchShift,
        AugmentationKind::Fade,
        AugmentationKind::WhiteNoise,
        AugmentationKind::MixedNoise,
        AugmentationKind::TimeMask,
        AugmentationKind::TimeShift,
        AugmentationKind::TimeStretch,
    ];

    pub const COUNT: usize = 7;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> &'static str {
        match self {
            AugmentationKind::PitchShift => "PS",
            AugmentationKind::Fade => "FD",
            AugmentationKind::WhiteNoise => "WN",
            AugmentationKind::MixedNoise => "MN",
            AugmentationKind::TimeMask => "TM",
            AugmentationKind::TimeShift => "TS1",
            AugmentationKind::TimeStretch => "TS2",
        }
    }

    pub fn parse(code: &str) -> Result<Self> {
        AugmentationKind::ALL
            .into_iter()
            .find(|k| k.code().eq_ignore_ascii_case(code))
            .ok_or_else(|| {
                Error::arg(format!(
                    "unknown augmentation `{code}` (expected one of PS, FD, WN, MN, TM, TS1, TS2)"
                ))
            })
    }

    pub fn preserves_length(self) -> bool {
        self != AugmentationKind::TimeStretch
    }
}

impl fmt::Display for AugmentationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FadeShape {
    Linear,
    Logarithmic,
    Exponential,
}

impl FadeShape {
    pub const ALL: [FadeShape; 3] = [FadeShape::Linear, FadeShape::Logarithmic, FadeShape::Exponential];

    fn parse(s: &str) -> Result<Self> {
        match s {
            "lin" | "linear" => Ok(FadeShape::Linear),
            "log" | "logarithmic" => Ok(FadeShape::Logarithmic),
            "exp" | "exponential" => Ok(FadeShape::Exponential),
            _ => Err(Error::arg(format!("unknown fade shape `{s}` (lin, log, exp)"))),
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            FadeShape::Linear => "lin",
            FadeShape::Logarithmic => "log",
            FadeShape::Exponential => "exp",
        }
    }

    /// Gain at position `t` in [0, 1] of a fade-in.
    fn fade_in(self, t: f32) -> f32 {
        match self {
            FadeShape::Linear => t,
            FadeShape::Exponential => 2f32.powf((t - 1.0) * 5.0),
            FadeShape::Logarithmic => ((0.1 + t).log10() + 1.0).min(1.0),
        }
    }

    /// Gain at position `t` in [0, 1] of a fade-out.
    fn fade_out(self, t: f32) -> f32 {
        match self {
            FadeShape::Linear => 1.0 - t,
            FadeShape::Exponential => 2f32.powf(-t * 5.0) * (1.0 - t),
            FadeShape::Logarithmic => ((1.1 - t).log10() + 1.0).min(1.0),
        }
    }
}

/// One augmentation together with its drawn parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AugmentationParams {
    PitchShift { semitones: f64 },
    Fade { shape: FadeShape, fade_in: f64, fade_out: f64 },
    WhiteNoise { snr_db: f64, decay: f64 },
    MixedNoise { snr_db: f64, decay: f64 },
    /// Zeroes `ratio * len` samples starting at `start * len`.
    TimeMask { ratio: f64, start: f64 },
    /// Circular shift by `ratio * len` samples.
    TimeShift { ratio: f64 },
    TimeStretch { factor: f64 },
}

const SEMITONES: (f64, f64) = (-15.0, 15.0);
const FADE_RATIO: (f64, f64) = (0.0, 0.5);
const SNR_DB: (f64, f64) = (3.0, 30.0);
const WHITE_DECAY: (f64, f64) = (-1.0, 0.0);
const MIXED_DECAY: (f64, f64) = (-2.0, 2.0);
const MASK_RATIO: (f64, f64) = (0.0, 0.125);
const SHIFT_RATIO: (f64, f64) = (-0.5, 0.5);
const STRETCH: (f64, f64) = (0.5, 1.5);

fn in_range(name: &str, v: f64, (lo, hi): (f64, f64)) -> Result<()> {
    if v.is_finite() && v >= lo && v <= hi {
        Ok(())
    } else {
        Err(Error::arg(format!("{name} = {v} outside [{lo}, {hi}]")))
    }
}

impl AugmentationParams {
    pub fn kind(&self) -> AugmentationKind {
        match self {
            AugmentationParams::PitchShift { .. } => AugmentationKind::PitchShift,
            AugmentationParams::Fade { .. } => AugmentationKind::Fade,
            AugmentationParams::WhiteNoise { .. } => AugmentationKind::WhiteNoise,
            AugmentationParams::MixedNoise { .. } => AugmentationKind::MixedNoise,
            AugmentationParams::TimeMask { .. } => AugmentationKind::TimeMask,
            AugmentationParams::TimeShift { .. } => AugmentationKind::TimeShift,
            AugmentationParams::TimeStretch { .. } => AugmentationKind::TimeStretch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            AugmentationParams::PitchShift { semitones } => in_range("PS semitones", semitones, SEMITONES),
            AugmentationParams::Fade { fade_in, fade_out, .. } => {
                in_range("FD in", fade_in, FADE_RATIO)?;
                in_range("FD out", fade_out, FADE_RATIO)
            }
            AugmentationParams::WhiteNoise { snr_db, decay } => {
                in_range("WN snr", snr_db, SNR_DB)?;
                in_range("WN decay", decay, WHITE_DECAY)
            }
            AugmentationParams::MixedNoise { snr_db, decay } => {
                in_range("MN snr", snr_db, SNR_DB)?;
                in_range("MN decay", decay, MIXED_DECAY)
            }
            AugmentationParams::TimeMask { ratio, start } => {
                in_range("TM ratio", ratio, MASK_RATIO)?;
                in_range("TM start", start, (0.0, 1.0 - ratio))
            }
            AugmentationParams::TimeShift { ratio } => in_range("TS1 ratio", ratio, SHIFT_RATIO),
            AugmentationParams::TimeStretch { factor } => in_range("TS2 factor", factor, STRETCH),
        }
    }

    /// Uniform draw of every parameter of `kind` over its allowed range.
    pub fn sample(kind: AugmentationKind, rng: &mut impl Rng) -> Self {
        let mut u = |(lo, hi): (f64, f64)| rng.gen_range(lo..=hi);
        match kind {
            AugmentationKind::PitchShift => AugmentationParams::PitchShift { semitones: u(SEMITONES) },
            AugmentationKind::Fade => {
                let fade_in = u(FADE_RATIO);
                let fade_out = u(FADE_RATIO);
                let shape = *FadeShape::ALL.choose(rng).expect("non-empty");
                AugmentationParams::Fade { shape, fade_in, fade_out }
            }
            AugmentationKind::WhiteNoise => AugmentationParams::WhiteNoise {
                snr_db: u(SNR_DB),
                decay: u(WHITE_DECAY),
            },
            AugmentationKind::MixedNoise => AugmentationParams::MixedNoise {
                snr_db: u(SNR_DB),
                decay: u(MIXED_DECAY),
            },
            AugmentationKind::TimeMask => {
                let ratio = u(MASK_RATIO);
                let start = u((0.0, 1.0 - ratio));
                AugmentationParams::TimeMask { ratio, start }
            }
            AugmentationKind::TimeShift => AugmentationParams::TimeShift { ratio: u(SHIFT_RATIO) },
            AugmentationKind::TimeStretch => AugmentationParams::TimeStretch { factor: u(STRETCH) },
        }
    }

    /// Parses `KIND[:key=value,...]`. Keys not given are drawn from `rng`.
    ///
    /// Keys: PS `semitones`; FD `shape`, `in`, `out`; WN/MN `snr`, `decay`;
    /// TM `ratio`, `start`; TS1 `ratio`; TS2 `factor`.
    pub fn parse(text: &str, rng: &mut impl Rng) -> Result<Self> {
        let (code, rest) = text.split_once(':').unwrap_or((text, ""));
        let mut p = AugmentationParams::sample(AugmentationKind::parse(code.trim())?, rng);
        for kv in rest.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| Error::arg(format!("expected key=value, got `{kv}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let num = || {
                value
                    .parse::<f64>()
                    .map_err(|_| Error::arg(format!("{code}: `{key}` needs a number, got `{value}`")))
            };
            match (&mut p, key) {
                (AugmentationParams::PitchShift { semitones }, "semitones") => *semitones = num()?,
                (AugmentationParams::Fade { shape, .. }, "shape") => *shape = FadeShape::parse(value)?,
                (AugmentationParams::Fade { fade_in, .. }, "in") => *fade_in = num()?,
                (AugmentationParams::Fade { fade_out, .. }, "out") => *fade_out = num()?,
                (
                    AugmentationParams::WhiteNoise { snr_db, .. } | AugmentationParams::MixedNoise { snr_db, .. },
                    "snr",
                ) => *snr_db = num()?,
                (
                    AugmentationParams::WhiteNoise { decay, .. } | AugmentationParams::MixedNoise { decay, .. },
                    "decay",
                ) => *decay = num()?,
                (AugmentationParams::TimeMask { ratio, start }, "ratio") => {
                    *ratio = num()?;
                    *start = start.min((1.0 - *ratio).max(0.0));
                }
                (AugmentationParams::TimeMask { start, .. }, "start") => *start = num()?,
                (AugmentationParams::TimeShift { ratio }, "ratio") => *ratio = num()?,
                (AugmentationParams::TimeStretch { factor }, "factor") => *factor = num()?,
                _ => return Err(Error::arg(format!("{code} has no parameter `{key}`"))),
            }
        }
        p.validate()?;
        Ok(p)
    }
}

impl fmt::Display for AugmentationParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            AugmentationParams::PitchShift { semitones } => write!(f, "PS:semitones={semitones}"),
            AugmentationParams::Fade { shape, fade_in, fade_out } => {
                write!(f, "FD:shape={},in={fade_in},out={fade_out}", shape.as_str())
            }
            AugmentationParams::WhiteNoise { snr_db, decay } => write!(f, "WN:snr={snr_db},decay={decay}"),
            AugmentationParams::MixedNoise { snr_db, decay } => write!(f, "MN:snr={snr_db},decay={decay}"),
            AugmentationParams::TimeMask { ratio, start } => write!(f, "TM:ratio={ratio},start={start}"),
            AugmentationParams::TimeShift { ratio } => write!(f, "TS1:ratio={ratio}"),
            AugmentationParams::TimeStretch { factor } => write!(f, "TS2:factor={factor}"),
        }
    }
}

/// Gaussian noise with amplitude spectrum proportional to `f^decay`
/// (zero at DC), unit power.
fn colored_noise(len: usize, decay: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..len)
        .map(|_| Complex::new(rng.sample::<f64, _>(StandardNormal), 0.0))
        .collect();
    if len < 2 {
        return vec![0.0; len];
    }
    fft_plan(len, false).process(&mut buf);
    buf[0] = Complex::new(0.0, 0.0);
    for k in 1..len {
        let f = k.min(len - k) as f64;
        buf[k] *= f.powf(decay);
    }
    fft_plan(len, true).process(&mut buf);
    let noise: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let power = noise.iter().map(|v| v * v).sum::<f64>() / len as f64;
    if power <= 0.0 {
        return vec![0.0; len];
    }
    let g = power.sqrt().recip();
    noise.into_iter().map(|v| v * g).collect()
}

fn add_noise(w: &Waveform, snr_db: f64, decay: f64, rng: &mut impl Rng) -> Result<Waveform> {
    let noise = colored_noise(w.len(), decay, rng);
    let signal_power = w.power();
    // target noise power = P_signal / 10^(snr/10); unit-power noise scaled by its root
    let gain = (signal_power / 10f64.powf(snr_db / 10.0)).sqrt();
    let out = w
        .samples()
        .iter()
        .zip(noise)
        .map(|(&s, n)| (s as f64 + gain * n) as f32)
        .collect();
    w.with_samples(out)
}

fn fade(w: &Waveform, shape: FadeShape, fade_in: f64, fade_out: f64) -> Result<Waveform> {
    let len = w.len();
    let n_in = ((fade_in * len as f64).round() as usize).min(len);
    let n_out = ((fade_out * len as f64).round() as usize).min(len);
    let mut s = w.samples().to_vec();
    let pos = |i: usize, n: usize| if n > 1 { i as f32 / (n - 1) as f32 } else { 0.0 };
    for i in 0..n_in {
        s[i] *= shape.fade_in(pos(i, n_in));
    }
    for i in 0..n_out {
        s[len - n_out + i] *= shape.fade_out(pos(i, n_out));
    }
    w.with_samples(s)
}

/// Applies one augmentation. `rng` only feeds the noise generators, so the
/// result is a deterministic function of `(w, params, rng state)`.
pub fn apply_augmentation(w: &Waveform, params: &AugmentationParams, rng: &mut impl Rng) -> Result<Waveform> {
    params.validate()?;
    let len = w.len();
    match *params {
        AugmentationParams::PitchShift { semitones } => pitch_shift(w, semitones),
        AugmentationParams::Fade { shape, fade_in, fade_out } => fade(w, shape, fade_in, fade_out),
        AugmentationParams::WhiteNoise { snr_db, decay } | AugmentationParams::MixedNoise { snr_db, decay } => {
            add_noise(w, snr_db, decay, rng)
        }
        AugmentationParams::TimeMask { ratio, start } => {
            let n = (ratio * len as f64).floor() as usize;
            let from = ((start * len as f64).round() as usize).min(len - n);
            let mut s = w.samples().to_vec();
            s[from..from + n].fill(0.0);
            w.with_samples(s)
        }
        AugmentationParams::TimeShift { ratio } => {
            let shift = (ratio * len as f64).round() as i64;
            let mut s = w.samples().to_vec();
            s.rotate_right(shift.rem_euclid(len as i64) as usize);
            w.with_samples(s)
        }
        AugmentationParams::TimeStretch { factor } => time_stretch(w, factor),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_clip(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.gen_range(-0.5..0.5)).collect(), 16000).unwrap()
    }

    #[test]
    fn seven_kinds_with_distinct_codes() {
        let codes: std::collections::HashSet<_> = AugmentationKind::ALL.iter().map(|k| k.code()).collect();
        assert_eq!(codes.len(), 7);
        for (i, k) in AugmentationKind::ALL.iter().enumerate() {
            assert_eq!(k.index(), i);
            assert_eq!(AugmentationKind::parse(k.code()).unwrap(), *k);
        }
    }

    #[test]
    fn out_of_range_parameters_rejected() {
        let w = noise_clip(4000, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for p in [
            AugmentationParams::PitchShift { semitones: 15.5 },
            AugmentationParams::Fade { shape: FadeShape::Linear, fade_in: 0.6, fade_out: 0.0 },
            AugmentationParams::WhiteNoise { snr_db: 2.0, decay: 0.0 },
            AugmentationParams::WhiteNoise { snr_db: 10.0, decay: 0.5 },
            AugmentationParams::MixedNoise { snr_db: 10.0, decay: -2.5 },
            AugmentationParams::TimeMask { ratio: 0.2, start: 0.0 },
            AugmentationParams::TimeShift { ratio: 0.7 },
            AugmentationParams::TimeStretch { factor: 1.6 },
        ] {
            assert!(apply_augmentation(&w, &p, &mut rng).is_err(), "{p} accepted");
        }
    }

    #[test]
    fn parse_overrides_and_keeps_random_rest() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = AugmentationParams::parse("PS:semitones=4", &mut rng).unwrap();
        assert_eq!(p, AugmentationParams::PitchShift { semitones: 4.0 });
        let p = AugmentationParams::parse("fd:shape=exp,in=0.1", &mut rng).unwrap();
        assert!(matches!(p, AugmentationParams::Fade { shape: FadeShape::Exponential, fade_in, .. } if fade_in == 0.1));
        assert!(AugmentationParams::parse("PS:ratio=1", &mut rng).is_err());
        assert!(AugmentationParams::parse("XX", &mut rng).is_err());
    }

    #[test]
    fn time_shift_rotates() {
        let w = Waveform::new(vec![1.0, 2.0, 3.0, 4.0], 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = apply_augmentation(&w, &AugmentationParams::TimeShift { ratio: 0.25 }, &mut rng).unwrap();
        assert_eq!(out.samples(), &[4.0, 1.0, 2.0, 3.0]);
        let out = apply_augmentation(&w, &AugmentationParams::TimeShift { ratio: -0.5 }, &mut rng).unwrap();
        assert_eq!(out.samples(), &[3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn linear_fade_endpoints() {
        let w = Waveform::new(vec![1.0; 10], 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = AugmentationParams::Fade { shape: FadeShape::Linear, fade_in: 0.5, fade_out: 0.5 };
        let out = apply_augmentation(&w, &p, &mut rng).unwrap();
        assert_eq!(out.samples()[0], 0.0);
        assert_eq!(out.samples()[4], 1.0);
        assert_eq!(out.samples()[9], 0.0);
    }

    #[test]
    fn colored_noise_slope_follows_decay() {
        // average power in a high band relative to a low band scales as (f_hi/f_lo)^(2*decay)
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let len = 1 << 14;
        let n = colored_noise(len, -1.0, &mut rng);
        let mut spec: Vec<Complex<f64>> = n.iter().map(|&v| Complex::new(v, 0.0)).collect();
        rustfft::FftPlanner::new().plan_fft_forward(len).process(&mut spec);
        let band = |lo: usize, hi: usize| spec[lo..hi].iter().map(|c| c.norm_sqr()).sum::<f64>() / (hi - lo) as f64;
        let ratio_db = 10.0 * (band(100, 200) / band(1600, 3200)).log10();
        let expect_db = 20.0 * ((2400.0f64 / 150.0).log10());
        assert!((ratio_db - expect_db).abs() < 1.5, "{ratio_db} vs {expect_db}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn sampled_parameters_are_in_range(seed in any::<u64>(), k in 0usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = AugmentationParams::sample(AugmentationKind::ALL[k], &mut rng);
            prop_assert_eq!(p.kind(), AugmentationKind::ALL[k]);
            prop_assert!(p.validate().is_ok(), "{}", p);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn augmentation_is_deterministic_and_keeps_rate(seed in any::<u64>(), k in 0usize..7) {
            let w = noise_clip(3000, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = AugmentationParams::sample(AugmentationKind::ALL[k], &mut rng);
            let a = apply_augmentation(&w, &p, &mut ChaCha8Rng::seed_from_u64(seed ^ 1)).unwrap();
            let b = apply_augmentation(&w, &p, &mut ChaCha8Rng::seed_from_u64(seed ^ 1)).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.sample_rate(), w.sample_rate());
            if p.kind().preserves_length() {
                prop_assert_eq!(a.len(), w.len());
            }
            prop_assert!(a.samples().iter().all(|v| v.is_finite()));
        }
    }
}
