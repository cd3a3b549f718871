//! Phase-vocoder time stretching and pitch shifting.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;

use super::{fft_plan, resample_to_len, Waveform};
use crate::error::{Error, Result};

const N_FFT: usize = 2048;
const HOP: usize = N_FFT / 4;

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Centered STFT, frame-major, `n_fft / 2 + 1` bins per frame.
fn stft(x: &[f32], n_fft: usize, hop: usize, window: &[f64]) -> Vec<Vec<Complex<f64>>> {
    let pad = n_fft / 2;
    let mut padded = vec![0.0f64; x.len() + 2 * pad];
    for (i, &v) in x.iter().enumerate() {
        padded[pad + i] = v as f64;
    }
    let frames = 1 + (padded.len() - n_fft) / hop;
    let fft = fft_plan(n_fft, false);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    (0..frames)
        .map(|t| {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(padded[t * hop + j] * window[j], 0.0);
            }
            fft.process(&mut buf);
            buf[..n_fft / 2 + 1].to_vec()
        })
        .collect()
}

/// Weighted overlap-add inverse of [`stft`], trimmed to `len` samples.
fn istft(frames: &[Vec<Complex<f64>>], n_fft: usize, hop: usize, window: &[f64], len: usize) -> Vec<f32> {
    let pad = n_fft / 2;
    let total = n_fft + hop * frames.len().saturating_sub(1);
    let mut out = vec![0.0f64; total];
    let mut norm = vec![0.0f64; total];
    let ifft = fft_plan(n_fft, true);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for (t, frame) in frames.iter().enumerate() {
        buf[..frame.len()].copy_from_slice(frame);
        for k in 1..n_fft - frame.len() + 1 {
            buf[n_fft - k] = frame[k].conj();
        }
        ifft.process(&mut buf);
        for j in 0..n_fft {
            out[t * hop + j] += buf[j].re / n_fft as f64 * window[j];
            norm[t * hop + j] += window[j] * window[j];
        }
    }
    (0..len)
        .map(|i| {
            let k = i + pad;
            match (out.get(k), norm.get(k)) {
                (Some(&v), Some(&w)) if w > 1e-10 => (v / w) as f32,
                (Some(&v), Some(_)) => v as f32,
                _ => 0.0,
            }
        })
        .collect()
}

fn wrap_phase(p: f64) -> f64 {
    p - 2.0 * PI * ((p + PI) / (2.0 * PI)).floor()
}

fn stretch_samples(x: &[f32], rate: f64) -> Vec<f32> {
    let window = hann(N_FFT);
    let spec = stft(x, N_FFT, HOP, &window);
    let bins = N_FFT / 2 + 1;
    let n_frames = spec.len();
    let mags: Vec<Vec<f64>> = spec.iter().map(|f| f.iter().map(|c| c.norm()).collect()).collect();
    let args: Vec<Vec<f64>> = spec.iter().map(|f| f.iter().map(|c| c.arg()).collect()).collect();
    let zero = vec![0.0; bins];
    let mag = |i: usize| mags.get(i).unwrap_or(&zero);
    let arg = |i: usize| args.get(i).unwrap_or(&zero);
    let advance: Vec<f64> = (0..bins).map(|k| PI * HOP as f64 * k as f64 / (bins - 1) as f64).collect();
    let mut phase = args[0].clone();

    let mut out = Vec::new();
    let mut t = 0.0f64;
    while t < n_frames as f64 {
        let i = t.floor() as usize;
        let alpha = t - i as f64;
        let (ma, mb, pa, pb) = (mag(i), mag(i + 1), arg(i), arg(i + 1));
        let col: Vec<Complex<f64>> = (0..bins)
            .map(|k| Complex::from_polar((1.0 - alpha) * ma[k] + alpha * mb[k], phase[k]))
            .collect();
        for k in 0..bins {
            phase[k] += advance[k] + wrap_phase(pb[k] - pa[k] - advance[k]);
        }
        out.push(col);
        t += rate;
    }
    let len = (x.len() as f64 / rate).round() as usize;
    istft(&out, N_FFT, HOP, &window, len.max(1))
}

/// Changes duration by `1 / rate` without changing pitch.
pub fn time_stretch(w: &Waveform, rate: f64) -> Result<Waveform> {
    if !(rate.is_finite() && rate > 0.0) {
        return Err(Error::arg(format!("stretch rate must be positive, got {rate}")));
    }
    w.with_samples(stretch_samples(w.samples(), rate))
}

/// Shifts pitch by `semitones`, keeping the length.
pub fn pitch_shift(w: &Waveform, semitones: f64) -> Result<Waveform> {
    if !semitones.is_finite() {
        return Err(Error::arg("semitones must be finite"));
    }
    let rate = 2f64.powf(-semitones / 12.0);
    let stretched = stretch_samples(w.samples(), rate);
    w.with_samples(resample_to_len(&stretched, w.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chirp(len: usize) -> Waveform {
        let s = (0..len)
            .map(|i| {
                let t = i as f32 / 16000.0;
                0.4 * (2.0 * std::f32::consts::PI * (300.0 + 200.0 * t) * t).sin()
            })
            .collect();
        Waveform::new(s, 16000).unwrap()
    }

    fn snr_db(reference: &[f32], got: &[f32]) -> f64 {
        let sig: f64 = reference.iter().map(|&v| (v as f64).powi(2)).sum();
        let err: f64 = reference.iter().zip(got).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
        10.0 * (sig / err.max(1e-300)).log10()
    }

    #[test]
    fn unit_rate_is_identity() {
        let w = chirp(8000);
        let out = time_stretch(&w, 1.0).unwrap();
        assert_eq!(out.len(), w.len());
        assert!(snr_db(w.samples(), out.samples()) > 60.0);
    }

    #[test]
    fn stretch_length_follows_rate() {
        let w = chirp(16000);
        for rate in [0.5, 0.8, 1.25, 1.5] {
            let out = time_stretch(&w, rate).unwrap();
            let expect = (16000.0 / rate).round() as usize;
            assert_eq!(out.len(), expect);
        }
    }

    #[test]
    fn octave_shift_doubles_dominant_frequency() {
        let rate = 16000;
        let s: Vec<f32> = (0..rate)
            .map(|i| (2.0 * std::f32::consts::PI * 250.0 * i as f32 / rate as f32).sin())
            .collect();
        let w = Waveform::new(s, rate as u32).unwrap();
        let out = pitch_shift(&w, 12.0).unwrap();
        let spec = stft(&out.samples()[4000..12000], 8000, 8000, &hann(8000));
        let peak = spec[0]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
            .unwrap()
            .0;
        // 8000-point frame at 16 kHz: 2 Hz per bin
        assert!((peak as f64 * 2.0 - 500.0).abs() <= 4.0, "peak at {} Hz", peak * 2);
    }
}
