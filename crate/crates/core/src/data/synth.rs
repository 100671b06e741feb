//! Seeded synthetic stand-ins for speech sources.
//!
//! Each kind occupies its own part of the 8 kHz band: harmonic tones stay
//! below 2 kHz, chirps sweep 2.2–3.0 kHz, modulated noise sits around 3.5 kHz.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const HARMONIC_CEILING_HZ: f64 = 1900.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SourceKind {
    Harmonic,
    Chirp,
    ModulatedNoise,
}

impl SourceKind {
    pub const ALL: [SourceKind; 3] = [SourceKind::Harmonic, SourceKind::Chirp, SourceKind::ModulatedNoise];

    pub fn name(self) -> &'static str {
        match self {
            SourceKind::Harmonic => "harmonic",
            SourceKind::Chirp => "chirp",
            SourceKind::ModulatedNoise => "modulated-noise",
        }
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "harmonic" => Ok(SourceKind::Harmonic),
            "chirp" => Ok(SourceKind::Chirp),
            "modulated-noise" | "noise" => Ok(SourceKind::ModulatedNoise),
            other => Err(Error::InvalidArgument(format!("unknown source kind `{other}`"))),
        }
    }
}

fn num_samples(duration_s: f64, sample_rate: u32) -> Result<usize> {
    let n = (duration_s * sample_rate as f64).round();
    if !(n >= 1.0) || sample_rate == 0 {
        return Err(Error::InvalidArgument(format!(
            "duration {duration_s} s at {sample_rate} Hz gives no samples"
        )));
    }
    Ok(n as usize)
}

/// Slow syllable-like amplitude envelope.
fn envelope(rng: &mut ChaCha8Rng, n: usize, sr: f64) -> Vec<f64> {
    let rate = rng.random_range(2.0..5.0);
    let phase = rng.random_range(0.0..TAU);
    (0..n)
        .map(|i| 0.6 + 0.4 * (TAU * rate * i as f64 / sr + phase).sin())
        .collect()
}

fn unit_rms(x: Vec<f64>) -> Tensor<f32> {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    let s = if rms > 0.0 { 1.0 / rms } else { 0.0 };
    let n = x.len();
    Tensor::new([1, n], x.into_iter().map(|v| (v * s) as f32).collect()).expect("non-empty")
}

fn harmonic_samples(f0: f64, n: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let vibrato_rate = rng.random_range(3.0..7.0);
    let vibrato_phase = rng.random_range(0.0..TAU);
    let depth = 0.02;
    let count = ((HARMONIC_CEILING_HZ / (f0 * (1.0 + depth))).floor() as usize).max(1);
    let phases: Vec<f64> = (0..count).map(|_| rng.random_range(0.0..TAU)).collect();
    let env = envelope(rng, n, sr);
    let mut base = 0.0f64;
    (0..n)
        .map(|i| {
            let f = f0 * (1.0 + depth * (TAU * vibrato_rate * i as f64 / sr + vibrato_phase).sin());
            base += TAU * f / sr;
            let s: f64 = phases
                .iter()
                .enumerate()
                .map(|(k, p)| ((k + 1) as f64 * base + p).sin() / (k + 1) as f64)
                .sum();
            s * env[i]
        })
        .collect()
}

/// Harmonic tone with fundamental `f0`, partials kept below 1.9 kHz.
pub fn harmonic(f0: f64, duration_s: f64, sample_rate: u32, seed: u64) -> Result<Tensor<f32>> {
    if !(f0 > 0.0) {
        return Err(Error::InvalidArgument(format!("f0 must be positive, got {f0}")));
    }
    let n = num_samples(duration_s, sample_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(unit_rms(harmonic_samples(f0, n, sample_rate as f64, &mut rng)))
}

fn chirp_samples(n: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (lo, hi) = (2200.0, 3000.0);
    let period = rng.random_range(0.15..0.5);
    let offset = rng.random_range(0.0..1.0);
    let env = envelope(rng, n, sr);
    let mut phase = rng.random_range(0.0..TAU);
    (0..n)
        .map(|i| {
            let u = (i as f64 / sr / period + offset).fract();
            let tri = if u < 0.5 { 2.0 * u } else { 2.0 - 2.0 * u };
            phase += TAU * (lo + (hi - lo) * tri) / sr;
            phase.sin() * env[i]
        })
        .collect()
}

/// Band-pass biquad (constant 0 dB peak gain).
fn bandpass(x: &[f64], center: f64, q: f64, sr: f64) -> Vec<f64> {
    let w = TAU * center / sr;
    let alpha = w.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let (b0, b2) = (alpha / a0, -alpha / a0);
    let (a1, a2) = (-2.0 * w.cos() / a0, (1.0 - alpha) / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    x.iter()
        .map(|&v| {
            let y = b0 * v + b2 * x2 - a1 * y1 - a2 * y2;
            x2 = x1;
            x1 = v;
            y2 = y1;
            y1 = y;
            y
        })
        .collect()
}

fn noise_samples(n: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let center = rng.random_range(3300.0..3700.0);
    let white: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let env = envelope(rng, n, sr);
    bandpass(&white, center, 4.0, sr)
        .into_iter()
        .zip(env)
        .map(|(v, e)| v * e)
        .collect()
}

/// A unit-RMS `[1, T]` waveform, fully determined by its arguments.
pub fn synth_source(kind: SourceKind, duration_s: f64, sample_rate: u32, seed: u64) -> Result<Tensor<f32>> {
    let n = num_samples(duration_s, sample_rate)?;
    let sr = sample_rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = match kind {
        SourceKind::Harmonic => {
            let f0 = rng.random_range(100.0..260.0);
            harmonic_samples(f0, n, sr, &mut rng)
        }
        SourceKind::Chirp => chirp_samples(n, sr, &mut rng),
        SourceKind::ModulatedNoise => noise_samples(n, sr, &mut rng),
    };
    Ok(unit_rms(x))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rms(t: &Tensor<f32>) -> f64 {
        (t.sq_norm() / t.len() as f64).sqrt()
    }

    #[test]
    fn same_seed_same_wave() {
        for kind in SourceKind::ALL {
            let a = synth_source(kind, 0.25, 8000, 9).unwrap();
            let b = synth_source(kind, 0.25, 8000, 9).unwrap();
            let c = synth_source(kind, 0.25, 8000, 10).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, c);
            assert!((rms(&a) - 1.0).abs() < 1e-4);
            assert_eq!(a.shape(), &[1, 2000]);
        }
    }

    #[test]
    fn kinds_parse_back() {
        for kind in SourceKind::ALL {
            assert_eq!(kind.name().parse::<SourceKind>().unwrap(), kind);
        }
        assert!("speech".parse::<SourceKind>().is_err());
    }

    #[test]
    fn zero_duration_is_rejected() {
        assert!(synth_source(SourceKind::Chirp, 0.0, 8000, 1).is_err());
    }
}
