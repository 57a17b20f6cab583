//! Synthetic keyword surrogate: each class is a parametric sound (chirps,
//! tones, harmonic stacks, modulated tones) with per-clip jitter in onset,
//! duration, pitch and level, plus white noise.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledClip, Origin, Splits, CLIP_LEN};
use crate::error::{Error, Result};
use crate::frontend::wav::SAMPLE_RATE;
use crate::seed;

pub const CLASS_NAMES: [&str; 12] = [
    "rise", "fall", "harmonic", "am", "tone_low", "tone_high", "fm", "dual", "pulses", "bass", "vee", "peak",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct Jitter {
    pub onset: f64,
    pub duration: f64,
    pub pitch: f64,
    pub amplitude: f64,
}

impl Jitter {
    pub const NOMINAL: Jitter = Jitter {
        onset: 0.2,
        duration: 0.6,
        pitch: 1.0,
        amplitude: 0.5,
    };
}

fn chirp_phase(f0: f64, f1: f64, tau: f64, d: f64) -> f64 {
    2.0 * PI * (f0 * tau + (f1 - f0) * tau * tau / (2.0 * d))
}

/// Piecewise-linear sweep through `points` spread evenly over `d` seconds.
fn sweep_phase(points: &[f64], tau: f64, d: f64) -> f64 {
    let seg = d / (points.len() - 1) as f64;
    let mut phase = 0.0;
    for (i, w) in points.windows(2).enumerate() {
        let start = i as f64 * seg;
        if tau <= start {
            break;
        }
        let local = (tau - start).min(seg);
        phase += chirp_phase(w[0], w[1], local, seg);
    }
    phase
}

/// Sample of class `class` at time `tau` seconds after onset (duration `d`,
/// pitch factor `p`), before envelope and gain.
fn voice(class: usize, tau: f64, d: f64, p: f64) -> f64 {
    let tone = |f: f64| (2.0 * PI * f * p * tau).sin();
    match class {
        0 => sweep_phase(&[300.0 * p, 3000.0 * p], tau, d).sin(),
        1 => sweep_phase(&[3000.0 * p, 300.0 * p], tau, d).sin(),
        2 => (1..=6).map(|k| tone(220.0 * k as f64) / k as f64).sum::<f64>() / 2.45,
        3 => tone(1000.0) * (0.5 + 0.5 * (2.0 * PI * 8.0 * tau).sin()),
        4 => tone(500.0),
        5 => tone(2500.0),
        6 => {
            let (fc, dev, rate) = (1500.0 * p, 400.0 * p, 4.0);
            (2.0 * PI * fc * tau - dev / rate * ((2.0 * PI * rate * tau).cos() - 1.0)).sin()
        }
        7 => 0.5 * (tone(700.0) + tone(1900.0)),
        8 => {
            if (tau % 0.15) < 0.05 {
                tone(1200.0)
            } else {
                0.0
            }
        }
        9 => (1..=8).map(|k| tone(110.0 * k as f64) / k as f64).sum::<f64>() / 2.72,
        10 => sweep_phase(&[2500.0 * p, 600.0 * p, 2500.0 * p], tau, d).sin(),
        _ => sweep_phase(&[600.0 * p, 2500.0 * p, 600.0 * p], tau, d).sin(),
    }
}

/// Noise-free one-second rendering of a class template.
pub fn render(class: usize, j: &Jitter) -> Vec<f32> {
    let fs = SAMPLE_RATE as f64;
    let fade = 0.02;
    (0..CLIP_LEN)
        .map(|i| {
            let tau = i as f64 / fs - j.onset;
            if tau < 0.0 || tau > j.duration {
                return 0.0;
            }
            let edge = (tau.min(j.duration - tau) / fade).min(1.0);
            let env = 0.5 - 0.5 * (PI * edge).cos();
            (j.amplitude * env * voice(class, tau, j.duration, j.pitch)) as f32
        })
        .collect()
}

fn clip(class: usize, index: usize, seed: u64) -> LabeledClip {
    let mut rng = seed::stream(seed, seed::SYNTH, ((class as u64) << 24) | index as u64);
    let duration = rng.gen_range(0.5..0.7);
    let j = Jitter {
        onset: rng.gen_range(0.05..(0.95 - duration)),
        duration,
        pitch: rng.gen_range(0.95..1.05),
        amplitude: rng.gen_range(0.3..0.6),
    };
    let noise_std = rng.gen_range(0.005..0.03);
    let wave = render(class, &j)
        .into_iter()
        .map(|v| {
            // Irwin-Hall approximation of a unit normal
            let n: f64 = (0..12).map(|_| rng.gen::<f64>()).sum::<f64>() - 6.0;
            (v as f64 + noise_std * n).clamp(-1.0, 32767.0 / 32768.0) as f32
        })
        .collect();
    LabeledClip {
        wave,
        label: class,
        origin: Origin::Synthetic { class, index },
    }
}

/// Split sizes for `n` clips of one class: 70 / 15 / 15.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (0.7 * n as f64).round() as usize;
    let valid = ((0.15 * n as f64).round() as usize).min(n - train);
    (train, valid, n - train - valid)
}

pub fn synth_dataset(n_classes: usize, n_per_class: usize, seed: u64) -> Result<Splits> {
    if !(2..=CLASS_NAMES.len()).contains(&n_classes) {
        return Err(Error::Config(format!(
            "synthetic task supports 2..=12 classes (got {n_classes})"
        )));
    }
    if n_per_class < 3 {
        return Err(Error::Config("synthetic task needs at least 3 clips per class".into()));
    }
    let (n_train, n_valid, _) = split_sizes(n_per_class);
    let mut out = Splits {
        class_names: CLASS_NAMES[..n_classes].iter().map(|s| s.to_string()).collect(),
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        noise: Vec::new(),
    };
    for class in 0..n_classes {
        for index in 0..n_per_class {
            let c = clip(class, index, seed);
            if index < n_train {
                out.train.push(c);
            } else if index < n_train + n_valid {
                out.valid.push(c);
            } else {
                out.test.push(c);
            }
        }
    }
    let mut rng = seed::stream(seed, seed::SYNTH, u64::MAX >> 16);
    out.noise = (0..2)
        .map(|_| (0..2 * CLIP_LEN).map(|_| rng.gen_range(-0.5f32..0.5)).collect())
        .collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let a = synth_dataset(3, 6, 4).unwrap();
        let b = synth_dataset(3, 6, 4).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.noise, b.noise);
        assert_ne!(a.train, synth_dataset(3, 6, 5).unwrap().train);
    }

    #[test]
    fn splits_follow_proportions() {
        let d = synth_dataset(4, 20, 1).unwrap();
        assert_eq!(d.train.len(), 4 * 14);
        assert_eq!(d.valid.len(), 4 * 3);
        assert_eq!(d.test.len(), 4 * 3);
    }

    #[test]
    fn waves_are_bounded() {
        let d = synth_dataset(12, 3, 2).unwrap();
        for c in d.train.iter().chain(&d.valid).chain(&d.test) {
            assert_eq!(c.wave.len(), CLIP_LEN);
            assert!(c.wave.iter().all(|v| v.is_finite() && (-1.0..1.0).contains(v)));
        }
    }

    #[test]
    fn class_count_checked() {
        assert!(synth_dataset(1, 10, 0).is_err());
        assert!(synth_dataset(13, 10, 0).is_err());
    }
}
