use rand::Rng;
use serde::{Deserialize, Serialize};

/// Largest sample value representable by 16-bit PCM after normalization.
pub const MAX_SAMPLE: f32 = 32767.0 / 32768.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoisePolicy {
    /// Chance that a clip gets a background-noise slice mixed in.
    pub probability: f64,
    /// Noise gain is drawn uniformly from `[0, max_volume]`.
    pub max_volume: f64,
}

impl Default for NoisePolicy {
    fn default() -> Self {
        Self {
            probability: 0.8,
            max_volume: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub shift_ms: f64,
    pub noise: Option<NoisePolicy>,
}

/// Shifts by `samples` (positive moves content later), filling with zeros.
pub fn time_shift(wave: &[f32], samples: isize) -> Vec<f32> {
    let n = wave.len() as isize;
    (0..n)
        .map(|i| {
            let src = i - samples;
            if (0..n).contains(&src) {
                wave[src as usize]
            } else {
                0.0
            }
        })
        .collect()
}

/// Random time shift followed by optional background-noise mixing. Output is
/// clipped to the 16-bit PCM range.
pub fn augment<R: Rng>(
    wave: &[f32],
    rng: &mut R,
    shift_ms: f64,
    sample_rate: u32,
    noise_pool: &[Vec<f32>],
    noise: Option<&NoisePolicy>,
) -> Vec<f32> {
    let max_shift = (shift_ms * sample_rate as f64 / 1000.0).round() as isize;
    let mut out = if max_shift > 0 {
        time_shift(wave, rng.gen_range(-max_shift..=max_shift))
    } else {
        wave.to_vec()
    };
    if let Some(policy) = noise {
        if !noise_pool.is_empty() && rng.gen_bool(policy.probability.clamp(0.0, 1.0)) {
            let clip = &noise_pool[rng.gen_range(0..noise_pool.len())];
            if clip.len() >= out.len() {
                let offset = rng.gen_range(0..=clip.len() - out.len());
                let gain = rng.gen::<f64>() * policy.max_volume;
                for (o, &n) in out.iter_mut().zip(&clip[offset..]) {
                    *o += (gain * n as f64) as f32;
                }
            }
        }
    }
    for v in &mut out {
        *v = v.clamp(-1.0, MAX_SAMPLE);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn no_shift_no_noise_is_identity() {
        let wave: Vec<f32> = (0..1000).map(|i| ((i % 17) as f32 - 8.0) / 10.0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment(&wave, &mut rng, 0.0, 16_000, &[], None), wave);
    }

    #[test]
    fn impulse_moves_by_shift() {
        let mut wave = vec![0.0; 16_000];
        wave[0] = 1.0;
        let out = time_shift(&wave, 1600);
        assert_eq!(out[1600], 1.0);
        assert_eq!(out.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let wave: Vec<f32> = (0..16_000).map(|i| (i as f32 * 0.01).sin() * 0.5).collect();
        let noise = vec![(0..32_000).map(|i| ((i * 7919 % 1000) as f32 / 500.0) - 1.0).collect::<Vec<_>>()];
        let policy = NoisePolicy::default();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            augment(&wave, &mut rng, 100.0, 16_000, &noise, Some(&policy))
        };
        assert_eq!(run(9), run(9));
        let out = run(9);
        assert!(out.iter().all(|v| (-1.0..1.0).contains(v)));
    }
}
