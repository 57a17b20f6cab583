use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{to_batch, LabeledClip, CLIP_LEN};
use crate::error::Result;
use crate::frontend::augment::{augment, AugmentConfig};
use crate::frontend::wav::SAMPLE_RATE;
use crate::tensor::{Real, Tensor};

/// Shuffled index batches covering `0..n`; the last batch may be short.
pub fn shuffled_batches<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Batch of the selected clips, augmented when `aug` is given.
pub fn make_batch<S: Real, R: Rng>(
    clips: &[LabeledClip],
    indices: &[usize],
    aug: Option<&AugmentConfig>,
    noise: &[Vec<f32>],
    rng: &mut R,
) -> Result<(Tensor<S>, Vec<usize>)> {
    match aug {
        None => to_batch(&indices.iter().map(|&i| &clips[i]).collect::<Vec<_>>()),
        Some(cfg) => {
            let augmented: Vec<LabeledClip> = indices
                .iter()
                .map(|&i| LabeledClip {
                    wave: augment(&clips[i].wave, rng, cfg.shift_ms, SAMPLE_RATE, noise, cfg.noise.as_ref()),
                    label: clips[i].label,
                    origin: clips[i].origin.clone(),
                })
                .collect();
            to_batch(&augmented.iter().collect::<Vec<_>>())
        }
    }
}

pub fn clip_len(clips: &[LabeledClip]) -> usize {
    clips.first().map_or(CLIP_LEN, |c| c.wave.len())
}
