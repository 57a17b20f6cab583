//! Twelve-class keyword task over a speech-commands style directory tree:
//! ten keywords, an "unknown" class drawn from the remaining words and a
//! "silence" class cut from background-noise recordings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::data::{LabeledClip, Origin, Split, Splits, CLIP_LEN};
use crate::error::{Error, Result};
use crate::frontend::wav::{fit_length, read_wav};
use crate::seed;

pub const KEYWORDS: [&str; 10] = ["yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go"];
pub const UNKNOWN_LABEL: usize = 10;
pub const SILENCE_LABEL: usize = 11;
pub const NOISE_DIR: &str = "_background_noise_";
const VALID_PERCENT: u64 = 10;
const TEST_PERCENT: u64 = 10;

pub fn class_names() -> Vec<String> {
    KEYWORDS
        .iter()
        .map(|s| s.to_string())
        .chain(["_unknown_".to_string(), "_silence_".to_string()])
        .collect()
}

/// Split of a clip by the hash of its speaker id (the file-name part before
/// `_nohash_`), so all clips of one speaker land in the same split.
pub fn hash_split(relative: &str) -> Split {
    let name = relative.rsplit('/').next().unwrap_or(relative);
    let speaker = name.split("_nohash_").next().unwrap_or(name);
    let digest = Sha256::digest(speaker.as_bytes());
    let bucket = u64::from_be_bytes(digest[..8].try_into().expect("8 bytes")) % 100;
    if bucket < VALID_PERCENT {
        Split::Valid
    } else if bucket < VALID_PERCENT + TEST_PERCENT {
        Split::Test
    } else {
        Split::Train
    }
}

fn read_list(path: &Path) -> Result<Option<Vec<String>>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(Some(
        text.lines()
            .map(|l| l.trim().replace('\\', "/"))
            .filter(|l| !l.is_empty())
            .collect(),
    ))
}

fn sorted_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Random one-second slices of noise recordings, labeled as silence. Each
/// slice is scaled by a gain drawn from `[0, 1]`.
pub fn make_silence(noise: &[(PathBuf, Vec<f32>)], count: usize, seed: u64) -> Result<Vec<LabeledClip>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let usable: Vec<&(PathBuf, Vec<f32>)> = noise.iter().filter(|(_, w)| w.len() >= CLIP_LEN).collect();
    if usable.is_empty() {
        return Err(Error::Input(
            "silence needs at least one noise recording of one second or more".into(),
        ));
    }
    let mut rng = seed::stream(seed, seed::SILENCE, 0);
    Ok((0..count)
        .map(|_| {
            let (path, wave) = usable[rng.gen_range(0..usable.len())];
            let offset = rng.gen_range(0..=wave.len() - CLIP_LEN);
            let gain = rng.gen::<f32>();
            LabeledClip {
                wave: wave[offset..offset + CLIP_LEN].iter().map(|v| v * gain).collect(),
                label: SILENCE_LABEL,
                origin: Origin::Silence {
                    path: path.clone(),
                    offset,
                },
            }
        })
        .collect())
}

fn load_clip(path: &Path, label: usize) -> Result<LabeledClip> {
    Ok(LabeledClip {
        wave: fit_length(read_wav(path)?, CLIP_LEN),
        label,
        origin: Origin::File {
            path: path.to_path_buf(),
        },
    })
}

/// Loads the twelve-class task. Published `validation_list.txt` and
/// `testing_list.txt` are honored when present; otherwise clips are split
/// 80/10/10 by speaker hash. The unknown and silence classes are sized to the
/// mean keyword-class size of each split.
pub fn load_speech_commands(root: &Path, seed: u64) -> Result<Splits> {
    let missing: Vec<String> = KEYWORDS
        .iter()
        .filter(|k| !root.join(k).is_dir())
        .map(|k| k.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingClasses {
            root: root.to_path_buf(),
            missing,
        });
    }

    let valid_list = read_list(&root.join("validation_list.txt"))?;
    let test_list = read_list(&root.join("testing_list.txt"))?;
    let split_of = |rel: &str| -> Split {
        match (&valid_list, &test_list) {
            (Some(v), Some(t)) => {
                if v.iter().any(|x| x == rel) {
                    Split::Valid
                } else if t.iter().any(|x| x == rel) {
                    Split::Test
                } else {
                    Split::Train
                }
            }
            _ => hash_split(rel),
        }
    };

    let mut words: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.path().is_dir() && name != NOISE_DIR && !name.starts_with('.') {
            words.push(name);
        }
    }
    words.sort();

    let mut keyword: BTreeMap<Split, Vec<LabeledClip>> = BTreeMap::new();
    let mut unknown_pool: BTreeMap<Split, Vec<PathBuf>> = BTreeMap::new();
    for word in &words {
        let label = KEYWORDS.iter().position(|k| k == word);
        for path in sorted_wavs(&root.join(word))? {
            let rel = format!("{word}/{}", path.file_name().expect("file").to_string_lossy());
            let split = split_of(&rel);
            match label {
                Some(l) => keyword.entry(split).or_default().push(load_clip(&path, l)?),
                None => unknown_pool.entry(split).or_default().push(path),
            }
        }
    }

    let noise_dir = root.join(NOISE_DIR);
    let mut noise = Vec::new();
    if noise_dir.is_dir() {
        for p in sorted_wavs(&noise_dir)? {
            let w = read_wav(&p)?;
            noise.push((p, w));
        }
    }

    let mut out = Splits {
        class_names: class_names(),
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        noise: noise.iter().map(|(_, w)| w.clone()).collect(),
    };
    for (i, split) in [Split::Train, Split::Valid, Split::Test].into_iter().enumerate() {
        let mut clips = keyword.remove(&split).unwrap_or_default();
        let target = (clips.len() as f64 / KEYWORDS.len() as f64).round() as usize;

        let mut pool = unknown_pool.remove(&split).unwrap_or_default();
        let mut rng = seed::stream(seed, seed::UNKNOWN, i as u64);
        pool.shuffle(&mut rng);
        pool.truncate(target);
        pool.sort();
        for p in pool {
            clips.push(load_clip(&p, UNKNOWN_LABEL)?);
        }
        if !noise.is_empty() {
            clips.extend(make_silence(&noise, target, seed.wrapping_add(i as u64))?);
        }
        match split {
            Split::Train => out.train = clips,
            Split::Valid => out.valid = clips,
            Split::Test => out.test = clips,
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_root_lists_all_keywords() {
        let dir = tempfile::tempdir().unwrap();
        match load_speech_commands(dir.path(), 0) {
            Err(Error::MissingClasses { missing, .. }) => assert_eq!(missing.len(), 10),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn silence_slices_are_reproducible_and_in_bounds() {
        let noise = vec![(PathBuf::from("n.wav"), (0..32_000).map(|i| (i % 100) as f32 / 100.0).collect())];
        let a = make_silence(&noise, 50, 3).unwrap();
        assert_eq!(a, make_silence(&noise, 50, 3).unwrap());
        for c in &a {
            let Origin::Silence { offset, .. } = c.origin else { panic!() };
            assert!(offset + CLIP_LEN <= 32_000);
            assert_eq!(c.wave.len(), CLIP_LEN);
        }
        assert!(make_silence(&noise, 0, 3).unwrap().is_empty());
        assert!(make_silence(&[], 1, 3).is_err());
    }

    #[test]
    fn speaker_hash_is_stable_per_speaker() {
        assert_eq!(hash_split("yes/abc123_nohash_0.wav"), hash_split("no/abc123_nohash_4.wav"));
    }
}
