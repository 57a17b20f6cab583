//! Labeled one-second clips: the speech-commands task and a synthetic
//! stand-in for fast experiments.

pub mod speech_commands;
pub mod synth;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use speech_commands::{load_speech_commands, make_silence, KEYWORDS, SILENCE_LABEL, UNKNOWN_LABEL};
pub use synth::{synth_dataset, SynthSpec};

pub const CLIP_LEN: usize = 16_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Origin {
    File { path: PathBuf },
    Silence { path: PathBuf, offset: usize },
    Synthetic { class: usize, index: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledClip {
    pub wave: Vec<f32>,
    pub label: usize,
    pub origin: Origin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub class_names: Vec<String>,
    pub train: Vec<LabeledClip>,
    pub valid: Vec<LabeledClip>,
    pub test: Vec<LabeledClip>,
    /// Background-noise recordings used for augmentation.
    pub noise: Vec<Vec<f32>>,
}

#[derive(Serialize)]
struct ManifestRow<'a> {
    origin: &'a Origin,
    label: usize,
    class: &'a str,
    split: Split,
}

impl Splits {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn get(&self, split: Split) -> &[LabeledClip] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Per-class clip counts of one split.
    pub fn histogram(&self, split: Split) -> Vec<usize> {
        let mut h = vec![0; self.num_classes()];
        for c in self.get(split) {
            h[c.label] += 1;
        }
        h
    }

    pub fn manifest(&self) -> serde_json::Value {
        let rows: Vec<ManifestRow> = [Split::Train, Split::Valid, Split::Test]
            .into_iter()
            .flat_map(|s| {
                self.get(s).iter().map(move |c| ManifestRow {
                    origin: &c.origin,
                    label: c.label,
                    class: &self.class_names[c.label],
                    split: s,
                })
            })
            .collect();
        serde_json::json!({ "format_version": 1, "clips": rows })
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Stacks clips into a `[B, 1, 1, L]` batch plus labels.
pub fn to_batch<S: Real>(clips: &[&LabeledClip]) -> Result<(Tensor<S>, Vec<usize>)> {
    let len = clips.first().map_or(CLIP_LEN, |c| c.wave.len());
    let mut data = Vec::with_capacity(clips.len() * len);
    for c in clips {
        if c.wave.len() != len {
            return Err(Error::Input("clips in a batch must have equal length".into()));
        }
        data.extend(c.wave.iter().map(|&v| S::lit(v as f64)));
    }
    Ok((
        Tensor::new(vec![clips.len(), 1, 1, len], data)?,
        clips.iter().map(|c| c.label).collect(),
    ))
}
