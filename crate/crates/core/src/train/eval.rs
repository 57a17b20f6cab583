use serde::{Deserialize, Serialize};

use crate::data::{to_batch, LabeledClip};
use crate::error::{Error, Result};
use crate::nn::ModelGraph;
use crate::tensor::{Real, Tensor};
use crate::train::loss::argmax_rows;

pub const EVAL_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<u64>>,
}

impl Evaluation {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Self {
        let total: u64 = confusion.iter().flatten().sum();
        let hit: u64 = (0..confusion.len()).map(|i| confusion[i][i]).sum();
        Self {
            accuracy: if total == 0 { 0.0 } else { hit as f64 / total as f64 },
            confusion,
        }
    }
}

/// Top-1 accuracy and confusion matrix of any batch classifier.
pub fn evaluate_with<S: Real>(
    clips: &[LabeledClip],
    num_classes: usize,
    mut classify: impl FnMut(&Tensor<S>) -> Result<Tensor<S>>,
) -> Result<Evaluation> {
    if clips.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty set".into()));
    }
    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    for chunk in clips.chunks(EVAL_BATCH) {
        let (x, labels) = to_batch::<S>(&chunk.iter().collect::<Vec<_>>())?;
        let logits = classify(&x)?;
        for (y, p) in labels.into_iter().zip(argmax_rows(&logits)) {
            if y >= num_classes || p >= num_classes {
                return Err(Error::Input(format!("label {y} or prediction {p} exceeds {num_classes} classes")));
            }
            confusion[y][p] += 1;
        }
    }
    Ok(Evaluation::from_confusion(confusion))
}

pub fn evaluate<S: Real>(model: &mut ModelGraph<S>, clips: &[LabeledClip]) -> Result<Evaluation> {
    let classes = model.num_classes()?;
    evaluate_with(clips, classes, |x| model.predict(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Origin;

    fn clips(labels: &[usize]) -> Vec<LabeledClip> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &label)| LabeledClip {
                wave: vec![0.0; 4],
                label,
                origin: Origin::Synthetic { class: label, index: i },
            })
            .collect()
    }

    #[test]
    fn constant_classifier_scores_majority_share() {
        let set = clips(&[0, 1, 1, 2, 1]);
        let e = evaluate_with::<f32>(&set, 3, |x| {
            let b = x.batch();
            Tensor::new(vec![b, 3], (0..b).flat_map(|_| [0.0, 1.0, 0.0]).collect())
        })
        .unwrap();
        assert_eq!(e.accuracy, 0.6);
        let rows: Vec<u64> = e.confusion.iter().map(|r| r.iter().sum()).collect();
        assert_eq!(rows, vec![1, 3, 1]);
        assert_eq!(Evaluation::from_confusion(e.confusion.clone()).accuracy, e.accuracy);
    }

    #[test]
    fn empty_set_is_an_error() {
        assert!(evaluate_with::<f32>(&[], 2, |x| Ok(x.clone())).is_err());
    }
}
