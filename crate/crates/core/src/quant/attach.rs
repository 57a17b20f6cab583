//! Placing quantizers on a concrete model and initializing their ranges.

use serde::{Deserialize, Serialize};

use crate::data::LabeledClip;
use crate::error::{Error, Result};
use crate::nn::{LayerKind, ModelGraph, Mode};
use crate::quant::quantizer::{BitMode, QuantSpec, Quantizer};
use crate::tensor::Real;
use crate::train::batch::clip_len;

/// Trainable activation ranges start at this multiple of the mean |x|.
pub const ALPHA_INIT_SCALE: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum QuantPolicy {
    Fixed { b_w: u32, b_a: u32 },
    Trained { init_w: f64, init_a: f64 },
}

impl QuantPolicy {
    pub fn trained() -> Self {
        QuantPolicy::Trained { init_w: 4.0, init_a: 4.0 }
    }

    fn modes(&self) -> (BitMode, BitMode) {
        match *self {
            QuantPolicy::Fixed { b_w, b_a } => (BitMode::Fixed { bits: b_w }, BitMode::Fixed { bits: b_a }),
            QuantPolicy::Trained { init_w, init_a } => {
                (BitMode::Trained { init: init_w }, BitMode::Trained { init: init_a })
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (w, a) = self.modes();
        QuantSpec::weight(w).validate()?;
        QuantSpec::activation(a, false).validate()
    }
}

fn is_input_layer(kind: &LayerKind) -> bool {
    matches!(
        kind,
        LayerKind::SincConv { .. } | LayerKind::Conv1dFrontend { .. } | LayerKind::Mfcc { .. }
    )
}

/// Attaches weight quantizers to every convolution and fully connected
/// layer, unsigned activation quantizers after every ReLU and signed ones
/// after batch norms that are not followed by a ReLU (block outputs). The
/// input layer and its output stay real-valued.
pub fn attach_quantizers<S: Real>(graph: &mut ModelGraph<S>, policy: QuantPolicy) -> Result<()> {
    policy.validate()?;
    if graph.layers.iter().any(|l| l.weight_quant.is_some() || l.act_quant.is_some()) {
        return Err(Error::Usage("model already has quantizers attached".into()));
    }
    let shapes = graph.shapes()?;
    let (wm, am) = policy.modes();
    let n = graph.layers.len();
    for i in 0..n {
        let next_is_relu = i + 1 < n && graph.layers[i + 1].kind == LayerKind::Relu;
        let prev_is_input = i > 0 && is_input_layer(&graph.layers[i - 1].kind);
        let layer = &mut graph.layers[i];
        if is_input_layer(&layer.kind) {
            continue;
        }
        let out_elems: usize = shapes[i + 1].iter().product();
        match layer.kind {
            LayerKind::Conv2d { .. } | LayerKind::DepthwiseConv2d { .. } | LayerKind::FullyConnected { .. } => {
                let elems = layer.params[0].len();
                layer.weight_quant = Some(Quantizer::new(QuantSpec::weight(wm), elems)?);
            }
            LayerKind::Relu if !prev_is_input => {
                layer.act_quant = Some(Quantizer::new(QuantSpec::activation(am, false), out_elems)?);
            }
            LayerKind::BatchNorm { .. } if !next_is_relu => {
                layer.act_quant = Some(Quantizer::new(QuantSpec::activation(am, true), out_elems)?);
            }
            _ => {}
        }
    }
    Ok(())
}

/// Runs `clips` through the model with activation quantizers bypassed and
/// sets every trainable range to `ALPHA_INIT_SCALE · mean|x|`. Returns the
/// number of ranges set.
pub fn calibrate_ranges<S: Real>(graph: &mut ModelGraph<S>, clips: &[LabeledClip], batch: usize) -> Result<usize> {
    if clips.is_empty() {
        return Ok(0);
    }
    let len = clip_len(clips);
    for chunk in clips.chunks(batch.max(1)) {
        let refs: Vec<&LabeledClip> = chunk.iter().filter(|c| c.wave.len() == len).collect();
        let (x, _) = crate::data::to_batch::<S>(&refs)?;
        graph.forward(&x, Mode::Calibrate)?;
    }
    let mut set = 0;
    for layer in &mut graph.layers {
        let mean = layer.take_calibration();
        if let (Some(q), Some(m)) = (&mut layer.act_quant, mean) {
            if q.alpha_trainable() {
                q.set_alpha(S::lit(ALPHA_INIT_SCALE * m));
                q.project();
                set += 1;
            }
        }
    }
    Ok(set)
}

/// Per-slot learning-rate multipliers aligned with
/// `ModelGraph::trainables_mut`: 1 everywhere except continuous bit-widths.
pub fn lr_scales<S: Real>(graph: &ModelGraph<S>, bits_scale: f64) -> Vec<f64> {
    let mut v = Vec::new();
    for layer in &graph.layers {
        v.extend(std::iter::repeat_n(1.0, layer.params().len()));
        for _ in [&layer.weight_quant, &layer.act_quant].into_iter().flatten() {
            v.push(1.0);
            v.push(bits_scale);
        }
    }
    v
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::nn::Layer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy() -> ModelGraph<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let kinds = vec![
            LayerKind::SincConv {
                filters: 4,
                kernel_len: 101,
                hop: 160,
                sample_rate: 16000,
            },
            LayerKind::Relu,
            LayerKind::conv(3, 2, 1, 4),
            LayerKind::batch_norm(4),
            LayerKind::Relu,
            LayerKind::conv(1, 1, 4, 4),
            LayerKind::batch_norm(4),
            LayerKind::GlobalAvgPool,
            LayerKind::FullyConnected { d_in: 4, d_out: 3 },
        ];
        let layers = kinds
            .into_iter()
            .enumerate()
            .map(|(i, k)| Layer::new(format!("l{i}"), k, &mut rng).unwrap())
            .collect();
        ModelGraph::new([1, 1, 3200], layers).unwrap()
    }

    #[test]
    fn placement_follows_rules() {
        let mut g = toy();
        attach_quantizers(&mut g, QuantPolicy::Fixed { b_w: 8, b_a: 8 }).unwrap();
        let w: Vec<bool> = g.layers.iter().map(|l| l.weight_quant.is_some()).collect();
        let a: Vec<bool> = g.layers.iter().map(|l| l.act_quant.is_some()).collect();
        assert_eq!(w, [false, false, true, false, false, true, false, false, true]);
        assert_eq!(a, [false, false, false, false, true, false, true, false, false]);
        assert!(g.layers[6].act_quant.as_ref().unwrap().spec().signed);
        assert!(!g.layers[4].act_quant.as_ref().unwrap().spec().signed);
    }

    #[test]
    fn double_attach_is_usage_error() {
        let mut g = toy();
        attach_quantizers(&mut g, QuantPolicy::trained()).unwrap();
        let err = attach_quantizers(&mut g, QuantPolicy::trained()).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn off_grid_policy_rejected() {
        let mut g = toy();
        assert!(attach_quantizers(&mut g, QuantPolicy::Fixed { b_w: 3, b_a: 8 }).is_err());
        assert!(attach_quantizers(&mut g, QuantPolicy::Trained { init_w: 1.0, init_a: 4.0 }).is_err());
    }

    #[test]
    fn sinc_cutoffs_stay_real_valued() {
        let mut g = toy();
        let before = g.layers[0].params()[0].clone();
        attach_quantizers(&mut g, QuantPolicy::Fixed { b_w: 1, b_a: 1 }).unwrap();
        assert!(g.layers[0].weight_quant.is_none());
        assert_eq!(g.layers[0].params()[0], &before);
    }

    #[test]
    fn lr_scales_align_with_trainables() {
        let mut g = toy();
        attach_quantizers(&mut g, QuantPolicy::trained()).unwrap();
        let scales = lr_scales(&g, 10.0);
        assert_eq!(scales.len(), g.trainables_mut().len());
        assert_eq!(scales.iter().filter(|&&s| s == 10.0).count(), 5);
    }
}
