use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Layer, LayerKind, ModelGraph};
use crate::tensor::Real;

pub const EXPANSIONS: [usize; 6] = [1, 2, 3, 4, 5, 6];
pub const KERNELS: [usize; 3] = [3, 5, 7];

/// Mobile inverted bottleneck: 1×1 expand, depthwise k×k (carries the
/// stride), 1×1 project, each followed by batch norm; ReLU after the first
/// two.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MbcConfig {
    pub e: usize,
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
}

impl MbcConfig {
    pub fn validate(&self) -> Result<()> {
        if !EXPANSIONS.contains(&self.e) || !KERNELS.contains(&self.k) {
            return Err(Error::Config(format!(
                "MBC needs e in 1..=6 and k in {{3,5,7}} (got e={}, k={})",
                self.e, self.k
            )));
        }
        if self.c_in == 0 || self.c_out == 0 || self.stride == 0 {
            return Err(Error::Config("MBC channels and stride must be >= 1".into()));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.c_in * self.e
    }

    pub fn label(&self) -> String {
        format!("e{}k{}", self.e, self.k)
    }

    /// Layer kinds in order; the last one receives the residual when enabled.
    pub fn kinds(&self) -> Vec<LayerKind> {
        let h = self.hidden();
        vec![
            LayerKind::conv(1, 1, self.c_in, h),
            LayerKind::batch_norm(h),
            LayerKind::Relu,
            LayerKind::depthwise(self.k, self.stride, h),
            LayerKind::batch_norm(h),
            LayerKind::Relu,
            LayerKind::conv(1, 1, h, self.c_out),
            LayerKind::batch_norm(self.c_out),
        ]
    }
}

const PART_TAGS: [&str; 8] = ["expand", "expand_bn", "expand_relu", "dw", "dw_bn", "dw_relu", "project", "project_bn"];

/// The block as a standalone graph on per-example input `input`. With
/// `residual`, the block input is added after the final batch norm.
pub fn mbc_block<S: Real, R: Rng>(
    cfg: &MbcConfig,
    input: [usize; 3],
    residual: bool,
    tag: &str,
    rng: &mut R,
) -> Result<ModelGraph<S>> {
    cfg.validate()?;
    if input[0] != cfg.c_in {
        return Err(Error::Shape(format!(
            "{tag}: MBC expects {} input channels, got {}",
            cfg.c_in, input[0]
        )));
    }
    let mut layers = Vec::with_capacity(8);
    for (kind, part) in cfg.kinds().into_iter().zip(PART_TAGS) {
        layers.push(Layer::new(format!("{tag}.{part}"), kind, rng)?);
    }
    if residual {
        let last = layers.pop().expect("eight layers");
        layers.push(last.with_skip(0));
    }
    ModelGraph::new(input, layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{count_params, Mode};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hidden_width_scales_with_expansion() {
        let cfg = MbcConfig { e: 3, k: 3, c_in: 20, c_out: 20, stride: 1 };
        assert_eq!(cfg.hidden(), 60);
    }

    #[test]
    fn parameter_count_matches_enumeration() {
        let cfg = MbcConfig { e: 2, k: 5, c_in: 20, c_out: 20, stride: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g: ModelGraph<f32> = mbc_block(&cfg, [20, 10, 25], true, "b", &mut rng).unwrap();
        // expand 20·40, bn 2·40, depthwise 40·25, bn 2·40, project 40·20, bn 2·20
        assert_eq!(count_params(&g), 800 + 80 + 1000 + 80 + 800 + 40);
    }

    #[test]
    fn delta_kernels_with_identity_norm_pass_input_through() {
        let cfg = MbcConfig { e: 1, k: 3, c_in: 2, c_out: 2, stride: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g: ModelGraph<f64> = mbc_block(&cfg, [2, 4, 5], false, "b", &mut rng).unwrap();
        for layer in &mut g.layers {
            let shapes = layer.kind.param_shapes();
            if layer.kind.has_weights() {
                let s = &shapes[0];
                let mut w = Tensor::zeros(s);
                let (k2, cin) = (s[2] * s[3], s[1]);
                for o in 0..s[0] {
                    let i = if cin == 1 { 0 } else { o };
                    w.data_mut()[(o * cin + i) * k2 + k2 / 2] = 1.0;
                }
                layer.set_params(vec![w]).unwrap();
            }
        }
        // positive input survives both ReLUs
        let x = Tensor::from_fn(&[1, 2, 4, 5], |i| 0.1 + i as f64 * 0.01);
        let y = g.forward(&x, Mode::Eval).unwrap().0;
        let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b * scale.powi(3)).abs() < 1e-12);
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = MbcConfig { e: 7, k: 3, c_in: 2, c_out: 2, stride: 1 };
        assert!(cfg.validate().is_err());
        let cfg = MbcConfig { e: 1, k: 4, c_in: 2, c_out: 2, stride: 1 };
        assert!(cfg.validate().is_err());
    }
}
