//! Exact parameter and operation accounting.
//!
//! Ops are multiplications plus additions for one example. Conv:
//! `2·k_h·k_w·c_in·c_out·H·W`; depthwise: `2·k²·c·H·W`; batch norm: 2 per
//! element; residual add: 1 per element; global average pooling: one add
//! per element plus one divide per channel; fully connected: `2·d_in·d_out`;
//! sinc and 1-D front ends: `2·N·F·T` (kernel construction excluded); ReLU,
//! identity and the MFCC pipeline: 0.

use serde::Serialize;

use crate::error::Result;
use crate::nn::graph::ModelGraph;
use crate::nn::layer::LayerKind;
use crate::tensor::Real;

pub const OPS_CONVENTION: &str = "mul-add/v1";

pub fn layer_params(kind: &LayerKind) -> u64 {
    kind.param_shapes()
        .iter()
        .map(|s| s.iter().product::<usize>() as u64)
        .sum()
}

pub fn layer_ops(kind: &LayerKind, output: [usize; 3], input: [usize; 3], residual: bool) -> u64 {
    let out_elems = (output[0] * output[1] * output[2]) as u64;
    let op = match *kind {
        LayerKind::SincConv {
            filters, kernel_len, ..
        }
        | LayerKind::Conv1dFrontend {
            filters, kernel_len, ..
        } => 2 * (kernel_len * filters * output[2]) as u64,
        LayerKind::Mfcc { .. } => 0,
        LayerKind::Conv2d {
            k_h,
            k_w,
            c_in,
            c_out,
            bias,
            ..
        } => {
            let hw = (output[1] * output[2]) as u64;
            2 * (k_h * k_w * c_in * c_out) as u64 * hw + if bias { out_elems } else { 0 }
        }
        LayerKind::DepthwiseConv2d { k, c, .. } => 2 * (k * k * c) as u64 * (output[1] * output[2]) as u64,
        LayerKind::BatchNorm { .. } => 2 * out_elems,
        LayerKind::Relu | LayerKind::Identity => 0,
        LayerKind::GlobalAvgPool => (input[0] * input[1] * input[2] + input[0]) as u64,
        LayerKind::FullyConnected { d_in, d_out } => 2 * (d_in * d_out) as u64,
    };
    op + if residual { out_elems } else { 0 }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCount {
    pub tag: String,
    pub kind: &'static str,
    pub params: u64,
    pub ops: u64,
}

pub fn layer_table<S: Real>(graph: &ModelGraph<S>) -> Result<Vec<LayerCount>> {
    let shapes = graph.shapes()?;
    Ok(graph
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| LayerCount {
            tag: l.tag.clone(),
            kind: l.kind.name(),
            params: layer_params(&l.kind),
            ops: layer_ops(&l.kind, shapes[i + 1], shapes[i], l.skip.is_some()),
        })
        .collect())
}

pub fn count_params<S: Real>(graph: &ModelGraph<S>) -> u64 {
    graph.layers.iter().map(|l| layer_params(&l.kind)).sum()
}

pub fn count_ops<S: Real>(graph: &ModelGraph<S>) -> Result<u64> {
    Ok(layer_table(graph)?.iter().map(|r| r.ops).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::Layer;

    fn graph(input: [usize; 3], kinds: Vec<LayerKind>) -> ModelGraph<f32> {
        let mut rng = rand::rngs::mock::StepRng::new(1, 1);
        let layers = kinds
            .into_iter()
            .map(|k| Layer::new(k.name(), k, &mut rng).unwrap())
            .collect();
        ModelGraph::new(input, layers).unwrap()
    }

    #[test]
    fn sinc_forty_filters() {
        let g = graph(
            [1, 1, 16_000],
            vec![LayerKind::SincConv {
                filters: 40,
                kernel_len: 400,
                hop: 160,
                sample_rate: 16_000,
            }],
        );
        assert_eq!(count_params(&g), 80);
        assert_eq!(count_ops(&g).unwrap(), 2 * 400 * 40 * 98);
    }

    #[test]
    fn conv_and_fc_examples() {
        let g = graph([1, 40, 98], vec![LayerKind::conv(3, 2, 1, 10)]);
        assert_eq!(count_params(&g), 90);
        assert_eq!(g.output_shape().unwrap(), [10, 20, 49]);
        let g = graph([40, 5, 13], vec![LayerKind::conv(1, 1, 40, 80)]);
        assert_eq!(count_ops(&g).unwrap(), 416_000);
        let g = graph([80, 1, 1], vec![LayerKind::FullyConnected { d_in: 80, d_out: 12 }]);
        assert_eq!(count_ops(&g).unwrap(), 1920);
        assert_eq!(count_params(&g), 80 * 12 + 12);
    }

    #[test]
    fn conv1d_front_end_params() {
        let g = graph(
            [1, 1, 16_000],
            vec![LayerKind::Conv1dFrontend {
                filters: 40,
                kernel_len: 400,
                hop: 160,
                sample_rate: 16_000,
            }],
        );
        assert_eq!(count_params(&g), 16_000);
    }
}
