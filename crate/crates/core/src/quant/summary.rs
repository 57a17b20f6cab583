//! Average bit-widths and the bit-width penalty of the trained-bit-width loss.

use serde::{Deserialize, Serialize};

use crate::nn::{GraphGrads, ModelGraph};
use crate::quant::quantizer::{QuantTarget, Quantizer};
use crate::tensor::Real;

/// Reported when no tensor of a kind is quantized.
pub const FULL_PRECISION_BITS: f64 = 32.0;

const MBC_PARTS: [&str; 8] = ["expand", "expand_bn", "expand_relu", "dw", "dw_bn", "dw_relu", "project", "project_bn"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensorBits {
    pub layer: usize,
    pub tag: String,
    pub target: QuantTarget,
    pub bits: u32,
    pub continuous_bits: f64,
    pub elements: usize,
}

/// One row of the per-layer table; MBC blocks are folded into a single row
/// averaging their three convolutions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitBits {
    pub name: String,
    pub b_w: Option<f64>,
    pub b_a: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitwidthSummary {
    /// Element-weighted average bits per weight.
    pub b_w: f64,
    /// Element-weighted average bits per activation.
    pub b_a: f64,
    /// Unweighted means over quantized tensors.
    pub b_w_layer_mean: f64,
    pub b_a_layer_mean: f64,
    pub tensors: Vec<QuantizedTensorBits>,
    pub units: Vec<UnitBits>,
}

fn quantizers<S: Real>(graph: &ModelGraph<S>) -> impl Iterator<Item = (usize, &str, &Quantizer<S>)> {
    graph.layers.iter().enumerate().flat_map(|(i, l)| {
        [&l.weight_quant, &l.act_quant]
            .into_iter()
            .flatten()
            .map(move |q| (i, l.tag.as_str(), q))
    })
}

fn weighted(items: &[(usize, f64)]) -> Option<f64> {
    let n: usize = items.iter().map(|x| x.0).sum();
    (n > 0).then(|| items.iter().map(|&(e, b)| e as f64 * b).sum::<f64>() / n as f64)
}

fn unit_name(tag: &str) -> &str {
    match tag.rsplit_once('.') {
        Some((prefix, part)) if MBC_PARTS.contains(&part) => prefix,
        _ => tag,
    }
}

pub fn summarize_bitwidths<S: Real>(graph: &ModelGraph<S>) -> BitwidthSummary {
    let tensors: Vec<QuantizedTensorBits> = quantizers(graph)
        .map(|(layer, tag, q)| QuantizedTensorBits {
            layer,
            tag: tag.to_string(),
            target: q.spec().target,
            bits: q.effective_bits(),
            continuous_bits: q.continuous_bits(),
            elements: q.elements,
        })
        .collect();
    let pick = |t: QuantTarget| -> Vec<(usize, f64)> {
        tensors
            .iter()
            .filter(|x| x.target == t)
            .map(|x| (x.elements, x.bits as f64))
            .collect()
    };
    let (w, a) = (pick(QuantTarget::Weight), pick(QuantTarget::Activation));
    let mean = |v: &[(usize, f64)]| {
        if v.is_empty() {
            FULL_PRECISION_BITS
        } else {
            v.iter().map(|x| x.1).sum::<f64>() / v.len() as f64
        }
    };

    let mut units: Vec<(String, Vec<(usize, f64)>, Vec<(usize, f64)>)> = Vec::new();
    for t in &tensors {
        let name = unit_name(&t.tag);
        if units.last().map(|u| u.0.as_str()) != Some(name) {
            units.push((name.to_string(), Vec::new(), Vec::new()));
        }
        let u = units.last_mut().expect("pushed above");
        let entry = (t.elements, t.bits as f64);
        match t.target {
            QuantTarget::Weight => u.1.push(entry),
            QuantTarget::Activation => u.2.push(entry),
        }
    }

    BitwidthSummary {
        b_w: weighted(&w).unwrap_or(FULL_PRECISION_BITS),
        b_a: weighted(&a).unwrap_or(FULL_PRECISION_BITS),
        b_w_layer_mean: mean(&w),
        b_a_layer_mean: mean(&a),
        units: units
            .into_iter()
            .map(|(name, w, a)| UnitBits {
                name,
                b_w: weighted(&w),
                b_a: weighted(&a),
            })
            .collect(),
        tensors,
    }
}

impl BitwidthSummary {
    /// Per-unit table as CSV: `unit,b_w,b_a` with empty cells where a unit
    /// has no quantizer of that kind.
    pub fn units_csv(&self) -> String {
        let mut s = String::from("unit,b_w,b_a\n");
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        for u in &self.units {
            s.push_str(&format!("{},{},{}\n", u.name, cell(u.b_w), cell(u.b_a)));
        }
        s
    }
}

/// Differentiable `(B_w, B_a)` from the continuous bit-widths; `None` when no
/// tensor of that kind is quantized.
pub fn continuous_averages<S: Real>(graph: &ModelGraph<S>) -> (Option<f64>, Option<f64>) {
    let mut w = Vec::new();
    let mut a = Vec::new();
    for (_, _, q) in quantizers(graph) {
        let e = (q.elements, q.continuous_bits());
        match q.spec().target {
            QuantTarget::Weight => w.push(e),
            QuantTarget::Activation => a.push(e),
        }
    }
    (weighted(&w), weighted(&a))
}

/// `L_CE + λ_w·B_w + λ_a·B_a` with continuous bit-widths. Terms for a kind
/// with no quantizers are left out.
pub fn trained_bitwidth_loss<S: Real>(ce: f64, graph: &ModelGraph<S>, lambda_w: f64, lambda_a: f64) -> f64 {
    let (bw, ba) = continuous_averages(graph);
    let mut loss = ce;
    if let Some(b) = bw {
        loss += lambda_w * b;
    }
    if let Some(b) = ba {
        loss += lambda_a * b;
    }
    loss
}

/// Adds the penalty gradient `λ · n_l / Σ n` to every trainable bit-width.
pub fn add_bitwidth_penalty_grad<S: Real>(
    graph: &ModelGraph<S>,
    grads: &mut GraphGrads<S>,
    lambda_w: f64,
    lambda_a: f64,
) {
    let total = |t: QuantTarget| -> usize {
        quantizers(graph)
            .filter(|(_, _, q)| q.spec().target == t)
            .map(|(_, _, q)| q.elements)
            .sum()
    };
    let (nw, na) = (total(QuantTarget::Weight), total(QuantTarget::Activation));
    for (layer, g) in graph.layers.iter().zip(&mut grads.layers) {
        if let Some(q) = layer.weight_quant.as_ref().filter(|q| q.bits_trainable()) {
            g.weight_quant.bits += S::lit(lambda_w * q.elements as f64 / nw as f64);
        }
        if let Some(q) = layer.act_quant.as_ref().filter(|q| q.bits_trainable()) {
            g.act_quant.bits += S::lit(lambda_a * q.elements as f64 / na as f64);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Layer, LayerKind};
    use crate::quant::attach::{attach_quantizers, QuantPolicy};
    use crate::quant::quantizer::{BitMode, QuantSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fc(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Layer<f64> {
        Layer::new("fc", LayerKind::FullyConnected { d_in, d_out }, rng).unwrap()
    }

    #[test]
    fn all_eight_bit_gives_eight() {
        let mut g = super::super::attach::tests::toy();
        attach_quantizers(&mut g, QuantPolicy::Fixed { b_w: 8, b_a: 8 }).unwrap();
        let s = summarize_bitwidths(&g);
        assert_eq!((s.b_w, s.b_a), (8.0, 8.0));
        assert!(s.units.iter().all(|u| u.b_w.unwrap_or(8.0) == 8.0 && u.b_a.unwrap_or(8.0) == 8.0));
    }

    #[test]
    fn weighted_mean_of_two_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = fc(10, 10, &mut rng);
        let mut b = fc(10, 30, &mut rng);
        a.weight_quant = Some(Quantizer::new(QuantSpec::weight(BitMode::Fixed { bits: 2 }), 100).unwrap());
        b.weight_quant = Some(Quantizer::new(QuantSpec::weight(BitMode::Fixed { bits: 4 }), 300).unwrap());
        let g = ModelGraph::new([1, 1, 10], vec![a, b]).unwrap();
        let s = summarize_bitwidths(&g);
        assert_eq!(s.b_w, 3.5);
        assert_eq!(s.b_w_layer_mean, 3.0);
        assert_eq!(s.b_a, FULL_PRECISION_BITS);
    }

    #[test]
    fn mbc_parts_fold_into_one_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = crate::nas::MbcConfig { e: 2, k: 3, c_in: 2, c_out: 2, stride: 1 };
        let mut g: ModelGraph<f64> = crate::nas::mbc_block(&cfg, [2, 6, 6], false, "s3.l2", &mut rng).unwrap();
        attach_quantizers(&mut g, QuantPolicy::Fixed { b_w: 4, b_a: 2 }).unwrap();
        let s = summarize_bitwidths(&g);
        assert_eq!(s.units.len(), 1);
        assert_eq!(s.units[0].name, "s3.l2");
        assert_eq!(s.tensors.len(), 6);
        assert_eq!((s.units[0].b_w, s.units[0].b_a), (Some(4.0), Some(2.0)));
    }

    #[test]
    fn zero_lambda_gives_cross_entropy_bit_exactly() {
        let mut g = super::super::attach::tests::toy();
        attach_quantizers(&mut g, QuantPolicy::trained()).unwrap();
        for ce in [0.0, 1e-300, std::f64::consts::LN_2, 2.4849066497880004, 17.25] {
            assert_eq!(trained_bitwidth_loss(ce, &g, 0.0, 0.0).to_bits(), ce.to_bits());
        }
    }
}
