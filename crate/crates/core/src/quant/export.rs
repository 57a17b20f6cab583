//! Integer export of weight-quantized models and its bit-exact verifier.
//!
//! Each quantized weight tensor is stored as one code per element in
//! `ceil(b/8)` bytes (`i8` signed, `u8` unsigned) plus its range `α` as an
//! `f32`. Re-expansion computes `α · (n / q)` exactly as the fake quantizer
//! does, so the reconstructed weights match bit for bit.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::io::container::{Container, TensorData};
use crate::io::model::{buffer_name, layer_records, param_name, LayerRecord};
use crate::nn::{Layer, ModelGraph};
use crate::quant::quantizer::levels;
use crate::tensor::Tensor;

pub const QUANTIZED_KIND: &str = "quantized_model";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportedTensor {
    pub layer: usize,
    pub tag: String,
    pub bits: u32,
    pub signed: bool,
    /// Positive code levels `q`; values are `α · n / q`.
    pub levels: u32,
    pub alpha: f32,
    pub shape: Vec<usize>,
    pub bytes_per_code: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub tensors: usize,
    pub elements: usize,
    pub mismatches: usize,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.mismatches == 0
    }
}

pub fn codes_name(layer: usize) -> String {
    format!("layers.{layer}.codes")
}

pub fn alpha_name(layer: usize) -> String {
    format!("layers.{layer}.alpha")
}

/// Packs every weight quantizer's integer codes; other tensors are stored
/// as `f32` under their usual names.
pub fn export_quantized(graph: &ModelGraph<f32>, extra: Value) -> Result<Container> {
    let mut c = Container::new(QUANTIZED_KIND);
    let mut entries = Vec::new();
    for (i, l) in graph.layers.iter().enumerate() {
        let params = l.params();
        let first_float = match &l.weight_quant {
            Some(q) => {
                let w = params[0];
                let (codes, alpha, qlev) = q.codes(w);
                let signed = q.spec().signed;
                let bits = q.effective_bits();
                let data = if signed {
                    TensorData::I8(codes.iter().map(|&n| n as i8).collect())
                } else {
                    TensorData::U8(codes.iter().map(|&n| n as u8).collect())
                };
                c.push(codes_name(i), w.shape().to_vec(), data)?;
                c.push(alpha_name(i), vec![1], TensorData::F32(vec![alpha]))?;
                entries.push(ExportedTensor {
                    layer: i,
                    tag: l.tag.clone(),
                    bits,
                    signed,
                    levels: qlev,
                    alpha,
                    shape: w.shape().to_vec(),
                    bytes_per_code: (bits as usize).div_ceil(8),
                });
                1
            }
            None => 0,
        };
        for (j, p) in params.iter().enumerate().skip(first_float) {
            c.push(param_name(i, j), p.shape().to_vec(), TensorData::F32(p.data().to_vec()))?;
        }
        for (j, b) in l.buffers.iter().enumerate() {
            c.push(buffer_name(i, j), b.shape().to_vec(), TensorData::F32(b.data().to_vec()))?;
        }
    }
    c.meta.insert("input_shape".into(), serde_json::to_value(graph.input_shape())?);
    c.meta.insert("layers".into(), serde_json::to_value(layer_records(graph))?);
    c.meta.insert("quantized".into(), serde_json::to_value(&entries)?);
    c.meta.insert("extra".into(), extra);
    Ok(c)
}

fn expand(c: &Container, e: &ExportedTensor) -> Result<Tensor<f32>> {
    let codes = c.get(&codes_name(e.layer))?;
    if codes.shape != e.shape {
        return Err(Error::Format(format!("codes of layer {} have the wrong shape", e.layer)));
    }
    let alpha = match &c.get(&alpha_name(e.layer))?.data {
        TensorData::F32(v) if v.len() == 1 => v[0],
        _ => return Err(Error::Format(format!("range of layer {} must be one f32", e.layer))),
    };
    if e.levels != levels(e.bits, e.signed) {
        return Err(Error::Format(format!("layer {}: level count does not match bit-width", e.layer)));
    }
    let q = e.levels as f32;
    let values: Vec<f32> = match &codes.data {
        TensorData::I8(v) if e.signed => v.iter().map(|&n| alpha * (n as f32 / q)).collect(),
        TensorData::U8(v) if !e.signed => v.iter().map(|&n| alpha * (n as f32 / q)).collect(),
        _ => return Err(Error::Format(format!("layer {}: code dtype does not match signedness", e.layer))),
    };
    Tensor::new(e.shape.clone(), values)
}

/// Real-valued model with every exported weight re-expanded from its codes.
/// Weight quantizers are dropped (the weights already sit on their grids);
/// activation quantizers are kept.
pub fn dequantize(c: &Container) -> Result<ModelGraph<f32>> {
    if c.kind != QUANTIZED_KIND {
        return Err(Error::Format(format!("expected a `{QUANTIZED_KIND}` container, found `{}`", c.kind)));
    }
    let input_shape: [usize; 3] = c.meta_field("input_shape")?;
    let records: Vec<LayerRecord> = c.meta_field("layers")?;
    let entries: Vec<ExportedTensor> = c.meta_field("quantized")?;
    let mut layers = Vec::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        let shapes = r.kind.param_shapes();
        let entry = entries.iter().find(|e| e.layer == i);
        let mut params = Vec::with_capacity(shapes.len());
        for (j, s) in shapes.iter().enumerate() {
            if j == 0 {
                if let Some(e) = entry {
                    params.push(expand(c, e)?);
                    continue;
                }
            }
            let t = c.get(&param_name(i, j))?;
            if &t.shape != s {
                return Err(Error::Format(format!("tensor `{}` has the wrong shape", param_name(i, j))));
            }
            params.push(Tensor::new(s.clone(), t.data.to_f64().into_iter().map(|v| v as f32).collect())?);
        }
        let mut layer: Layer<f32> = Layer::with_params(r.tag, r.kind, params)?;
        for j in 0..layer.buffers.len() {
            let t = c.get(&buffer_name(i, j))?;
            layer.buffers[j] = Tensor::new(t.shape.clone(), t.data.to_f64().into_iter().map(|v| v as f32).collect())?;
        }
        layer.skip = r.skip;
        layer.frozen = r.frozen;
        if let Some(a) = r.act_quant {
            let mut q = crate::quant::Quantizer::new(a.spec, a.elements)?;
            q.alpha.data_mut()[0] = a.alpha as f32;
            q.bits.data_mut()[0] = a.bits as f32;
            layer.act_quant = Some(q);
        }
        layers.push(layer);
    }
    ModelGraph::new(input_shape, layers)
}

/// Re-expands every exported tensor and compares it bit for bit with the
/// fake-quantized weights of `graph`.
pub fn verify_export(graph: &ModelGraph<f32>, c: &Container) -> Result<VerifyReport> {
    let entries: Vec<ExportedTensor> = c.meta_field("quantized")?;
    let mut report = VerifyReport {
        tensors: 0,
        elements: 0,
        mismatches: 0,
    };
    for e in &entries {
        let layer = graph
            .layers
            .get(e.layer)
            .ok_or_else(|| Error::Format(format!("export names missing layer {}", e.layer)))?;
        let q = layer
            .weight_quant
            .as_ref()
            .ok_or_else(|| Error::Format(format!("layer {} has no weight quantizer", e.layer)))?;
        let fake = q.quantize(layer.params()[0]).0;
        let back = expand(c, e)?;
        report.tensors += 1;
        report.elements += fake.len();
        report.mismatches += fake
            .data()
            .iter()
            .zip(back.data())
            .filter(|(a, b)| a.to_bits() != b.to_bits())
            .count();
    }
    Ok(report)
}
