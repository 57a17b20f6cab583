//! Model graphs in the container format.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::io::container::{Container, TensorData};
use crate::nn::{Layer, LayerKind, ModelGraph};
use crate::quant::quantizer::{QuantSpec, Quantizer};
use crate::tensor::{Precision, Real, Tensor};

pub const MODEL_KIND: &str = "model";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantRecord {
    pub spec: QuantSpec,
    pub alpha: f64,
    pub bits: f64,
    pub elements: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub tag: String,
    pub kind: LayerKind,
    #[serde(default)]
    pub skip: Option<usize>,
    #[serde(default)]
    pub frozen: bool,
    #[serde(default)]
    pub weight_quant: Option<QuantRecord>,
    #[serde(default)]
    pub act_quant: Option<QuantRecord>,
}

fn quant_record<S: Real>(q: &Quantizer<S>) -> QuantRecord {
    QuantRecord {
        spec: *q.spec(),
        alpha: q.alpha.data()[0].as_f64(),
        bits: q.bits.data()[0].as_f64(),
        elements: q.elements,
    }
}

fn quantizer<S: Real>(r: &QuantRecord) -> Result<Quantizer<S>> {
    let mut q = Quantizer::new(r.spec, r.elements)?;
    q.alpha.data_mut()[0] = S::lit(r.alpha);
    q.bits.data_mut()[0] = S::lit(r.bits);
    Ok(q)
}

pub fn layer_records<S: Real>(graph: &ModelGraph<S>) -> Vec<LayerRecord> {
    graph
        .layers
        .iter()
        .map(|l| LayerRecord {
            tag: l.tag.clone(),
            kind: l.kind.clone(),
            skip: l.skip,
            frozen: l.frozen,
            weight_quant: l.weight_quant.as_ref().map(quant_record),
            act_quant: l.act_quant.as_ref().map(quant_record),
        })
        .collect()
}

fn tensor_data<S: Real>(t: &Tensor<S>) -> TensorData {
    match S::PRECISION {
        Precision::Standard => TensorData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
        Precision::Wide => TensorData::F64(t.data().iter().map(|v| v.as_f64()).collect()),
    }
}

fn to_tensor<S: Real>(c: &Container, name: &str, shape: &[usize]) -> Result<Tensor<S>> {
    let t = c.get(name)?;
    if t.shape != shape {
        return Err(Error::Format(format!("tensor `{name}` has shape {:?}, expected {shape:?}", t.shape)));
    }
    Tensor::new(t.shape.clone(), t.data.to_f64().into_iter().map(S::lit).collect())
}

pub fn param_name(layer: usize, j: usize) -> String {
    format!("layers.{layer}.params.{j}")
}

pub fn buffer_name(layer: usize, j: usize) -> String {
    format!("layers.{layer}.buffers.{j}")
}

/// Container holding the graph, its weights and buffers in the graph's own
/// precision, plus caller-supplied header fields in `extra`.
pub fn model_container<S: Real>(graph: &ModelGraph<S>, extra: Value) -> Result<Container> {
    let mut c = Container::new(MODEL_KIND);
    c.meta.insert("input_shape".into(), serde_json::to_value(graph.input_shape())?);
    c.meta.insert("layers".into(), serde_json::to_value(layer_records(graph))?);
    c.meta.insert("extra".into(), extra);
    for (i, l) in graph.layers.iter().enumerate() {
        for (j, p) in l.params().into_iter().enumerate() {
            c.push(param_name(i, j), p.shape().to_vec(), tensor_data(p))?;
        }
        for (j, b) in l.buffers.iter().enumerate() {
            c.push(buffer_name(i, j), b.shape().to_vec(), tensor_data(b))?;
        }
    }
    Ok(c)
}

pub fn graph_from_container<S: Real>(c: &Container) -> Result<ModelGraph<S>> {
    let input_shape: [usize; 3] = c.meta_field("input_shape")?;
    let records: Vec<LayerRecord> = c.meta_field("layers")?;
    let mut layers = Vec::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        r.kind.validate()?;
        let params = r
            .kind
            .param_shapes()
            .iter()
            .enumerate()
            .map(|(j, s)| to_tensor(c, &param_name(i, j), s))
            .collect::<Result<Vec<_>>>()?;
        let mut layer = Layer::with_params(r.tag, r.kind, params)?;
        let buffers = layer
            .buffers
            .iter()
            .enumerate()
            .map(|(j, b)| to_tensor(c, &buffer_name(i, j), b.shape()))
            .collect::<Result<Vec<_>>>()?;
        layer.buffers = buffers;
        layer.skip = r.skip;
        layer.frozen = r.frozen;
        layer.weight_quant = r.weight_quant.as_ref().map(quantizer).transpose()?;
        layer.act_quant = r.act_quant.as_ref().map(quantizer).transpose()?;
        layers.push(layer);
    }
    ModelGraph::new(input_shape, layers)
}

pub fn extra(c: &Container) -> Value {
    c.meta.get("extra").cloned().unwrap_or(Value::Null)
}

pub fn save_model<S: Real>(graph: &ModelGraph<S>, extra: Value, path: &std::path::Path) -> Result<()> {
    model_container(graph, extra)?.write(path)
}

pub fn load_model<S: Real>(path: &std::path::Path) -> Result<(ModelGraph<S>, Value)> {
    let c = Container::read(path)?;
    if c.kind != MODEL_KIND {
        return Err(Error::Format(format!("expected a `{MODEL_KIND}` container, found `{}`", c.kind)));
    }
    Ok((graph_from_container(&c)?, extra(&c)))
}
