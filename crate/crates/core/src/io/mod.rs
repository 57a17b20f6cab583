//! On-disk formats.

pub mod container;
pub mod model;

pub use container::{Container, Dtype, NamedTensor, TensorData, FORMAT_VERSION};
pub use model::{graph_from_container, load_model, model_container, save_model, LayerRecord, QuantRecord};
