pub mod count;
pub mod gradcheck;
pub mod graph;
pub mod layer;

pub use count::{count_ops, count_params, layer_table, LayerCount, OPS_CONVENTION};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use graph::{GraphCache, GraphGrads, ModelGraph};
pub use layer::{Layer, LayerCache, LayerGrads, LayerKind, Mode};
