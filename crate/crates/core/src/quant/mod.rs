//! Fake quantization, quantizer placement, bit-width accounting and integer
//! export.

pub mod attach;
pub mod export;
pub mod quantizer;
pub mod summary;

pub use attach::{attach_quantizers, calibrate_ranges, lr_scales, QuantPolicy, ALPHA_INIT_SCALE};
pub use export::{dequantize, export_quantized, verify_export, ExportedTensor, VerifyReport};
pub use quantizer::{BitMode, QuantSpec, QuantTarget, Quantizer, RangeMode};
pub use summary::{
    add_bitwidth_penalty_grad, continuous_averages, summarize_bitwidths, trained_bitwidth_loss, BitwidthSummary,
    UnitBits,
};
