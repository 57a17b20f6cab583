//! Differentiable architecture search over a two-stage MBC supernet.

pub mod mbc;
pub mod search;
pub mod supernet;

pub use mbc::{mbc_block, MbcConfig, EXPANSIONS, KERNELS};
pub use search::{
    apply_arch_gradient, arch_gradient, nas_step, search, weight_step, ArchGradient, SearchConfig, SearchEpoch,
    SearchOutcome, OPS_SCALE,
};
pub use supernet::{
    expected_ops, expected_ops_grad, sample_index, sample_pair, sample_path, ArchParams, CandidateOp, FrontEnd,
    Supernet, SupernetSpec,
};
