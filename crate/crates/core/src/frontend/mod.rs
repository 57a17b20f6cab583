//! Raw-waveform front ends: framing, the sinc band-pass filterbank, the
//! fully learnable 1-D alternative, MFCC features and data augmentation.

pub mod augment;
pub mod conv1d;
pub mod framing;
pub mod mfcc;
pub mod sinc;
pub mod wav;

pub use augment::{augment, time_shift, AugmentConfig, NoisePolicy};
pub use framing::{hamming, FrameSpec, WindowFn};
pub use mfcc::{mfcc, preprocess_band, MfccExtractor, MfccSpec};
pub use sinc::{build_sinc_kernel, SincFilterbank};
