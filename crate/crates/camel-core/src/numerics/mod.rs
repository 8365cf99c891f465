//! Differentiable building blocks: tensors, the autodiff tape, attention,
//! the convolutional frontend, parameter storage, and gradient checking.

pub mod attention;
pub mod conv;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use attention::{multi_head_attention, sinusoidal_pe, AttentionParams, AttnMask};
pub use conv::{conv_out_len, downsampled_len, ConvFrontend};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, LossFn};
pub use params::{fnv1a, CheckpointMeta, ParamInit, ParamStore};
pub use tape::{log_add, NodeId, Tape};
pub use tensor::Tensor;
