//! Variable-rate learned image codec with conditional feature modulation in
//! the decoder, meta-training over a grid of rate-distortion tradeoffs and
//! per-patch online adaptation of the decoder's tradeoff conditions.
//!
//! The encoder output is never touched by adaptation: only the K per-layer
//! tradeoffs sent as fp16 side information change, so the latent payload and
//! its rate stay fixed.

pub mod bitstream;
pub mod checkpoint;
pub mod codec;
pub mod data;
pub mod entropy_coding;
pub mod error;
pub mod meta;
pub mod metrics;
pub mod model;
pub mod modulation;
pub mod nn;
pub mod oml;
pub mod pipeline;
pub mod tensor;

pub use codec::{CodecDims, RdEval, TrainConfig};
pub use error::{CodingError, Error, FormatError, Result};
pub use meta::MetaConfig;
pub use metrics::{Metric, RdPoint};
pub use model::{CodecModel, Quality};
pub use modulation::TradeoffVector;
pub use oml::{GradientMode, OmlConfig, OmlResult};
pub use pipeline::{decode_image, encode_image, EncodeOptions, EncodeOutput, PatchStats};
pub use tensor::{ImageTensor, LatentTensor, QuantizedLatent, Tensor3};
