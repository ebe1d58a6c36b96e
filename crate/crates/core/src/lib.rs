//! Native-resolution visual front end.
//!
//! Images and video frames are planned to aspect-preserving resolutions,
//! cut into `p×p` patches, packed into one variable-length sequence for a
//! small vision transformer, and then compressed on demand (1×, 4× or 16×)
//! by region cross-attention before a shared projection into language-model
//! embedding space. A needle-in-a-haystack harness and a toy training loop
//! with staged parameter freezing sit on top.
//!
//! Every numeric type is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root name the common instantiations.

pub mod compressor;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod init;
pub mod niah;
pub mod nn;
pub mod packing;
pub mod planner;
pub mod posembed;
pub mod scalar;
pub mod tensor_file;

pub use compressor::{CompressorWeights, DownsampleVariant, Ratio};
pub use encoder::{Encoder, EncoderConfig, FeatureMap, Modality, VisualInput};
pub use error::{OryxError, Result};
pub use geometry::{PatchGrid, Resolution};
pub use packing::{AttentionWeights, PackedBatch};
pub use planner::{Category, CompressionPlan};
pub use posembed::PositionTable;
pub use scalar::{DType, Scalar};

pub type FeatureMap32 = FeatureMap<f32>;
pub type FeatureMap64 = FeatureMap<f64>;
pub type PackedBatch32 = PackedBatch<f32>;
pub type PackedBatch64 = PackedBatch<f64>;
pub type Encoder32 = Encoder<f32>;
pub type Encoder64 = Encoder<f64>;
pub type CompressorWeights32 = CompressorWeights<f32>;
pub type CompressorWeights64 = CompressorWeights<f64>;
pub type PositionTable32 = PositionTable<f32>;
pub type PositionTable64 = PositionTable<f64>;
pub type AttentionWeights32 = AttentionWeights<f32>;
pub type AttentionWeights64 = AttentionWeights<f64>;
pub type VisualInput32 = VisualInput<f32>;
pub type VisualInput64 = VisualInput<f64>;
pub type Model32 = harness::Model<f32>;
pub type Model64 = harness::Model<f64>;
