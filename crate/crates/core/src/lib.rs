//! Compression-oriented image preprocessing toolkit.
//!
//! The crate covers the whole pipeline: a pool of deterministic preprocessing
//! operators, a from-scratch baseline JPEG codec plus subprocess adapters for
//! external encoders, reference and no-reference quality metrics, a labeling
//! engine that picks the best operator chain per image, a small residual
//! U-Net trained to imitate those picks, and an evaluation harness.

pub mod codec;
pub mod corpus;
pub mod eval;
pub mod filters;
pub mod image;
pub mod labeling;
pub mod metrics;
pub mod synth;
pub mod unet;

pub use codec::{bpp, compression_ratio, Codec, CodecError, CompressedArtifact, JpegCodec};
pub use filters::{compose, FilterError, OperatorRegistry, PreprocOperator, SharedOperator};
pub use image::{FloatPlanes, ImageBuffer, ImageError, ImageFormat, Patch, PatchSpec};
pub use labeling::{GroupGenConfig, GroupMode, LabelRecord, PreprocGroup, ScoreRecord, ScoreSign};
pub use metrics::{MetricMode, QualityMetric};
pub use unet::{Tensor, UNet, UNetConfig};
