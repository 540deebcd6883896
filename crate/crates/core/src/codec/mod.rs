//! Codec layer: the internal baseline JPEG, subprocess adapters for external
//! encoders, and rate arithmetic.

pub mod external;
pub mod jpeg;

use thiserror::Error;

use crate::image::{ImageBuffer, ImageError};

pub use external::ExternalCodec;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("quality {0} outside 1..=100")]
    InvalidQuality(i64),
    #[error("truncated JPEG stream")]
    Truncated,
    #[error("progressive JPEG is not supported")]
    Progressive,
    #[error("arithmetic-coded JPEG is not supported")]
    Arithmetic,
    #[error("unsupported JPEG feature: {0}")]
    Unsupported(String),
    #[error("malformed stream: {0}")]
    Malformed(String),
    #[error("codec unavailable: {0}")]
    Unavailable(String),
    #[error("external command `{command}` failed with {status}: {stderr}")]
    CommandFailed { command: String, status: String, stderr: String },
    #[error("external command did not produce {0}")]
    MissingOutput(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] ImageError),
}

impl CodecError {
    pub fn is_unavailable(&self) -> bool {
        matches!(self, CodecError::Unavailable(_))
    }
}

/// Encode/decode contract shared by the internal JPEG and external adapters.
pub trait Codec: Send + Sync {
    fn name(&self) -> &str;
    fn encode(&self, img: &ImageBuffer, quality: u8) -> Result<Vec<u8>, CodecError>;
    fn decode(&self, bytes: &[u8]) -> Result<ImageBuffer, CodecError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct JpegCodec;

impl Codec for JpegCodec {
    fn name(&self) -> &str {
        "jpeg"
    }

    fn encode(&self, img: &ImageBuffer, quality: u8) -> Result<Vec<u8>, CodecError> {
        jpeg::encode(img, quality)
    }

    fn decode(&self, bytes: &[u8]) -> Result<ImageBuffer, CodecError> {
        jpeg::decode(bytes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedArtifact {
    pub payload: Vec<u8>,
    pub codec: String,
    pub quality: u8,
    pub width: usize,
    pub height: usize,
    pub bpp: f64,
}

impl CompressedArtifact {
    pub fn new(payload: Vec<u8>, codec: &str, quality: u8, width: usize, height: usize) -> Self {
        let bpp = bpp_of(payload.len(), width, height);
        Self { payload, codec: codec.to_string(), quality, width, height, bpp }
    }
}

/// Encode `img` and wrap the payload with its rate.
pub fn compress(codec: &dyn Codec, img: &ImageBuffer, quality: u8) -> Result<CompressedArtifact, CodecError> {
    let payload = codec.encode(img, quality)?;
    Ok(CompressedArtifact::new(payload, codec.name(), quality, img.width(), img.height()))
}

fn bpp_of(len: usize, width: usize, height: usize) -> f64 {
    8.0 * len as f64 / (width * height) as f64
}

/// Bits per pixel: `8 · len / (W · H)`.
pub fn bpp(artifact: &CompressedArtifact) -> f64 {
    assert!(artifact.width > 0 && artifact.height > 0, "bpp of an empty image");
    bpp_of(artifact.payload.len(), artifact.width, artifact.height)
}

#[derive(Debug, Error, PartialEq)]
#[error("original size must be positive")]
pub struct ZeroOriginalSize;

/// Size saving in percent: `(1 − new / original) · 100`.
pub fn compression_ratio(original_size: f64, new_size: f64) -> Result<f64, ZeroOriginalSize> {
    if original_size <= 0.0 {
        return Err(ZeroOriginalSize);
    }
    Ok((1.0 - new_size / original_size) * 100.0)
}

/// Resolve a codec by name. `hevc` and `webp` map to external adapters
/// configured from the environment.
pub fn codec_by_name(name: &str) -> Option<Box<dyn Codec>> {
    match name {
        "jpeg" => Some(Box::new(JpegCodec)),
        "hevc" => Some(Box::new(ExternalCodec::hevc_from_env())),
        "webp" => Some(Box::new(ExternalCodec::webp_from_env())),
        _ => None,
    }
}
