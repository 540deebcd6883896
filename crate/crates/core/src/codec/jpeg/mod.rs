//! From-scratch baseline JPEG codec.

mod dct;
mod decoder;
mod encoder;
pub mod tables;

pub use decoder::decode;
pub use encoder::encode;
