//! Prompt-tuned unit language model for pathological speech classification.
//!
//! The pipeline turns 16 kHz audio into frame features ([`featio`]), quantizes
//! frames into discrete units with k-means ([`quantizer`]), and classifies
//! fixed-length unit segments with a frozen causal Transformer ([`ulm`]) that is
//! steered by trainable disease, language and class prompts ([`prompts`]). A
//! learned linear [`verbalizer`] maps next-unit logits to task classes, the
//! [`trainer`] optimizes only prompts and verbalizers, and [`inference`] turns
//! segment predictions into patient decisions by thresholded voting.
//!
//! Data-parallel loops (frame assignment, per-segment forward/backward) run on
//! rayon when the `parallel` feature is enabled; see [`exec`].

pub mod datasets;
pub mod error;
pub mod exec;
pub mod featio;
pub mod inference;
pub mod prompts;
pub mod quantizer;
pub mod trainer;
pub mod ulm;
pub mod verbalizer;

pub use error::{Error, Result};
pub use exec::Exec;

/// Floating-point element type used by the model, prompts and trainer.
///
/// Gradient checks run in `f64`; training defaults to `f32`.
pub trait Real: ndarray::NdFloat + std::iter::Sum + Default {
    const DTYPE: &'static str;
    const BYTES: usize;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}
