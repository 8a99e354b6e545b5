//! Audio-visual segmentation at desk scale.
//!
//! The pipeline segments sound-emitting objects in short synthetic video
//! clips. Per clip, a toy patch-attention image encoder and a spectrogram
//! encoder produce visual and audio embeddings; a stack of decomposed
//! temporal and spatial cross-modal attention blocks updates both streams
//! bidirectionally; a two-way mask decoder consumes the updated visual
//! embedding as a dense prompt and the updated audio embedding as a sparse
//! prompt and emits one binary mask per frame.
//!
//! Everything runs on a small reverse-mode tape ([`tape::Tape`]) over a dense
//! row-major tensor type ([`tensor::Tensor`]) that is generic over `f32`
//! (training) and `f64` (gradient checking against central differences).

pub mod attn;
pub mod backbones;
pub mod config;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod stbt;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::StBavaConfig;
pub use error::{Error, Result};
pub use tensor::Tensor;
