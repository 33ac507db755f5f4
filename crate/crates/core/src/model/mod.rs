//! The shared encoder, its heads, the modality decoders and the full model state.

mod config;
pub mod decoder;
pub mod encoder;
pub mod heads;
mod state;

pub use config::{EncoderConfig, DECODER_STAGES};
pub use decoder::{Decoder, DecoderKind};
pub use encoder::Encoder;
pub use state::{init_model, Branch, Head, ModelState};
