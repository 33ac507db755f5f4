//! Cross-modal self-supervised pretraining for paired histology and
//! fluorescence patches, with the downstream evaluation harness.

pub mod curriculum;
pub mod downstream;
pub mod experiment;
pub mod error;
pub mod modality;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod raster;
pub mod synthdata;
pub mod views;

pub use error::{Error, Result};
pub use modality::Modality;
