//! GFE-Mamba core: volumetric MRI→PET translation (GAN-ViT generator),
//! Mamba sequence classifier with tabular fusion and pixel-level bi-cross
//! attention, cohort construction, metrics, and the training harness.

pub mod bicross;
pub mod checkpoint;
pub mod cohort;
pub mod config;
pub mod error;
pub mod generator;
pub mod mamba;
pub mod metrics;
pub mod patches;
pub mod plot;
pub mod scan;
pub mod synth;
pub mod tabular;
pub mod train;
pub mod volume;

pub use error::{GfemError, Result};
