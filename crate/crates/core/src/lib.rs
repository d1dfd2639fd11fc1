//! Micro-motion transformer: patch embedding, a symmetric encoder/decoder,
//! blockwise frame swapping, diagonal cross-frame attention and
//! contextual-token saliency, with synthetic data and training workflows.
//!
//! ```
//! use mubert::data::synth::{generate_pair, GenConfig};
//! use mubert::patch::{patchify, unpatchify};
//!
//! let sample = generate_pair(&GenConfig::default(), 7).unwrap();
//! let patches = patchify(&sample.frame_t, 8).unwrap();
//! assert_eq!(patches.len(), 64);
//! assert_eq!(unpatchify(&patches), sample.frame_t);
//! ```

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod heatmap;
pub mod image;
pub mod micro_attention;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod patch;
pub mod rng;
pub mod swap;
pub mod train;

pub use error::{Error, Result};
