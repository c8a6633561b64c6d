//! Few-shot paired image editing.
//!
//! A user supplies a handful of `(source, target)` image pairs. Instead of fitting
//! `source -> target` directly, the model is trained on directed transformations
//! between samples of the same domain: a source-side network predicts an explicit
//! warp-plus-recolor pack taking `x_i` to `x_j`, and a conditioned latent diffusion
//! generator uses that pack (and `x_j`) to turn `y_i` into `y_j`.

pub mod diffusion_editor;
pub mod error;
pub mod image;
pub mod latent_autoencoder;
pub mod losses_metrics;
pub mod nn;
pub mod pair_sampler;
pub mod source_transformer;
pub mod synth_data;
pub mod trainer;
pub mod transform_ops;

pub use error::{Error, Result};
pub use image::ImageTensor;
