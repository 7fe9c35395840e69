//! Multi-scale residual-quantization tokenizer.
//!
//! Latent space is pixel space (three channels in `[-1, 1]`) at a small
//! resolution; there is no learned convolutional autoencoder. The pinned
//! resampler pair is area-average down / bilinear (align-corners-false) up.

pub mod codebook;
pub mod feature_map;
pub mod pyramid;
pub mod resample;
pub mod schedule;

pub use codebook::{fit_codebook, CodeBook, FitConfig, FitTrace};
pub use feature_map::FeatureMap;
pub use pyramid::{
    accumulate_prefix, decode_pyramid, encode_pyramid, encode_with_residuals, perturb_latents,
    TokenGrid, TokenPyramid,
};
pub use resample::{area_downsample, bilinear_upsample};
pub use schedule::{build_scale_schedule, ScaleSchedule};
