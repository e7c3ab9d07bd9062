//! Distribution-preserving generative steganography with receiver-side
//! latent refinement.
//!
//! A message is embedded by turning each bit into a uniform draw from one
//! half of `(0, 1)` and mapping it through the standard normal quantile
//! function; the resulting latent is exactly Gaussian for fair bits. A fixed
//! surrogate generator turns the latent into an image. The receiver encodes
//! the (possibly degraded) image back to a latent, refines that latent by
//! gradient descent on the pixel reconstruction error, and reads each bit
//! from the sign of the recovered coordinate.
//!
//! Modules:
//!
//! - [`codec`]: bits to Gaussian latents and back
//! - [`generator`]: invertible latent map, smooth decoder, analytic encoder
//! - [`channels`]: float16, bit-depth and DCT-quantisation degradations
//! - [`optimizer`]: gradient-descent refinement with per-step bound checks
//! - [`security`]: goodness-of-fit tests for the embedding distribution
//! - [`harness`]: embed/extract commands and paired Monte-Carlo benchmarks
//! - [`formats`]: message, image and tensor file formats

pub mod channels;
pub mod codec;
pub mod error;
pub mod formats;
pub mod generator;
pub mod harness;
pub mod optimizer;
pub mod security;

pub use channels::{apply_channel, channel_severity_order, quality_to_table, ChannelConfig, QuantTable};
pub use codec::{
    bit_accuracy, bits_to_uniform, embed_bits, inverse_normal_cdf, latent_to_bits, normal_cdf, uniform_to_latent,
    BitMessage, LatentShape, LatentTensor, SamplingMode, StegoKey, UniformVector,
};
pub use error::{Result, StegoError};
pub use generator::{
    make_generator, Activation, DecoderArch, GeneratorParams, ImageShape, ImageTensor, LipschitzEstimate,
    DEFAULT_IMAGE, DEFAULT_LATENT,
};
pub use optimizer::{
    extract_with_optimization, refine_latent, verify_trace, BoundReport, EtaPolicy, OptimizationTrace,
    OptimizerConfig,
};
pub use harness::{
    cmd_attack, cmd_bench, cmd_crossmodel, cmd_embed, cmd_extract, EmbedRequest, ExperimentSpec, ExtractReport,
    ExtractRequest, GeneratorSpec, ResultRow, ResultTable,
};
pub use security::{empirical_kl, ks_test_gaussian, uniformity_test, GoodnessReport};
