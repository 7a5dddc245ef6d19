//! Guided iterative image reconstruction with neural-style-transfer
//! regularization (RNST).
//!
//! The pipeline reconstructs a clean, style-matched image from a noisy
//! low-quality input and a single style guidance image. Each outer
//! iteration denoises the current iterate, generates style-transferred
//! candidates at several transfer depths through a frozen VGG-16 feature
//! extractor, and picks the best blend of the two pull directions by a
//! line search over step sizes, scored with a one-step transfer loss.
//!
//! Modules map onto the pipeline stages:
//!
//! - [`image`]: the `[0,1]`-normalized grayscale image type, clipping and
//!   seeded Gaussian corruption.
//! - [`phantom`]: piecewise-constant ellipse phantoms for desk-scale
//!   experiments.
//! - [`features`]: the frozen VGG-16 convolutional trunk with reverse-mode
//!   gradients back to the input pixels.
//! - [`nst`]: Gram matrices, content/style losses (L1 and L2 variants) and
//!   the iterative style-transfer engine.
//! - [`denoise`]: identity, Gaussian-blur, non-local-means and external
//!   subprocess denoisers.
//! - [`rnst`]: the line-search gradient-descent outer loop.
//! - [`metrics`]: PSNR and uniform-window SSIM.
//! - [`dataio`]: slice loading/saving, the portable float image format and
//!   guidance pairing policies.

pub mod dataio;
pub mod denoise;
mod error;
pub mod features;
pub mod image;
pub mod metrics;
pub mod nst;
pub mod phantom;
pub mod rnst;

pub use error::{Error, Result};
pub use image::{add_awgn, clip01, Image, NoiseSpec};
pub use phantom::{make_phantom_pair, PhantomSpec};
