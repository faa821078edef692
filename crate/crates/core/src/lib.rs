//! Hyperspectral image deconvolution with a deep-equilibrium model built on a
//! half-quadratic-splitting (HQS) solver.
//!
//! The crate is organised bottom-up:
//!
//! * [`cube`]: the spectral cube type, per-band 2-D FFTs and the cube file format.
//! * [`degrade`]: blur kernels, the circular-convolution degradation model and
//!   the five standard blur scenarios.
//! * [`denoiser`]: the learnable convolutional prior with spectral normalization
//!   and hand-written adjoints.
//! * [`hqs`]: the iteration map (denoise, then closed-form frequency-domain
//!   data-consistency solve).
//! * [`fixedpoint`]: plain and Anderson-accelerated fixed-point solvers.
//! * [`training`]: denoiser pre-training, implicit-gradient DEQ training,
//!   deep-unrolling training and plug-and-play inference.
//! * [`convergence`]: operator spectra, contraction factors and the
//!   residual-trace experiment.
//! * [`metrics`]: RMSE, PSNR, SSIM and ERGAS.
//! * [`synth`]: deterministic synthetic hyperspectral cubes.

pub mod convergence;
pub mod cube;
pub mod degrade;
pub mod denoiser;
mod error;
pub mod fixedpoint;
pub mod hqs;
pub mod metrics;
pub mod rng;
pub mod synth;
pub mod training;

pub use cube::{SpectralCube, SpectrumCube};
pub use degrade::{BlurKernel, DegradationScenario, KernelKind};
pub use denoiser::DenoiserModel;
pub use error::{Error, Result};
pub use fixedpoint::{FixedPointConfig, FixedPointTrace};
pub use hqs::HqsContext;
pub use metrics::MetricReport;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
