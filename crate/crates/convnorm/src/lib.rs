//! Frequency-domain preconditioning of multi-channel circular
//! convolution layers, with exact spectral analysis and a small training
//! harness.
//!
//! A convolution layer acts per output channel k as a row of circulant
//! blocks A_k = [C_{a_k1} | …]. Because circulants diagonalize under the
//! DFT, the channel's preconditioner (A_kA_kᵀ + εI)^{−1/2} is itself a
//! circulant whose spectrum is (Σ_j |â_kj|² + ε)^{−1/2}, computable in
//! O(n log n) without ever materializing a matrix. Applying it makes the
//! channel operator a tight frame: Q_kQ_kᵀ = I.
//!
//! The crate keeps two deliberately independent evaluation routes for
//! every claim: a fast spectral path (rustfft) and slow oracles (direct
//! O(n²) transforms, dense matrices built from cyclic shifts, dense
//! eigen/SVD factorizations). The verification suite and the tests hold
//! the routes to tight tolerances against each other.
//!
//! Modules:
//! - [`tensor`]: dense row-major tensors, kernel stacks, pad / stride /
//!   flip primitives.
//! - [`io`]: the CNT1 binary tensor format.
//! - [`fourier`]: the DFT convention and the convolution family.
//! - [`circulant`]: dense circulant materialization (oracle side).
//! - [`norm`]: preconditioner spectra, activation normalization, kernel
//!   reparametrization, strided / cross-correlation adapters, the
//!   evaluation moving average.
//! - [`spectral`]: exact singular values, condition numbers, tight-frame
//!   residuals, norm bounds.
//! - [`oracle`]: the slow reference routes.
//! - [`train`]: a toy two-layer network, manual gradients, gradient
//!   checks, and the synthetic classification task.
//! - [`verify`]: named runtime self-checks shared by the CLI and tests.
//! - [`cli`]: the command-line interface.

pub mod circulant;
pub mod cli;
pub mod error;
pub mod fourier;
pub mod io;
pub mod norm;
pub mod oracle;
pub mod spectral;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use fourier::{circular_convolve, dft, idft, ConvMode, FreqGrid};
pub use norm::{
    normalize_activations, precond_spectrum, reparam_kernels, PrecondSpectrum, DEFAULT_EPS,
};
pub use spectral::{layer_singular_values, spectral_report, SpectralReport};
pub use tensor::{ActivationBatch, KernelStack, Tensor};

/// Singular values at or below this threshold are treated as exact
/// zeros: condition numbers become +∞ and, with ε = 0, preconditioner
/// construction refuses the channel. Power sums (Σ|â|²) are compared
/// against its square.
pub const SPECTRAL_FLOOR: f64 = 1e-14;
