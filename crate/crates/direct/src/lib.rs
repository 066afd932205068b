//! Exact evidence-lower-bound computation and optimization for variational
//! inference with discrete latent-variable priors.
//!
//! The hypothesis space is a Cartesian grid of `m̄^b` weight configurations.
//! Rather than ever materializing a vector of that length, every quantity the
//! ELBO needs (`q`, `log p`, `log q`, and model-specific likelihood terms) is
//! held as a sum of Kronecker-product vectors ([`kron`]), which turns the
//! exponentially large inner products of the ELBO into products of small
//! per-variable dots. On top of that algebra sit:
//!
//! - [`variational`]: categorical mean-field and mixture distributions over
//!   the grid, entropy/cross-entropy terms, mixture entropy and prior lower
//!   bounds, the sampled entropy surrogate, and bit-packed posterior samples;
//! - [`glm`]: exact ELBO, analytic gradients, and exact predictive moments
//!   for discretely relaxed linear regression with a discrete noise prior;
//! - [`logistic`]: an ELBO lower bound for discretely relaxed logistic
//!   regression, stabilized in log space;
//! - [`bnn`]: a quadratic-activation Bayesian network whose forward pass
//!   evaluates every hypothesis simultaneously, with an exact ELBO;
//! - [`features`]: CSV ingestion, standardization, random Fourier features,
//!   support-grid construction, k-fold splits, hyperparameter heuristics;
//! - [`train`]: L-BFGS with strong-Wolfe line search for deterministic
//!   objectives, seeded SGD for stochastic surrogates, a score-function
//!   (REINFORCE) baseline, and a benchmark harness comparing the two;
//! - [`qinfer`]: affine feature quantization and integer-arithmetic
//!   prediction from bit-packed posterior samples;
//! - [`artifact`]: a versioned binary model container with bit-exact
//!   round-tripping.

pub mod artifact;
pub mod bnn;
pub mod error;
pub mod features;
pub mod glm;
pub mod kron;
pub mod logistic;
pub mod numeric;
pub mod qinfer;
pub mod train;
pub mod variational;

pub use error::{DirectError, Result};
pub use kron::{KronSumVec, KronTerm};
pub use variational::{
    EntropyAnchor, MeanFieldDist, MixtureDist, QuantizedSample, SupportGrid, VariationalDist,
};

/// The deterministic generator used everywhere a seed is accepted.
pub type SeededRng = rand_chacha::ChaCha8Rng;

/// Construct the crate-standard deterministic generator from a seed.
pub fn seeded_rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}
