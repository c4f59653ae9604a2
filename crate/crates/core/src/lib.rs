//! Sparse-representation sub-pixel quantification of hyperspectral pixels.
//!
//! Pixels are unmixed against a labeled spectral library with a
//! simplex-constrained least-squares solver and greedy backward
//! sparsification ([`solver`]). Libraries can be built automatically by
//! archetype selection in input or RBF-kernel space ([`archetypes`]) and
//! pruned by annealed birth-death rjMCMC ([`mcmc`]). [`preprocess`] holds the
//! LOF outlier filter, [`metrics`] the evaluation statistics, [`data`] the
//! file formats and synthetic scenes, and [`pipeline`] the command-level
//! workflow used by the `sparse-unmix` binary.

pub mod archetypes;
pub mod data;
pub mod error;
pub mod mcmc;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod preprocess;
pub mod solver;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use error::{Error, Result};
pub use model::{
    validate_dataset, ClassId, ClassSet, CoefficientVector, Dataset, FractionVector, Geometry,
    LabeledSpectrum, SpectralLibrary, Spectrum,
};

/// Every random component uses ChaCha8 seeded through `seed_from_u64`, so
/// seeded results are reproducible across platforms.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
