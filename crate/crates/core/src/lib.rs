//! Swing option pricing with firm local and global volume constraints.
//!
//! The premium of a normalized swing contract is computed by backward dynamic
//! programming on a quantized Markov structure process. Only integer global
//! constraints are priced directly; with those, optimal purchases are
//! bang-bang (`0` or `1` per date) and the premium on the whole admissible
//! triangle is recovered by affine interpolation on a triangular tiling.
//!
//! Modules:
//! - [`contracts`]: constraint arithmetic, normalization, tiling, reachable sets.
//! - [`oracle`]: brute-force and closed-form reference pricers for small instances.
//! - [`quantizer`]: codebooks, Voronoi projection, Lloyd / CLVQ / 1-D Newton optimizers.
//! - [`model`]: the two-factor Gaussian spot model and the Black strip of calls.
//! - [`tree`]: quantized tree construction, quantized DP, premium surface, policies.
//!
//! All numerical types are generic over [`Scalar`] (`f32` or `f64`); the
//! `*64` aliases below fix the scalar to `f64`.

pub mod contracts;
pub mod error;
pub mod model;
pub mod normal;
pub mod oracle;
pub mod quantizer;
pub mod scalar;
pub mod tree;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type GlobalConstraints64 = contracts::GlobalConstraints<f64>;
pub type PremiumSurface64 = contracts::PremiumSurface<f64>;
pub type RawContract64 = contracts::RawContract<f64>;
pub type ScenarioLattice64 = oracle::ScenarioLattice<f64>;
pub type TwoPeriodInstance64 = oracle::TwoPeriodInstance<f64>;
pub type Codebook64 = quantizer::Codebook<f64>;
pub type OptimizerReport64 = quantizer::OptimizerReport<f64>;
pub type TwoFactorParams64 = model::TwoFactorParams<f64>;
pub type QuantTree64 = tree::QuantTree<f64>;
pub type TransitionMatrix64 = tree::TransitionMatrix<f64>;
pub type DpTable64 = tree::DpTable<f64>;

pub type GlobalConstraints32 = contracts::GlobalConstraints<f32>;
pub type PremiumSurface32 = contracts::PremiumSurface<f32>;
pub type Codebook32 = quantizer::Codebook<f32>;
pub type QuantTree32 = tree::QuantTree<f32>;
