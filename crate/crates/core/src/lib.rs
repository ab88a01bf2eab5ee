//! # depkit
//!
//! Exact computations with dependence-induced representations on finite
//! alphabets.
//!
//! Given a strictly positive joint distribution over a pair of finite
//! alphabets, this crate computes the canonical dependence kernel (CDK)
//! and its modal decomposition into maximal correlation functions, checks
//! sufficiency and minimal sufficiency of statistics, generates and applies
//! dependence-preserving transformations, and evaluates / minimizes a family
//! of loss functionals (H-scores, extended log loss, extended SVM loss,
//! variational divergence losses, regularizers, hard constraints) over
//! feature tables. Everything is an exact finite sum; there is no sampling
//! noise anywhere in the core.
//!
//! ## Module map
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`probability`] | Alphabets, joint/marginal distributions, pushforwards, MI, entropy |
//! | [`features`] | Feature tables, conditional projection, composition, moments |
//! | [`cdk`] | CDK matrix, modal decomposition (SVD oracle), maximal correlation |
//! | [`transforms`] | Dependence-preserving transformations and invariance checks |
//! | [`sufficiency`] | Partitions, (minimal/joint) sufficiency tests, factorization checks |
//! | [`losses`] | Loss expression trees: evaluation, gradients, axiom checkers, parser |
//! | [`optim`] | Deterministic projected gradient descent over feature tables |
//! | [`adapters`] | The (S, T) interface distribution and feature-adapter training |
//! | [`experiments`] | Scripted end-to-end experiment suites with machine-readable reports |
//! | [`synth`] | Seeded generators for random instances (distributions, tables, maps) |
//!
//! ## Quick start
//!
//! ```rust
//! use depkit::probability::JointDistribution;
//! use depkit::cdk::{modal_decompose, DEFAULT_RANK_TOL};
//!
//! // A doubly symmetric binary source with correlation 1/2.
//! let j = JointDistribution::from_rows(
//!     &["0", "1"],
//!     &["0", "1"],
//!     &[vec![0.375, 0.125], vec![0.125, 0.375]],
//! )
//! .unwrap();
//! let md = modal_decompose(&j, DEFAULT_RANK_TOL).unwrap();
//! assert_eq!(md.rank(), 1);
//! assert!((md.sigma[0] - 0.5).abs() < 1e-12);
//! ```

pub mod adapters;
pub mod cdk;
pub mod experiments;
pub mod features;
pub mod losses;
pub(crate) mod numeric;
pub mod optim;
pub mod probability;
pub mod sufficiency;
pub mod synth;
pub mod transforms;

pub use cdk::{maximal_correlation, modal_decompose, CdkMatrix, ModalDecomposition};
pub use features::FeatureTable;
pub use losses::LossExpr;
pub use optim::{minimize, MinimizationResult, OptimConfig};
pub use probability::{Alphabet, Distribution, JointDistribution};
