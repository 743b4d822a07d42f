//! Quasi-randomization estimation of latent participation probabilities.
//!
//! A convenience (non-probability) sample is combined with a probability
//! reference sample whose inclusion probabilities are known. Four estimators
//! of the convenience-sample participation probabilities are provided:
//!
//! * `CLW`: pseudo-likelihood over the population, population sum replaced by a
//!   reference-weighted sum.
//! * `ILR`: exact Bernoulli likelihood on the stacked sample, with the stacked
//!   membership probability linked to the participation probability through
//!   `pi_z = pi_c / (pi_c + pi_r)`.
//! * `PILR`: one-step pseudo-likelihood on the convenience-sample-plus-population
//!   stack through `pi_delta = pi_c / (1 + pi_c)`.
//! * `ALP`: the two-step variant of `PILR` (weighted logistic regression, then
//!   inversion), kept as a baseline.
//!
//! Fitted probabilities feed a Hájek inverse-probability-weighted mean with
//! closed-form sandwich variances ([`inference`]). The [`theory`] and [`simlab`]
//! modules evaluate the population-level variances and run Monte Carlo studies.

pub mod designs;
pub mod error;
pub mod inference;
pub mod io;
pub mod model;
pub mod propensity;
pub mod rng;
pub mod simlab;
pub mod theory;
pub mod verify;

mod linalg;

pub use error::{Error, Result};
pub use model::{design_row, FinitePopulation, MethodKind, ObservedData, PropensityFit, PropensityParams};
pub use propensity::{fit, SolverConfig};
