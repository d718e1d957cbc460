//! Counterfactual fault-prevention control for wind-turbine transformers.
//!
//! A small ReLU classifier flags anomalous transformer states from 10-minute
//! SCADA samples. For every flagged sample the crate builds a convex
//! mixed-integer quadratic program that embeds the classifier and two
//! tree-ensemble temperature surrogates as exact constraints, and solves it
//! with its own branch-and-bound solver. The optimum is the closest
//! controllable state (power, nacelle and transformer temperature) that the
//! classifier accepts as healthy.
//!
//! Module map:
//!
//! * [`schema`]: feature space, bounds, normalization, power curve.
//! * [`predictors`]: forward evaluation of the MLP classifier and tree ensembles.
//! * [`train`]: temporal split, undersampling, MLP and boosted-tree training.
//! * [`problem`] / [`encode`]: MIQP model and big-M encodings of the predictors.
//! * [`solver`]: branch-and-bound over a bounded-variable simplex/active-set core.
//! * [`counterfactual`]: operator, manufacturer and revenue-driven problems.
//! * [`dataset`]: CSV series files.
//! * [`synth`]: deterministic synthetic SCADA generator.
//! * [`harness`]: month replay with shutdown fallback and revenue accounting.
//! * [`oracle`]: brute-force verifiers used by the test suites.

pub mod counterfactual;
pub mod dataset;
pub mod encode;
pub mod error;
pub mod harness;
pub mod oracle;
pub mod predictors;
pub mod problem;
pub mod schema;
pub mod solver;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
