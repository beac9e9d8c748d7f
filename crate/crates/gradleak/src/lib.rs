//! gradleak: a desk-scale testbed for gradient inversion attacks and defenses
//! against FedSGD training.
//!
//! The crate simulates federated SGD on a small CNN, lets an honest-but-curious
//! server capture weight/gradient snapshots at a configurable rate, runs
//! optimization-based recovery attacks (DLG, Inverting Gradients,
//! GradInversion, Multiple Updates) against those snapshots, applies
//! client-side defenses (Gaussian noise, PRECODE, DCS), and scores recoveries
//! with aligned image metrics plus a training-wide consistency index.
//!
//! See the `examples/` directory for one runnable example per capability and
//! the `gradleak` binary for the experiment pipeline CLI.

pub mod attacks;
pub mod defenses;
pub mod config;
pub mod error;
pub mod io;
pub mod fedsim;
pub mod datasets;
pub mod metrics;
pub mod models;
pub mod runner;
pub mod tensor;

pub use error::{Error, Result, TensorError};
