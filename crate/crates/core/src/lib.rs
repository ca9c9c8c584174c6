//! Deterministic simulator of federated learning under poisoning attacks, with
//! a defense that cross-validates each round's updates on other clients' data.
//!
//! The building blocks are usable on their own:
//!
//! - [`model`]: softmax-linear and one-hidden-layer models trained by SGD
//! - [`federation`]: client selection, local updates, FedAvg, the round loop
//! - [`attacks`]: data poisoning, update scaling / model replacement, colluding reports
//! - [`defense`]: sub-models, IID and non-IID delegation, penalties, weighted aggregation
//! - [`privacy`]: update clipping and Gaussian perturbation
//! - [`analysis`]: evasion probability (closed form and Monte Carlo), penalty curves
//! - [`harness`]: configuration, datasets, partitioning, metrics output

pub mod analysis;
pub mod attacks;
pub mod defense;
pub mod error;
pub mod federation;
pub mod harness;
pub mod model;
pub mod privacy;
pub mod rng;

pub use error::{Error, Result};
pub use federation::ClientId;
pub use model::{Dataset, ModelSpec, ParameterVector, Sample, TrainConfig};
