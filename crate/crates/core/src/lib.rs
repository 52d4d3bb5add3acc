//! Dyna-style model-based reinforcement learning with unsupervised model
//! adaptation.
//!
//! The crate trains a bootstrapped ensemble of probabilistic dynamics models,
//! generates branched rollouts for soft actor-critic, and aligns the feature
//! distributions the models produce on real and simulated inputs (Wasserstein-1
//! critic with gradient penalty, or a kernel MMD). The [`theory`] module checks
//! the occupancy-measure return bounds exactly on finite MDPs.

pub mod adapt;
pub mod dyna;
pub mod dynamics;
pub mod envs;
pub mod error;
pub mod harness;
pub mod numcore;
pub mod parallel;
pub mod rng;
pub mod sac;
pub mod theory;

pub use error::{Error, Result};
