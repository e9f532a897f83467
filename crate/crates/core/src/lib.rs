//! Desk-scale neural architecture search by population based training.
//!
//! A population of small dense networks trains in parallel; at synchronous
//! intervals the worst members are replaced by layer-wise mixtures of the
//! best members, with inherited weights passed through shrink-perturb.
//! The crate also ships the comparison baselines (random search, mutation),
//! the inheritance ablations, greedy weight-averaging soups, exact
//! nonparametric statistics, and a reproducible experiment CLI surface.

pub mod analysis;
pub mod config;
pub mod error;
pub mod evolve;
pub mod layers;
pub mod network;
pub mod optim;
pub mod persist;
pub mod report;
pub mod rng;
pub mod runner;
pub mod schedule;
pub mod space;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
