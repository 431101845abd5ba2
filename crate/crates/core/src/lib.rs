//! Learning the causal structure of factored MDPs and using it to speed up
//! downstream reinforcement learning.
//!
//! The crate is organized around one pipeline:
//!
//! ```text
//!   env        synthetic factored environments with known ground-truth graphs
//!   nn         dense networks, two-tower score networks, Adam, loss machinery
//!   implicit   per-variable energy models of the dynamics, contrastive training
//!   explicit   Gaussian-likelihood baseline dynamics models
//!   cmi        conditional-mutual-information estimation and graph recovery
//!   reward     reward predictors and reward-parent discovery
//!   abstraction  bisimulation / controllability state abstractions
//!   sac        soft actor-critic task learner driven by learned abstractions
//!   oracle     exact CMI by enumeration and finite-difference gradient checks
//!   harness    experiment configs, artifact layout, end-to-end pipelines
//! ```
//!
//! All randomness flows through named, seed-derived streams ([`rng`]) so that
//! every artifact is reproducible byte-for-byte. Heavy loops are data-parallel
//! when the `parallel` feature (default) is enabled and fall back to
//! sequential iteration otherwise; results are identical either way.

pub mod abstraction;
pub mod cmi;
pub mod env;
pub mod error;
pub mod exec;
pub mod explicit;
pub mod harness;
pub mod implicit;
pub mod nn;
pub mod oracle;
pub mod reward;
pub mod rng;
pub mod sac;

pub use error::Error;
