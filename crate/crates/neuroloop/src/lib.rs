//! Closed-loop stimulate/record simulation workbench.
//!
//! The crate models a full closed-loop experiment: a sensory value from a
//! gridworld task is rate-encoded into stimulation pulse trains, delivered to
//! a substrate (a plastic spiking network, a Poisson control, a replayed
//! recording, or a planted-quality oracle), the evoked activity is decoded
//! back into an action by region spike counting, and the resulting reward
//! selects a feedback stimulation pattern. On top of the loop sit a
//! distributed two-stage parameter screen (TCP work server + clients, or an
//! in-process worker pool), a small from-scratch DQN used as a task
//! baseline, and the rank statistics used to compare score populations.
//!
//! Everything is deterministic under explicit seeds: a trial run twice with
//! the same configuration serializes to identical bytes.

pub mod analysis;
pub mod codec;
pub mod env;
pub mod error;
pub mod feedback;
pub mod runner;
pub mod substrate;
pub mod sweep;

pub use error::{Error, Result};
