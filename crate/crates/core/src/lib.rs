//! Constrained policy optimization with a log-barrier trust-region update.
//!
//! Layers, bottom up: [`cmdp`] problem types and the env interface, [`nn`]
//! function approximators, [`envs`] toy tasks, [`rollout`] batch collection
//! and advantage estimation, [`barrier`] the optimizer and trainer, and
//! [`harness`] configuration, metrics and experiment drivers.

pub mod barrier;
pub mod cmdp;
pub mod envs;
pub mod nn;
pub mod rollout;
pub mod harness;
