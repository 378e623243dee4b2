//! Function approximators: the Gaussian MLP policy, value and cost critics,
//! their losses with analytic gradients, and Fisher-vector products.
//!
//! Backprop is written out by hand for the fixed MLP topology; there is no
//! autodiff dependency.

pub mod critic;
pub mod io;
pub mod loss;
pub mod mlp;
pub mod policy;

pub use critic::{clip_grad_norm, Adam, CostCritic, ValueNet};
pub use loss::{
    symmetry_value, symmetry_value_and_grad, CostValueMse, KlObjective, LossId, Objective,
    ObjectiveError, RewardSurrogate, SymmetryObjective, ValueMse,
};
pub use mlp::{Activation, ForwardCache, Mlp, MlpSpec, DEFAULT_LEAKY_SLOPE};
pub use policy::{
    entropy_mean, fisher_vector_product, kl_mean, log_prob, FisherOperator, GaussianPolicy,
    PolicyEval,
};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum NnError {
    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },
    #[error("input has width {got}, network expects {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("parameter vector has length {got}, expected {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
}
