//! Advice-efficient prediction with expert advice.
//!
//! An exponential-weights forecaster over `N` experts that looks at the losses of
//! only `M` of them per round. One expert is drawn from the weights and played,
//! `M - 1` more are drawn uniformly without replacement, and every observed loss
//! is divided by its inclusion probability so the cumulative estimates stay
//! unbiased. With the anytime rate `eta_i = sqrt(M ln N / (i N))` the expected
//! regret after `T` rounds is at most `2 sqrt((N / M) T ln N)`.
//!
//! The numeric core is generic over the scalar type. Floating-point code paths
//! (softmax, learning rate) require [`num_traits::Float`]; the field-only paths
//! (inclusion probabilities, importance weights, the enumeration oracles) accept
//! any [`Scalar`], including the exact [`Rational`] type.

// `!(x >= 0)` style checks below also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod algorithms;
pub mod cli;
pub mod environments;
mod error;
pub mod harness;
pub mod primitives;
mod scalar;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use algorithms::{
    best_expert_in_hindsight, AdviceEfficientLearner, AdvicePolicy, FullInfoHedge, LearnerConfig,
    ObservedLosses, Phase, RoundTrace,
};
pub use environments::{Environment, LossOracle, QueryLedger};
pub use harness::{Algorithm, EnvironmentSpec, ExperimentConfig, ExperimentResult};
pub use primitives::{
    compute_distribution, importance_weighted_estimate, inclusion_probability, learning_rate,
    sample_experts, CumulativeEstimates, LossValue, SampleSet, SamplingDistribution,
};

/// Arbitrary-precision rational used by the exact enumeration oracles.
pub type Rational = num_rational::BigRational;

pub type Distribution = SamplingDistribution<f64>;
pub type Distribution32 = SamplingDistribution<f32>;
pub type ExactDistribution = SamplingDistribution<Rational>;
pub type Estimates = CumulativeEstimates<f64>;
pub type Loss = LossValue<f64>;
pub type ExactLoss = LossValue<Rational>;
pub type Learner = AdviceEfficientLearner<f64>;
pub type Learner32 = AdviceEfficientLearner<f32>;
pub type Hedge = FullInfoHedge<f64>;
pub type Trace = RoundTrace<f64>;

/// Deterministic random stream handed to every stochastic operation.
pub type Rng = rand_chacha::ChaCha8Rng;
