//! Group-robust preference optimization for multi-label classification.
//!
//! A partition of the label set into a privileged group and its complement
//! drives two objectives: preference-based losses (DPO / SimPO / CPO) built
//! from per-label confusing sets for the privileged labels, and a hinged
//! slack constraint against a frozen reference for the rest. A minimax loop
//! reweights the two groups by mirror ascent while the model descends.
//!
//! Everything is generic over the scalar type through [`scalar::Real`];
//! the aliases below pin the default `f64` instantiation.

pub mod data;
pub mod experiments;
pub mod grpo;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod scalar;

/// Default-precision dataset.
pub type Dataset = data::Dataset<f64>;
/// Default-precision model parameters.
pub type ModelParams = model::ModelParams<f64>;
/// Default-precision frozen reference.
pub type ReferenceParams = model::ReferenceParams<f64>;
/// Default-precision loss hyperparameters.
pub type LossConfig = losses::LossConfig<f64>;
/// Default-precision training configuration.
pub type TrainConfig = grpo::TrainConfig<f64>;
/// Default-precision training state.
pub type TrainState = grpo::TrainState<f64>;
/// Default-precision group weights.
pub type GroupWeights = grpo::GroupWeights<f64>;
