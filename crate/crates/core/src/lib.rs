//! Sequence-modeling toolkit: affine autoregressive flows as temporal
//! pre-processing, a flow-augmented sequential latent variable model trained
//! with a filtering objective, and decorrelation diagnostics — all on a small
//! hand-rolled reverse-mode autodiff core so results are exactly
//! reproducible and checkable against closed-form oracles.

pub mod array;
pub mod autodiff;
pub mod conditioner;
pub mod data;
pub mod error;
pub mod flow;
pub mod latent;
pub mod metrics;
pub mod nn;
pub mod slvm;
pub mod train;
pub mod optim;
pub mod rng;
