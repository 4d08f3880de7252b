//! Self-certified continual learning with Continual Pick-to-Learn.
//!
//! A learner is trained task by task with a compression-based replay buffer;
//! after every task each past task receives a numerically computed upper
//! bound on its true risk. The run leaves behind a [`continual::CompressionRecord`]
//! from which the exact predictor, and hence every certificate, can be
//! rebuilt and checked.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod bounds;
pub mod continual;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod p2l;
pub mod rng;
pub mod tasks;

pub use bounds::Certificate;
pub use continual::{cop2l_train, reconstruct, CoP2LConfig, CompressionRecord, Hyperparameters};
pub use error::{Error, Result};
pub use metrics::AccuracyMatrix;
pub use model::{Learner, LearnerConfig, ParameterVector};
pub use numerics::Probability;
pub use tasks::TaskStream;
