//! Estimation and optimization of directed-information rates between
//! continuous-valued stochastic processes.
//!
//! The crate provides:
//!
//! - [`tensor`]: a small define-by-run reverse-mode autodiff engine over
//!   dense `f64` tensors, sized for tiny recurrent networks trained by
//!   backpropagation through time;
//! - [`nn`]: the modified LSTM cell that scores joint and reference samples
//!   with a shared head, the potential networks of the estimator, and the
//!   recurrent input generator with power-constraint layers;
//! - [`estimators`]: Donsker-Varadhan objectives for directed information
//!   and mutual information, reference sampling, and Monte-Carlo evaluation;
//! - [`channels`]: additive-Gaussian channel simulators (memoryless, MA(1),
//!   MIMO AR(1)) with open- and closed-loop rollouts differentiable through
//!   the generator;
//! - [`baselines`]: analytic and numeric ground truths (closed-form
//!   capacities, water-filling, quantile transforms, 1-D Wasserstein);
//! - [`train`]: the estimation and capacity-optimization training loops,
//!   configuration, and dataset ingestion.
//!
//! The `parallel` feature (on by default) enables rayon dispatch for large
//! matrix products and Monte-Carlo evaluation blocks. Results are
//! bit-identical with the feature disabled: chunking is fixed and
//! reductions always run in a fixed order.

pub mod baselines;
pub mod channels;
pub mod error;
pub mod estimators;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{NodeId, Tape, Tensor};
