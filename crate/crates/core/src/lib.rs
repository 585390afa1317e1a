//! Causal multimodal information bottleneck laboratory.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`rng`], [`graph`], [`numeric`]: dense `f64` tensors, seeded
//!   streams, a reverse-mode tape and the finite-difference oracle.
//! - [`vib`]: per-modality Gaussian encoders and the IB objective.
//! - [`attention`]: the self-attention instrument over all modality tokens.
//! - [`disentangle`]: fusion, complementary masks, alignment/task/uniformity losses.
//! - [`intervention`]: shortcut recombination and the weighted total objective.
//! - [`verify`]: closed-form derivative checks against both gradient routes.
//! - [`synth`]: multimodal data with a tunable shortcut correlation.
//! - [`model`], [`train`], [`metrics`], [`experiment`]: training, evaluation,
//!   ablations and sweeps.
//!
//! Independent work items (verification instances, ablation runs, sweep
//! points) fan out through [`par::map`], which uses rayon when the
//! `parallel` feature is on. Single training runs stay sequential and are
//! bit-reproducible from their seed.

// NaN-rejecting checks are written `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod disentangle;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod intervention;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod numeric;
pub mod optim;
pub mod par;
pub mod rng;
pub mod synth;
pub mod task;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod vib;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use numeric::{finite_diff_grad, grad, Bindings, GradientMap, ParameterSet};
pub use rng::RngStream;
pub use tensor::Tensor;
