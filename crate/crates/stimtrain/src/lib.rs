//! Training engine and diagnostics suite for weight-sharing residual networks.
//!
//! The crate implements stimulative training: alongside the usual cross-entropy
//! step on the full network, every iteration samples one or more depth-reduced
//! subnetworks (sharing all weights with the main network) and pulls their
//! outputs toward the main network's outputs with a KL term. On top of that it
//! provides the three upgraded strategies — direction-only (magnitude-free)
//! KL distillation, randomly downscaled subnetwork inputs, and restricted
//! per-stage sampling rules — plus measurement tools for subnetwork loafing,
//! logit amplitude, effective receptive fields, and the cross-entropy gap
//! bound.
//!
//! Module map:
//! - [`nn`]: residual networks with depth-masked forward/backward and exact
//!   weight sharing, parameter storage, checkpoints, FLOPs accounting.
//! - [`sampler`]: the ordered subnetwork space, its cardinality, enumeration
//!   and uniform sampling.
//! - [`losses`]: cross entropy, KL, logit decomposition, the direction-only
//!   KL loss and the combined stimulative objective, with analytic gradients.
//! - [`imgops`]: dataset ingestion (CIFAR-10 binary, synthetic textures),
//!   augmentation, and the shorter-side bilinear resize used for subnet
//!   inputs.
//! - [`train`]: SGD-momentum training loops for common / stimulative /
//!   upgraded stimulative training, schedules, evaluation, experiment runner.
//! - [`diag`]: loafing, amplitude and ERF measurements and the CE-gap bound.
//! - [`gradcheck`]: central finite-difference verification suites.

pub mod diag;
pub mod elem;
pub mod error;
pub mod gradcheck;
pub mod imgops;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod train;

pub use elem::Elem;
pub use error::{Error, Result};
