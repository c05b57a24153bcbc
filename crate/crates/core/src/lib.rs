//! Training engine for networks whose backward pass can route errors
//! through feedback weights other than the forward weights.
//!
//! The pieces, bottom up: [`tensor`] kernels, [`feedback`] rules, the
//! [`network`] layer stack, the [`optim`] update rules, [`diagnostics`] on
//! trained weights, and the [`harness`] that ties them into runs.

pub mod diagnostics;
pub mod error;
pub mod feedback;
pub mod harness;
pub mod network;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use feedback::{Feedback, FeedbackRule, LayerAssignment, RuleKind, Scale};
pub use network::{LayerSpec, Mode, Network, NetworkSpec};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use tensor::{ConvGeometry, Tensor};
