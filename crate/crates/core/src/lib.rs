//! Synthetic steering simulator and bound-verification harness for softmax
//! language models.
//!
//! Layered residual models with a softmax head are built so that the
//! steering assumptions hold exactly (or approximately), steering vectors are
//! injected per layer, and alignment and helpfulness are measured and
//! checked against closed-form bounds and brute-force oracles.

pub mod bounds;
pub mod construct;
pub mod error;
pub mod extraction;
pub mod fitting;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod rng;
mod serde_float;
pub mod validators;

pub use error::{Error, Result};
pub use model::{HiddenState, LayeredModel, SteeringVectorSet, TokenDistribution};
