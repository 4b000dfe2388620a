//! Prototype-guided division of multiple-instance-learning bags into
//! consistent pseudo-bags, with the baselines, the gated-attention MIL
//! classifier trained on those pseudo-bags, and an evaluation harness.

pub mod bagdata;
pub mod divider;
pub mod error;
pub mod metrics;
pub mod micrograd;
pub mod mil;
pub mod prototype;
pub mod rng;
pub mod synthgen;
pub mod trainer;

pub use bagdata::{FeatureBag, Label};
pub use divider::{divide, DivisionAssignment, DividerConfig, Scheme};
pub use error::{Error, Result};
pub use metrics::MetricsReport;
pub use micrograd::Matrix;
pub use mil::MilModel;
pub use prototype::{Prototype, PrototypeKind, PrototypeModule};
