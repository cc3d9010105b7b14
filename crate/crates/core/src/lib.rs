//! Conditional unrolled reconstruction of undersampled Cartesian MRI.
//!
//! The model alternates a CNN refinement with a data-consistency blend whose
//! weight λ is chosen at inference time; a small hypernetwork maps λ to
//! AdaIN modulation inside each cascade so one trained model covers the
//! whole λ range.

pub mod conditioning;
pub mod config;
pub mod data;
pub mod dc;
pub mod error;
pub mod eval;
pub mod graph;
pub mod metrics;
pub mod models;
pub mod scheduler;
pub mod tensor;
pub mod training;
pub mod transforms;

pub use dc::{dc_step, LambdaValue};
pub use error::{Error, Result};
pub use models::{Model, ModelConfig};
pub use transforms::{ComplexImage, KSpace, KSpaceSlice, NoiseSpec, SamplingMask};
