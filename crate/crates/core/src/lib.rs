//! Continual learning from an unlabeled, temporally correlated stream with a
//! fixed-size buffer of synthetic samples.
//!
//! The buffer is updated by one-step gradient matching at freshly randomised
//! models (second-order term by finite differences), the stream is
//! pseudo-labelled by windowed majority voting, and a contrastive term keeps
//! buffer classes apart in feature space. Selection-based replay baselines
//! share the same stream, labels and retraining schedule.
//!
//! All numerics are generic over [`Scalar`]; the aliases below fix the
//! common precisions.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod buffer;
pub mod condense;
pub mod data;
pub mod dual;
pub mod error;
pub mod labeling;
pub mod model;
pub mod orchestrator;
pub mod rng;
pub mod scalar;
pub mod stream;
pub mod tensor;

pub use baselines::{Policy, SelectionBuffer};
pub use buffer::{CondensedBuffer, InitMode};
pub use condense::{MatchConfig, Variant};
pub use data::{Dataset, Normalization};
pub use dual::Dual;
pub use error::{Error, Result};
pub use model::{Architecture, ClassifierModel, GradientVector, WeightedBatch};
pub use orchestrator::{ExperimentConfig, Method, RunMetrics};
pub use scalar::{Scalar, Storable};
pub use stream::{Stream, StreamSegment, StreamSpec};
pub use tensor::{ImageBatch, Matrix, Shape};

pub type Model64 = ClassifierModel<f64>;
pub type Model32 = ClassifierModel<f32>;
pub type Gradient64 = GradientVector<f64>;
pub type Images64 = ImageBatch<f64>;
pub type Images32 = ImageBatch<f32>;
