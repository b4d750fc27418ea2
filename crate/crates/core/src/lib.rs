//! Model surgery for Mamba-2-style selective state-space language models.
//!
//! The crate loads fp32 checkpoints, collects calibration statistics, and applies
//! structured and unstructured pruning to the SSM mixer: magnitude-times-activation
//! weight masking, state-channel and head-channel removal, head merging, and
//! whole-head pruning with output-bias compensation. An evaluation harness measures
//! perplexity, throughput, and parameter compression before and after surgery.
//!
//! Everything is deterministic: a single seed drives all randomness, reductions
//! accumulate in f64 with a fixed order, and results are bit-identical across
//! thread counts.

pub mod calib;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod importance;
pub mod model;
pub mod prune;
pub mod runtime;
pub mod tape;
pub mod tensor;
pub mod toy;

pub use calib::{ActivationStats, CalibBundle, CalibSet, LayerStats, TaylorAccumulator};
pub use error::{Error, Result};
pub use eval::{ComponentRow, EvalReport, Perplexity, SweepRow, ThroughputRow};
pub use importance::{Granularity, ImportanceScores};
pub use model::{BlockParams, HeadPattern, HeadView, MlpParams, ModelDims, ModelParams};
pub use prune::{LayerPlan, PruneMethod, PrunePlan, PruneReport, TargetFilter};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;
