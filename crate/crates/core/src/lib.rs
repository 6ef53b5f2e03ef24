//! Data machinery for open-vocabulary temporal repetition counting.
//!
//! - [`annotation`]: domain types, release-format I/O, validation, statistics
//! - [`consistency`]: inter-rater agreement, resolution, split assignment
//! - [`density`]: per-frame density targets and loss arithmetic
//! - [`metrics`]: MAE / OBOE / OBZE / RMSE / IOU
//! - [`periodicity`]: self-similarity repetition counter and candidate filter
//! - [`synthgen`]: seeded synthetic sequences with exact ground truth
//! - [`curation`]: the four-stage candidate-to-release pipeline

pub mod annotation;
pub mod consistency;
pub mod curation;
pub mod density;
pub mod features;
pub mod metrics;
pub mod numeric;
pub mod periodicity;
pub mod synthgen;

pub use annotation::{Annotation, ClipKey, ClipRecord, ClipState, Source, Split, TimeSegment};
pub use consistency::{AgreementPolicy, ResolutionOutcome, Verdict};
pub use curation::{NarrationCandidate, PipelineReport};
pub use density::{DensityVector, LossWeights};
pub use features::FeatureSequence;
pub use metrics::{EvalPair, MetricReport, Normalization};
pub use periodicity::{CounterConfig, PeriodicityResult};
pub use synthgen::{SynthSpec, SynthTruth};
