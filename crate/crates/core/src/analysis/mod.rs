//! Bias/variance/MSE summaries of training runs, Monte-Carlo verification of
//! the variance and clipping bounds, and self-consistency ratio metrics.

mod bounds;
mod consistency;
mod summary;

pub use bounds::{
    clip_bias_bound, variance_growth_slope, verify_clip_bias_bound, verify_clip_variance_bound,
    verify_log_partition_variance, verify_mse_bound, verify_variance_lower_bound,
    AtomConstruction, BoundCheck, ClipVarianceReport, Direction, TwoAtomRatio,
};
pub use consistency::{consistency_ratios, ConsistencyReport};
pub use summary::{
    summarize_segments, summarize_segments_pooled, RunRecord, SegmentSummary,
    SEGMENT_TAIL_FRACTION,
};
