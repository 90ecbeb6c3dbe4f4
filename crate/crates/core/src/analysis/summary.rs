use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::StaircaseSchedule;

/// Per-iteration training log entry; the analysis input and the row format
/// of `records.csv`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub iteration: usize,
    pub mi_truth: f64,
    pub loss: f64,
    pub estimate: f64,
    pub estimator: String,
    pub critic: String,
    pub seed: u64,
    pub wall_ms: f64,
}

/// Bias/variance/MSE of one estimator over one staircase segment.
///
/// Statistics are computed over the final 10% of the segment's per-iteration
/// estimates with population variance, so mse = bias² + variance holds
/// exactly for the same sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentSummary {
    pub mi_level: f64,
    pub bias: f64,
    pub variance: f64,
    pub mse: f64,
    pub n_estimates: usize,
    pub estimator: String,
    pub critic: String,
    /// None marks statistics pooled across seeds.
    pub seed: Option<u64>,
}

/// Fraction of each segment (from the end) that enters the statistics.
pub const SEGMENT_TAIL_FRACTION: f64 = 0.10;

fn stats_from(estimates: &[f64], truth: f64) -> (f64, f64, f64) {
    let n = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / n;
    let bias = mean - truth;
    let variance = estimates.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    let mse = estimates.iter().map(|e| (e - truth) * (e - truth)).sum::<f64>() / n;
    (bias, variance, mse)
}

/// Summarize a single run's records into one row per staircase segment.
///
/// Segments with no records at all (an aborted run) are skipped; a segment
/// whose final-tail window is empty while the segment has records is a
/// malformed log and errors.
pub fn summarize_segments(
    records: &[RunRecord],
    schedule: &StaircaseSchedule,
) -> Result<Vec<SegmentSummary>> {
    if records.is_empty() {
        return Err(Error::contract("summarize_segment", "empty run log"));
    }
    let estimator = records[0].estimator.clone();
    let critic = records[0].critic.clone();
    let seed = records[0].seed;
    let mut out = Vec::new();
    for segment in 0..schedule.n_segments() {
        let seg_start = segment * schedule.step_every;
        let seg_end = ((segment + 1) * schedule.step_every).min(schedule.total_iters);
        let window_start =
            seg_end - ((seg_end - seg_start) as f64 * SEGMENT_TAIL_FRACTION).ceil() as usize;
        let in_segment: Vec<&RunRecord> = records
            .iter()
            .filter(|r| r.iteration >= seg_start && r.iteration < seg_end)
            .collect();
        if in_segment.is_empty() {
            continue;
        }
        let tail: Vec<f64> = in_segment
            .iter()
            .filter(|r| r.iteration >= window_start)
            .map(|r| r.estimate)
            .collect();
        if tail.is_empty() {
            return Err(Error::contract(
                "summarize_segment",
                format!("segment {segment} has records but none in its final window"),
            ));
        }
        let truth = in_segment.last().unwrap().mi_truth;
        let (bias, variance, mse) = stats_from(&tail, truth);
        out.push(SegmentSummary {
            mi_level: schedule.mi_at(seg_start)?,
            bias,
            variance,
            mse,
            n_estimates: tail.len(),
            estimator: estimator.clone(),
            critic: critic.clone(),
            seed: Some(seed),
        });
    }
    Ok(out)
}

/// Pool records from several seeds of the same (estimator, critic) cell into
/// per-segment statistics over the union of their tail windows.
pub fn summarize_segments_pooled(
    per_seed_records: &[&[RunRecord]],
    schedule: &StaircaseSchedule,
) -> Result<Vec<SegmentSummary>> {
    if per_seed_records.is_empty() || per_seed_records.iter().any(|r| r.is_empty()) {
        return Err(Error::contract("summarize_segment", "empty run log"));
    }
    let estimator = per_seed_records[0][0].estimator.clone();
    let critic = per_seed_records[0][0].critic.clone();
    let mut out = Vec::new();
    for segment in 0..schedule.n_segments() {
        let seg_start = segment * schedule.step_every;
        let seg_end = ((segment + 1) * schedule.step_every).min(schedule.total_iters);
        let window_start =
            seg_end - ((seg_end - seg_start) as f64 * SEGMENT_TAIL_FRACTION).ceil() as usize;
        let mut tail = Vec::new();
        let mut truth = None;
        for records in per_seed_records {
            for r in records.iter() {
                if r.iteration >= window_start && r.iteration < seg_end {
                    tail.push(r.estimate);
                    truth = Some(r.mi_truth);
                }
            }
        }
        let Some(truth) = truth else { continue };
        let (bias, variance, mse) = stats_from(&tail, truth);
        out.push(SegmentSummary {
            mi_level: schedule.mi_at(seg_start)?,
            bias,
            variance,
            mse,
            n_estimates: tail.len(),
            estimator: estimator.clone(),
            critic: critic.clone(),
            seed: None,
        });
    }
    Ok(out)
}
