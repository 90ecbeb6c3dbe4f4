use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Detached n×n score matrix T[i][j] = T(x_i, y_j).
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    n: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if n < 2 {
            return Err(Error::contract("score_matrix", "need n ≥ 2"));
        }
        if data.len() != n * n {
            return Err(Error::contract(
                "score_matrix",
                format!("expected {}, got {} entries", n * n, data.len()),
            ));
        }
        Ok(ScoreMatrix { n, data })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::contract(
                "score_matrix",
                format!("expected square matrix, got {s:?}"),
            ));
        }
        ScoreMatrix::new(s[0], t.data().to_vec())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn diag_mean(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum::<f64>() / self.n as f64
    }

    pub fn offdiag(&self) -> impl Iterator<Item = f64> + '_ {
        let n = self.n;
        self.data
            .iter()
            .enumerate()
            .filter(move |(k, _)| k / n != k % n)
            .map(|(_, &v)| v)
    }
}

/// Batch-softmax contrastive estimate:
/// (1/n) Σᵢ [Tᵢᵢ − logsumexpⱼ Tᵢⱼ] + log n. Never exceeds log n.
pub fn est_cpc(t: &ScoreMatrix) -> f64 {
    let n = t.n;
    let mut acc = 0.0;
    for i in 0..n {
        let row = &t.data[i * n..(i + 1) * n];
        acc += row[i] - crate::autodiff::logsumexp_slice(row);
    }
    acc / n as f64 + (n as f64).ln()
}

/// E_P[T] − E_Q[e^{T−1}] over the batch: mean of the diagonal minus the mean
/// of exp(T−1) over the n(n−1) off-diagonal entries. Overflow propagates as
/// ±∞ rather than a crash.
pub fn est_nwj(t: &ScoreMatrix) -> f64 {
    let n = t.n;
    let off_mean =
        t.offdiag().map(|v| (v - 1.0).exp()).sum::<f64>() / (n * (n - 1)) as f64;
    t.diag_mean() - off_mean
}

/// Smoothed DV estimate with the partition ratios clipped to [e^{−τ}, e^{τ}]:
/// mean(diag T) − log mean_offdiag clip(e^T, e^{−τ}, e^{τ}).
///
/// Clipping the ratio equals clipping the logit, so the partition term is
/// evaluated as a log-sum-exp of clip(T, −τ, τ), which stays finite for any
/// finite τ; τ = ∞ is the plain DV/MINE evaluation.
pub fn est_dv_smile(t: &ScoreMatrix, tau: f64) -> f64 {
    debug_assert!(tau >= 0.0);
    let n = t.n;
    let clipped: Vec<f64> = t.offdiag().map(|v| v.min(tau).max(-tau)).collect();
    let lse = crate::autodiff::logsumexp_slice(&clipped);
    let log_partition = lse - ((n * (n - 1)) as f64).ln();
    t.diag_mean() - log_partition
}

/// Generative estimate from per-sample log densities.
#[derive(Debug, Clone, Copy)]
pub struct GmEstimate {
    /// Mean of log p(x,y) − log p(x) − log p(y) over the retained samples.
    pub value: f64,
    /// Samples dropped for a non-finite log density.
    pub excluded: usize,
    pub used: usize,
}

/// Mean over the batch of log p_joint(x,y) − log p_x(x) − log p_y(y);
/// non-finite samples are excluded and counted.
pub fn est_gm(log_joint: &[f64], log_x: &[f64], log_y: &[f64]) -> Result<GmEstimate> {
    if log_joint.len() != log_x.len() || log_joint.len() != log_y.len() {
        return Err(Error::contract(
            "est_gm",
            format!(
                "batch sizes differ: {} / {} / {}",
                log_joint.len(),
                log_x.len(),
                log_y.len()
            ),
        ));
    }
    let mut acc = 0.0;
    let mut used = 0usize;
    let mut excluded = 0usize;
    for ((j, x), y) in log_joint.iter().zip(log_x).zip(log_y) {
        let v = j - x - y;
        if v.is_finite() {
            acc += v;
            used += 1;
        } else {
            excluded += 1;
        }
    }
    Ok(GmEstimate {
        value: if used > 0 { acc / used as f64 } else { f64::NAN },
        excluded,
        used,
    })
}
