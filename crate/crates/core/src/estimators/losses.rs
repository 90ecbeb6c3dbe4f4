//! Training losses over an n×n score-matrix node.
//!
//! CPC and NWJ train on their own negated bounds. MINE trains on the DV
//! objective with the log-partition gradient debiased by an exponential
//! moving average of the batch partition estimate. SMILE trains the critic
//! with the Jensen-Shannon logistic loss, whose optimal logit is the log
//! density ratio; the MI estimate is computed separately by
//! [`super::est_dv_smile`] on the same critic.

use std::sync::Arc;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};

/// Running estimate of the partition function E_Q[e^T] for MINE's debiased
/// gradient. Initialized to the first batch's partition estimate, then
/// updated as ema ← decay·ema + (1−decay)·batch.
#[derive(Debug, Clone)]
pub struct MineEmaState {
    decay: f64,
    value: Option<f64>,
}

impl MineEmaState {
    pub fn new(decay: f64) -> Self {
        MineEmaState { decay, value: None }
    }

    /// Fold in the current batch partition estimate and return the new EMA.
    pub fn update(&mut self, batch_partition: f64) -> f64 {
        let v = match self.value {
            None => batch_partition,
            Some(prev) => self.decay * prev + (1.0 - self.decay) * batch_partition,
        };
        self.value = Some(v);
        v
    }

    pub fn value(&self) -> Option<f64> {
        self.value
    }
}

fn square_n(t: &Tensor) -> Result<usize> {
    let s = t.shape();
    if s.len() != 2 || s[0] != s[1] || s[0] < 2 {
        return Err(Error::contract(
            "training_loss",
            format!("expected n×n score matrix with n ≥ 2, got {s:?}"),
        ));
    }
    Ok(s[0])
}

fn diag_indices(n: usize) -> Arc<Vec<usize>> {
    Arc::new((0..n).map(|i| i * n + i).collect())
}

fn offdiag_indices(n: usize) -> Arc<Vec<usize>> {
    Arc::new((0..n * n).filter(|k| k / n != k % n).collect())
}

/// Diagonal of the score matrix as an (n, 1) tape tensor.
pub fn diag_of(tape: &mut Tape, t: &Tensor) -> Result<Tensor> {
    let n = square_n(t)?;
    let flat = tape.reshape(t, vec![n * n, 1])?;
    tape.gather_rows(&flat, diag_indices(n))
}

/// Off-diagonal entries as an (n(n−1), 1) tape tensor.
pub fn offdiag_of(tape: &mut Tape, t: &Tensor) -> Result<Tensor> {
    let n = square_n(t)?;
    let flat = tape.reshape(t, vec![n * n, 1])?;
    tape.gather_rows(&flat, offdiag_indices(n))
}

/// The CPC bound as a tape scalar:
/// (1/n) Σᵢ [Tᵢᵢ − logsumexpⱼ Tᵢⱼ] + log n.
pub fn cpc_objective(tape: &mut Tape, t: &Tensor) -> Result<Tensor> {
    let n = square_n(t)?;
    let diag = diag_of(tape, t)?;
    let diag = tape.reshape(&diag, vec![n])?;
    let lse = tape.logsumexp(t, 1)?;
    let gap = tape.sub(&diag, &lse)?;
    let mean = tape.mean(&gap, None)?;
    tape.add_const(&mean, (n as f64).ln())
}

pub fn cpc_loss(tape: &mut Tape, t: &Tensor) -> Result<Tensor> {
    let obj = cpc_objective(tape, t)?;
    tape.neg(&obj)
}

/// The NWJ bound as a tape scalar: mean(diag T) − mean_offdiag e^{T−1}.
pub fn nwj_objective(tape: &mut Tape, t: &Tensor) -> Result<Tensor> {
    let diag = diag_of(tape, t)?;
    let diag_mean = tape.mean(&diag, None)?;
    let off = offdiag_of(tape, t)?;
    let shifted = tape.add_const(&off, -1.0)?;
    let e = tape.exp(&shifted)?;
    let off_mean = tape.mean(&e, None)?;
    tape.sub(&diag_mean, &off_mean)
}

pub fn nwj_loss(tape: &mut Tape, t: &Tensor) -> Result<Tensor> {
    let obj = nwj_objective(tape, t)?;
    tape.neg(&obj)
}

/// MINE loss: −mean(diag T) + mean_offdiag(e^T)/ema.
///
/// The EMA (updated with this batch, treated as a constant in the graph)
/// replaces the partition estimate in the denominator of the DV gradient,
/// ∇[log E(e^T)] = ∇E(e^T)/E(e^T), so the loss gradient is the debiased DV
/// gradient rather than the gradient of a bound.
pub fn mine_loss(tape: &mut Tape, t: &Tensor, ema: &mut MineEmaState) -> Result<Tensor> {
    let diag = diag_of(tape, t)?;
    let diag_mean = tape.mean(&diag, None)?;
    let off = offdiag_of(tape, t)?;
    let e = tape.exp(&off)?;
    let partition = tape.mean(&e, None)?;
    let ema_value = ema.update(partition.item()?);
    let corrected = tape.scale(&partition, 1.0 / ema_value)?;
    let neg_diag = tape.neg(&diag_mean)?;
    tape.add(&neg_diag, &corrected)
}

/// Jensen-Shannon logistic loss for SMILE's density-ratio critic:
/// mean softplus(−diag T) + mean_offdiag softplus(T).
pub fn smile_js_loss(tape: &mut Tape, t: &Tensor) -> Result<Tensor> {
    let diag = diag_of(tape, t)?;
    let neg_diag = tape.neg(&diag)?;
    let sp_joint = tape.softplus(&neg_diag)?;
    let joint_term = tape.mean(&sp_joint, None)?;
    let off = offdiag_of(tape, t)?;
    let sp_marg = tape.softplus(&off)?;
    let marg_term = tape.mean(&sp_marg, None)?;
    tape.add(&joint_term, &marg_term)
}

/// Negative mean log-likelihood; the per-flow GM training loss.
pub fn nll_loss(tape: &mut Tape, log_probs: &Tensor) -> Result<Tensor> {
    let m = tape.mean(log_probs, None)?;
    tape.neg(&m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Params};
    use crate::estimators::{est_cpc, est_nwj, ScoreMatrix};
    use crate::rng::Rng;

    fn matrix_tensor(n: usize, rng: &mut Rng) -> Tensor {
        let mut v = vec![0.0; n * n];
        rng.fill_normal(&mut v);
        Tensor::from_vec(vec![n, n], v)
    }

    #[test]
    fn smile_loss_at_zero_scores() {
        let mut tape = Tape::new();
        let t = tape.constant(&Tensor::from_vec(vec![3, 3], vec![0.0; 9]));
        let loss = smile_js_loss(&mut tape, &t).unwrap();
        assert!((loss.data()[0] - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn tape_objectives_match_detached_estimates() {
        let mut rng = Rng::new(1);
        let t = matrix_tensor(5, &mut rng);
        let sm = ScoreMatrix::from_tensor(&t).unwrap();
        let mut tape = Tape::new();
        let tc = tape.constant(&t);
        let cpc = cpc_objective(&mut tape, &tc).unwrap();
        assert!((cpc.data()[0] - est_cpc(&sm)).abs() < 1e-12);
        let nwj = nwj_objective(&mut tape, &tc).unwrap();
        assert!((nwj.data()[0] - est_nwj(&sm)).abs() < 1e-12);
    }

    #[test]
    fn mine_ema_converges_geometrically() {
        // constant batches after a different first batch: the gap to the
        // limit shrinks by exactly the decay factor each step
        let mut ema = MineEmaState::new(0.9);
        assert_eq!(ema.update(4.0), 4.0); // initialized to the first batch
        let target = 1.0;
        let mut prev_gap = 3.0;
        for _ in 0..20 {
            let v = ema.update(target);
            let gap = v - target;
            assert!((gap / prev_gap - 0.9).abs() < 1e-12);
            prev_gap = gap;
        }
    }

    #[test]
    fn mine_loss_gradient_is_debiased_dv_gradient() {
        // with ema initialized to this batch's partition, the mine loss
        // gradient equals the gradient of mean(diag) − log mean_offdiag(e^T)
        let mut rng = Rng::new(2);
        let t = matrix_tensor(4, &mut rng);

        let mut tape = Tape::new();
        let tw = tape.watch(&t);
        let mut ema = MineEmaState::new(0.99);
        let loss = mine_loss(&mut tape, &tw, &mut ema).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let g_mine = grads.grad(&tw).unwrap().to_vec();

        let mut tape2 = Tape::new();
        let tw2 = tape2.watch(&t);
        let diag = diag_of(&mut tape2, &tw2).unwrap();
        let diag_mean = tape2.mean(&diag, None).unwrap();
        let off = offdiag_of(&mut tape2, &tw2).unwrap();
        let e = tape2.exp(&off).unwrap();
        let part = tape2.mean(&e, None).unwrap();
        let logp = tape2.log(&part).unwrap();
        let dv = tape2.sub(&diag_mean, &logp).unwrap();
        let loss2 = tape2.neg(&dv).unwrap();
        let grads2 = tape2.backward(&loss2).unwrap();
        let g_dv = grads2.grad(&tw2).unwrap();

        for (a, b) in g_mine.iter().zip(g_dv) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn cpc_loss_gradient_matches_finite_differences() {
        let mut rng = Rng::new(3);
        let mut v = vec![0.0; 16];
        rng.fill_normal(&mut v);
        let mut params = Params::new();
        let tid = params.register("scores", vec![4, 4], v);
        let report = grad_check(&mut params, 1e-5, move |tape, params| {
            let t = tape.param(params, tid);
            cpc_loss(tape, &t)
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{}", report.max_rel_error);
    }

    #[test]
    fn loss_rejects_non_square_scores() {
        let mut tape = Tape::new();
        let t = tape.constant(&Tensor::from_vec(vec![2, 3], vec![0.0; 6]));
        assert!(cpc_loss(&mut tape, &t).is_err());
    }
}
