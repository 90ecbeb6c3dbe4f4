//! MI estimates from score matrices or generative models, and the
//! per-estimator training losses.
//!
//! Estimates ([`est_cpc`], [`est_nwj`], [`est_dv_smile`], [`est_gm`]) are
//! plain functions of detached values; the losses in [`losses`] build tape
//! graphs for training. The off-diagonal entries of a score matrix serve as
//! the product-of-marginals sample: a batch of n joint pairs yields n(n−1)
//! marginal pairs at no extra sampling cost.

mod bounds;
pub mod losses;

pub use bounds::{est_cpc, est_dv_smile, est_gm, est_nwj, GmEstimate, ScoreMatrix};
pub use losses::MineEmaState;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which estimator a run trains and evaluates.
///
/// `Smile { tau: f64::INFINITY }` is the plain DV evaluation, so MINE-style
/// evaluation and SMILE share one code path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimatorKind {
    Cpc,
    Nwj,
    Mine { ema_decay: f64 },
    Smile { tau: f64 },
    Gm,
}

impl EstimatorKind {
    pub fn mine_default() -> Self {
        EstimatorKind::Mine { ema_decay: 0.99 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            EstimatorKind::Mine { ema_decay } => {
                if !(0.0 < ema_decay && ema_decay < 1.0) {
                    return Err(Error::contract(
                        "estimator_kind",
                        format!("ema_decay must lie in (0, 1), got {ema_decay}"),
                    ));
                }
            }
            EstimatorKind::Smile { tau } => {
                if tau.is_nan() || tau < 0.0 {
                    return Err(Error::contract(
                        "estimator_kind",
                        format!("tau must be ≥ 0 (or infinite), got {tau}"),
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Stable label used in output records and seed derivation.
    pub fn label(&self) -> String {
        match *self {
            EstimatorKind::Cpc => "cpc".into(),
            EstimatorKind::Nwj => "nwj".into(),
            EstimatorKind::Mine { .. } => "mine".into(),
            EstimatorKind::Smile { tau } => {
                if tau.is_infinite() {
                    "smile_tau=inf".into()
                } else {
                    format!("smile_tau={tau}")
                }
            }
            EstimatorKind::Gm => "gm".into(),
        }
    }
}
