//! Monte-Carlo and closed-form verifiers for the variance and clipping
//! bias/variance bounds.
//!
//! The variance verifiers instantiate the analytic 1-d correlated-Gaussian
//! setting where the density ratio r* is available in closed form; the
//! clipping verifiers use the two-atom family from the worst-case analysis,
//! which makes bias exact arithmetic rather than sampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tasks::{log_density_ratio_1d, mi_to_rho};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Empirical must be ≥ slack · bound.
    GreaterEq,
    /// Empirical must be ≤ slack · bound.
    LessEq,
}

/// One verified inequality: pass ⇔ the empirical value respects the bound
/// after multiplicative slack.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundCheck {
    pub name: String,
    pub theoretical_bound: f64,
    pub empirical_value: f64,
    pub direction: Direction,
    pub slack_factor: f64,
    pub pass: bool,
}

impl BoundCheck {
    pub fn new(
        name: impl Into<String>,
        bound: f64,
        empirical: f64,
        direction: Direction,
        slack: f64,
    ) -> Self {
        let pass = match direction {
            Direction::GreaterEq => empirical >= slack * bound,
            Direction::LessEq => empirical <= slack * bound,
        };
        BoundCheck {
            name: name.into(),
            theoretical_bound: bound,
            empirical_value: empirical,
            direction,
            slack_factor: slack,
            pass,
        }
    }
}

fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
}

/// Empirical Var[E_{Qn}[r*]] against the lower bound (e^kl − 1)/n.
///
/// Each trial draws n independent products-of-marginals pairs and averages
/// the closed-form ratio; the variance across trials must exceed the bound
/// (slack 0.9 absorbs Monte-Carlo noise on a heavy-tailed statistic).
pub fn verify_variance_lower_bound(kl: f64, n: usize, trials: usize, rng: &mut Rng) -> BoundCheck {
    let rho = mi_to_rho(kl, 1);
    let mut means = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut acc = 0.0;
        for _ in 0..n {
            let x = rng.normal();
            let y = rng.normal();
            acc += log_density_ratio_1d(rho, x, y).exp();
        }
        means.push(acc / n as f64);
    }
    let empirical = sample_variance(&means);
    let bound = (kl.exp() - 1.0) / n as f64;
    BoundCheck::new(
        format!("thm2_variance_lower_bound_kl={kl}_n={n}"),
        bound,
        empirical,
        Direction::GreaterEq,
        0.9,
    )
}

/// Least-squares slope of log empirical variance against kl; the exponential
/// growth signature requires slope ≥ 0.8 over kl ∈ {1,…,6}.
pub fn variance_growth_slope(kls: &[f64], n: usize, trials: usize, rng: &mut Rng) -> BoundCheck {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &kl in kls {
        let check = verify_variance_lower_bound(kl, n, trials, rng);
        xs.push(kl);
        ys.push(check.empirical_value.ln());
    }
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    let slope = num / den;
    BoundCheck::new(
        format!("thm2_log_variance_slope_n={n}"),
        0.8,
        slope,
        Direction::GreaterEq,
        1.0,
    )
}

/// Asymptotic claim: n·Var[log E_{Qn}[r*]] ≥ e^kl − 1, checked with slack 0.8.
///
/// Trials whose sample mean underflows to a non-positive value are discarded
/// and counted; more than 1% discards fails the check outright.
pub fn verify_log_partition_variance(
    kl: f64,
    n: usize,
    trials: usize,
    rng: &mut Rng,
) -> Result<BoundCheck> {
    if n < 1024 {
        return Err(Error::contract(
            "verify_log_partition_variance",
            format!("asymptotic check requires n ≥ 1024, got {n}"),
        ));
    }
    let rho = mi_to_rho(kl, 1);
    let mut log_means = Vec::with_capacity(trials);
    let mut discarded = 0usize;
    for _ in 0..trials {
        let mut acc = 0.0;
        for _ in 0..n {
            let x = rng.normal();
            let y = rng.normal();
            acc += log_density_ratio_1d(rho, x, y).exp();
        }
        let mean = acc / n as f64;
        if mean > 0.0 {
            log_means.push(mean.ln());
        } else {
            discarded += 1;
        }
    }
    let bound = kl.exp() - 1.0;
    if discarded * 100 > trials {
        return Ok(BoundCheck {
            name: format!("thm2_log_partition_variance_kl={kl}_n={n}"),
            theoretical_bound: bound,
            empirical_value: f64::NAN,
            direction: Direction::GreaterEq,
            slack_factor: 0.8,
            pass: false,
        });
    }
    let empirical = n as f64 * sample_variance(&log_means);
    Ok(BoundCheck::new(
        format!("thm2_log_partition_variance_kl={kl}_n={n}"),
        bound,
        empirical,
        Direction::GreaterEq,
        0.8,
    ))
}

// ───── two-atom clipped-ratio family ─────

/// A nonnegative ratio function taking two values {e^{−k1}, e^{k2}} with
/// masses chosen so E_Q[r] = s; k1 = ∞ puts the lower atom at zero. This is
/// the family the worst-case clipping bias analysis extremizes over.
#[derive(Debug, Clone, Copy)]
pub struct TwoAtomRatio {
    pub low: f64,
    pub high: f64,
    pub mass_low: f64,
    pub s: f64,
}

impl TwoAtomRatio {
    /// `k1 = None` means K₁ → ∞ (lower atom exactly 0).
    pub fn new(s: f64, k1: Option<f64>, k2: f64) -> Result<Self> {
        let low = match k1 {
            None => 0.0,
            Some(k1) => (-k1).exp(),
        };
        let high = k2.exp();
        if !(low < s && s < high) {
            return Err(Error::contract(
                "two_atom_ratio",
                format!("S = {s} infeasible for atoms ({low}, {high})"),
            ));
        }
        // mass_low · low + (1 − mass_low) · high = s
        let mass_low = (high - s) / (high - low);
        Ok(TwoAtomRatio {
            low,
            high,
            mass_low,
            s,
        })
    }

    /// Exact E_Q[clip(r, e^{−τ}, e^{τ})].
    pub fn clipped_mean(&self, tau: f64) -> f64 {
        let lo = (-tau).exp();
        let hi = tau.exp();
        let cl = self.low.min(hi).max(lo);
        let ch = self.high.min(hi).max(lo);
        self.mass_low * cl + (1.0 - self.mass_low) * ch
    }

    /// Exact |E_Q[r] − E_Q[r_τ]|.
    pub fn clip_bias(&self, tau: f64) -> f64 {
        (self.s - self.clipped_mean(tau)).abs()
    }

    /// Exact Var[clip(r, e^{−τ}, e^{τ})] of a single draw.
    pub fn clipped_variance(&self, tau: f64) -> f64 {
        let lo = (-tau).exp();
        let hi = tau.exp();
        let cl = self.low.min(hi).max(lo);
        let ch = self.high.min(hi).max(lo);
        self.mass_low * (1.0 - self.mass_low) * (ch - cl) * (ch - cl)
    }

    /// One sample-mean of the clipped ratio over n draws.
    pub fn sample_clipped_mean(&self, tau: f64, n: usize, rng: &mut Rng) -> f64 {
        let lo = (-tau).exp();
        let hi = tau.exp();
        let cl = self.low.min(hi).max(lo);
        let ch = self.high.min(hi).max(lo);
        let mut acc = 0.0;
        for _ in 0..n {
            acc += if rng.uniform() < self.mass_low { cl } else { ch };
        }
        acc / n as f64
    }
}

/// The worst-case bias bound for clipping a ratio with E_Q[r] = S and
/// r ≤ e^K to [e^{−τ}, e^{τ}].
pub fn clip_bias_bound(s: f64, k: f64, tau: f64) -> f64 {
    if tau < k {
        let branch1 = (-tau).exp() * (1.0 - s * (-tau).exp()).abs();
        let branch2 = ((1.0 - (k - tau).exp() + s * (k.exp() - tau.exp()))
            / (k.exp() - (-tau).exp()))
        .abs();
        branch1.max(branch2)
    } else {
        (-tau).exp() * (1.0 - s * (-k).exp())
    }
}

/// Which two-atom configuration a bias check exercises.
#[derive(Debug, Clone, Copy)]
pub enum AtomConstruction {
    /// K₁ → ∞, K₂ = τ: attains e^{−τ}|1 − S e^{−τ}| exactly.
    UpperWorstCase,
    /// K₁ = τ, K₂ = K: attains the second τ < K branch exactly.
    LowerWorstCase,
    /// K₁ → ∞, K₂ = K: the binding case when τ ≥ K.
    TailOnly,
    /// Arbitrary finite atoms inside [0, e^K].
    General { k1: f64, k2: f64 },
}

/// Exact (no sampling) bias of clipping the chosen two-atom ratio, checked
/// against the worst-case bound for the matching τ branch.
pub fn verify_clip_bias_bound(
    s: f64,
    k: f64,
    tau: f64,
    construction: AtomConstruction,
) -> Result<BoundCheck> {
    let ratio = match construction {
        AtomConstruction::UpperWorstCase => TwoAtomRatio::new(s, None, tau)?,
        AtomConstruction::LowerWorstCase => TwoAtomRatio::new(s, Some(tau), k)?,
        AtomConstruction::TailOnly => TwoAtomRatio::new(s, None, k)?,
        AtomConstruction::General { k1, k2 } => {
            if k2 > k {
                return Err(Error::contract(
                    "verify_clip_bias_bound",
                    format!("k2 = {k2} exceeds the range bound K = {k}"),
                ));
            }
            TwoAtomRatio::new(s, Some(k1), k2)?
        }
    };
    let bias = ratio.clip_bias(tau);
    let bound = clip_bias_bound(s, k, tau);
    // worst-case constructions attain the bound exactly, so the comparison
    // carries the 1e-12 exactness tolerance instead of multiplicative slack
    Ok(BoundCheck {
        name: format!("thm3_clip_bias_s={s}_k={k}_tau={tau}"),
        theoretical_bound: bound,
        empirical_value: bias,
        direction: Direction::LessEq,
        slack_factor: 1.0,
        pass: bias <= bound + 1e-12 * bound.abs().max(1.0),
    })
}

/// The variance checks for clipped partition estimates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipVarianceReport {
    /// Empirical Var[E_{Qn}[r_τ]] over the trials.
    pub empirical: f64,
    /// Closed-form variance of the construction (Bernoulli two-atom).
    pub closed_form: f64,
    /// Empirical matches the closed form within 5% both ways.
    pub matches_closed_form: BoundCheck,
    /// The bound as printed: (e^τ − e^{−τ})/(4n). Maximally clipped atoms
    /// violate it whenever e^τ − e^{−τ} > 1, so it is reported but only
    /// asserted where it mathematically holds.
    pub printed_bound: BoundCheck,
    /// The squared-range (Popoviciu) variant: (e^τ − e^{−τ})²/(4n).
    pub squared_bound: BoundCheck,
    /// True when the printed bound is implied by the squared one
    /// (e^τ − e^{−τ} ≤ 1); the harness gates on the printed check only then.
    pub printed_bound_applicable: bool,
}

/// Empirical variance of the clipped partition estimate for a two-atom
/// construction; `None` uses the adversarial atoms e^{±τ} with mass ½ each,
/// which attain the squared-range scaling.
pub fn verify_clip_variance_bound(
    tau: f64,
    n: usize,
    trials: usize,
    construction: Option<TwoAtomRatio>,
    rng: &mut Rng,
) -> Result<ClipVarianceReport> {
    let ratio = match construction {
        Some(r) => r,
        None => {
            // atoms at e^{±τ} with equal mass; E_Q[r] = cosh(τ). At τ = 0 the
            // atoms coincide, so any spread pair works: clipping collapses it
            // to the constant 1 either way.
            let t_eff = if tau == 0.0 { 1.0 } else { tau };
            let s = 0.5 * (t_eff.exp() + (-t_eff).exp());
            TwoAtomRatio::new(s, Some(t_eff), t_eff)?
        }
    };
    let mut means = Vec::with_capacity(trials);
    for _ in 0..trials {
        means.push(ratio.sample_clipped_mean(tau, n, rng));
    }
    let empirical = sample_variance(&means);
    let closed_form = ratio.clipped_variance(tau) / n as f64;
    let range = tau.exp() - (-tau).exp();
    let printed = range / (4.0 * n as f64);
    let squared = range * range / (4.0 * n as f64);

    let matches_closed_form = BoundCheck {
        name: format!("thm4_matches_closed_form_tau={tau}_n={n}"),
        theoretical_bound: closed_form,
        empirical_value: empirical,
        direction: Direction::LessEq,
        slack_factor: 1.05,
        pass: if closed_form == 0.0 {
            empirical == 0.0
        } else {
            (empirical / closed_form - 1.0).abs() <= 0.05
        },
    };
    let printed_bound = BoundCheck::new(
        format!("thm4_printed_bound_tau={tau}_n={n}"),
        printed,
        empirical,
        Direction::LessEq,
        1.05,
    );
    let squared_bound = BoundCheck::new(
        format!("thm4_squared_range_bound_tau={tau}_n={n}"),
        squared,
        empirical,
        Direction::LessEq,
        1.05,
    );
    Ok(ClipVarianceReport {
        empirical,
        closed_form,
        matches_closed_form,
        printed_bound,
        squared_bound,
        printed_bound_applicable: range <= 1.0,
    })
}

/// MSE of estimating S with the clipped sample mean: exact bias² from the
/// two-atom construction plus empirical variance, against the combined
/// bias²+variance bound for the matching τ branch.
pub fn verify_mse_bound(
    s: f64,
    k: f64,
    tau: f64,
    n: usize,
    trials: usize,
    rng: &mut Rng,
) -> Result<BoundCheck> {
    // pick whichever worst-case construction attains the max bias branch
    let candidates = if tau < k {
        vec![
            TwoAtomRatio::new(s, None, tau),
            TwoAtomRatio::new(s, Some(tau), k),
        ]
    } else {
        vec![TwoAtomRatio::new(s, None, k)]
    };
    let ratio = candidates
        .into_iter()
        .filter_map(|r| r.ok())
        .max_by(|a, b| {
            a.clip_bias(tau)
                .partial_cmp(&b.clip_bias(tau))
                .unwrap()
        })
        .ok_or_else(|| Error::contract("verify_mse_bound", "no feasible construction"))?;

    let mut mse_acc = 0.0;
    for _ in 0..trials {
        let m = ratio.sample_clipped_mean(tau, n, rng);
        mse_acc += (m - s) * (m - s);
    }
    let empirical_mse = mse_acc / trials as f64;
    let bias_bound = clip_bias_bound(s, k, tau);
    let bound = bias_bound * bias_bound + (tau.exp() - (-tau).exp()) / (4.0 * n as f64);
    Ok(BoundCheck::new(
        format!("cor3_mse_bound_s={s}_k={k}_tau={tau}_n={n}"),
        bound,
        empirical_mse,
        Direction::LessEq,
        1.0,
    ))
}
