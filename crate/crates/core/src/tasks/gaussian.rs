use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Correlated-Gaussian benchmark task. Each dimension is an independent pair
/// x ~ N(0,1), y = ρx + √(1−ρ²)ε; the cubic variant maps y ↦ y³ elementwise,
/// which is bijective and leaves the true MI unchanged.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GaussianTaskSpec {
    pub dim: usize,
    pub rho: f64,
    pub cubic: bool,
}

impl GaussianTaskSpec {
    pub fn new(dim: usize, rho: f64, cubic: bool) -> Self {
        GaussianTaskSpec { dim, rho, cubic }
    }

    /// Spec at a target MI level (nats) for this dimensionality.
    pub fn at_mi(dim: usize, target_mi: f64, cubic: bool) -> Self {
        GaussianTaskSpec {
            dim,
            rho: mi_to_rho(target_mi, dim),
            cubic,
        }
    }

    pub fn true_mi(&self) -> f64 {
        gaussian_mi(self.rho, self.dim)
    }
}

/// I(x; y) = −(d/2)·ln(1 − ρ²) for the per-dimension correlation ρ.
pub fn gaussian_mi(rho: f64, dim: usize) -> f64 {
    -(dim as f64 / 2.0) * (1.0 - rho * rho).ln()
}

/// Inverse of [`gaussian_mi`]: ρ = √(1 − e^{−2I/d}).
pub fn mi_to_rho(target_mi: f64, dim: usize) -> f64 {
    debug_assert!(target_mi >= 0.0);
    (1.0 - (-2.0 * target_mi / dim as f64).exp()).sqrt()
}

/// Closed-form log density ratio log dP/dQ between the correlated 1-d pair
/// (x, y) and the product of its standard normal marginals. Its expectation
/// under P is the KL divergence −½ln(1−ρ²); under Q the ratio integrates
/// to 1.
pub fn log_density_ratio_1d(rho: f64, x: f64, y: f64) -> f64 {
    let om = 1.0 - rho * rho;
    -(rho * rho * (x * x + y * y) - 2.0 * rho * x * y) / (2.0 * om) - 0.5 * om.ln()
}

/// Draw n correlated pairs; both batches are (n × dim).
pub fn sample_pair(spec: &GaussianTaskSpec, n: usize, rng: &mut Rng) -> (Tensor, Tensor) {
    let d = spec.dim;
    let mut x = vec![0.0; n * d];
    let mut y = vec![0.0; n * d];
    let noise_scale = (1.0 - spec.rho * spec.rho).sqrt();
    for i in 0..n * d {
        let xv = rng.normal();
        let eps = rng.normal();
        x[i] = xv;
        let mut yv = spec.rho * xv + noise_scale * eps;
        if spec.cubic {
            yv = yv * yv * yv;
        }
        y[i] = yv;
    }
    (
        Tensor::from_vec(vec![n, d], x),
        Tensor::from_vec(vec![n, d], y),
    )
}

/// The benchmark schedule: MI starts at 2 nats and steps by 2 every 4k
/// iterations over a 20k-iteration run, topping out at 10.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StaircaseSchedule {
    pub start_mi: f64,
    pub step: f64,
    pub step_every: usize,
    pub total_iters: usize,
}

impl Default for StaircaseSchedule {
    fn default() -> Self {
        StaircaseSchedule {
            start_mi: 2.0,
            step: 2.0,
            step_every: 4000,
            total_iters: 20_000,
        }
    }
}

impl StaircaseSchedule {
    /// Piecewise-constant MI level at an iteration.
    pub fn mi_at(&self, iter: usize) -> Result<f64> {
        if iter >= self.total_iters {
            return Err(Error::contract(
                "staircase_mi",
                format!("iteration {iter} outside [0, {})", self.total_iters),
            ));
        }
        Ok(self.start_mi + self.step * (iter / self.step_every) as f64)
    }

    pub fn segment_of(&self, iter: usize) -> usize {
        iter / self.step_every
    }

    pub fn n_segments(&self) -> usize {
        self.total_iters.div_ceil(self.step_every)
    }

    /// The distinct MI levels in order.
    pub fn levels(&self) -> Vec<f64> {
        (0..self.n_segments())
            .map(|s| self.start_mi + self.step * s as f64)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mi_to_rho_endpoints() {
        assert_eq!(mi_to_rho(0.0, 20), 0.0);
        assert!(mi_to_rho(1e6, 20) <= 1.0);
        assert!(mi_to_rho(1e6, 20) > 0.999999);
    }

    #[test]
    fn mi_to_rho_matches_numerical_kl() {
        // independent oracle: 2-d quadrature of the KL between the joint
        // Gaussian and the product of its marginals, times the dimension
        let dim = 20;
        let target = 2.0;
        let rho = mi_to_rho(target, dim);
        assert!((rho - (1.0 - (-0.2f64).exp()).sqrt()).abs() < 1e-12);

        let steps = 2000;
        let lim = 8.0;
        let h = 2.0 * lim / steps as f64;
        let om = 1.0 - rho * rho;
        let mut kl_1d = 0.0;
        for i in 0..steps {
            let x = -lim + (i as f64 + 0.5) * h;
            for j in 0..steps {
                let y = -lim + (j as f64 + 0.5) * h;
                let log_joint = -0.5 * (x * x - 2.0 * rho * x * y + y * y) / om
                    - (2.0 * std::f64::consts::PI * om.sqrt()).ln();
                let log_prod =
                    -0.5 * (x * x + y * y) - (2.0 * std::f64::consts::PI).ln();
                let joint = log_joint.exp();
                if joint > 0.0 {
                    kl_1d += joint * (log_joint - log_prod) * h * h;
                }
            }
        }
        let numeric_mi = dim as f64 * kl_1d;
        assert!(
            (numeric_mi - target).abs() < 1e-4,
            "quadrature MI {numeric_mi} vs target {target}"
        );
    }

    #[test]
    fn mi_round_trip() {
        for &mi in &[0.5, 2.0, 4.0, 6.0, 8.0, 10.0] {
            let rho = mi_to_rho(mi, 20);
            assert!((gaussian_mi(rho, 20) - mi).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_pair_independence_and_correlation() {
        let mut rng = Rng::new(2);
        let spec = GaussianTaskSpec::new(4, 0.0, false);
        let n = 20_000;
        let (x, y) = sample_pair(&spec, n, &mut rng);
        let m = n * 4;
        let corr = correlation(x.data(), y.data());
        assert!(corr.abs() < 3.0 / (m as f64).sqrt(), "corr {corr}");

        let spec = GaussianTaskSpec::new(1, 0.9, false);
        let (x, y) = sample_pair(&spec, 100_000, &mut rng);
        let corr = correlation(x.data(), y.data());
        assert!((0.89..=0.91).contains(&corr), "corr {corr}");
    }

    #[test]
    fn sample_pair_moments() {
        let mut rng = Rng::new(3);
        let rho = 0.6;
        let spec = GaussianTaskSpec::new(2, rho, false);
        let n = 50_000;
        let (x, y) = sample_pair(&spec, n, &mut rng);
        let m = (n * 2) as f64;
        let var_x: f64 = x.data().iter().map(|v| v * v).sum::<f64>() / m;
        // Var[x²] = 2 for standard normal, so SE of the variance is √(2/m)
        assert!((var_x - 1.0).abs() < 3.0 * (2.0 / m).sqrt(), "var {var_x}");
        let cov: f64 = x.data().iter().zip(y.data()).map(|(a, b)| a * b).sum::<f64>() / m;
        assert!((cov - rho).abs() < 3.0 * (2.0 / m).sqrt(), "cov {cov}");
    }

    #[test]
    fn cubic_correlation_matches_closed_form_and_mc() {
        // E[x·y³] = 3ρ for y = ρx + √(1−ρ²)ε, and Var[y³] = E[y⁶] = 15,
        // so corr(x, y³) = 3ρ/√15; cross-checked against raw-sample MC
        let mut rng = Rng::new(4);
        let rho = 0.7;
        let spec = GaussianTaskSpec::new(1, rho, true);
        let n = 400_000;
        let (x, y3) = sample_pair(&spec, n, &mut rng);
        let corr = correlation(x.data(), y3.data());
        let closed = 3.0 * rho / 15.0_f64.sqrt();
        assert!((corr - closed).abs() < 0.01, "corr {corr} vs {closed}");

        // direct MC oracle on raw (non-cubed) samples
        let raw = GaussianTaskSpec::new(1, rho, false);
        let (xr, yr) = sample_pair(&raw, n, &mut rng);
        let cubed: Vec<f64> = yr.data().iter().map(|v| v * v * v).collect();
        let corr_mc = correlation(xr.data(), &cubed);
        assert!((corr - corr_mc).abs() < 0.01, "{corr} vs MC {corr_mc}");
    }

    #[test]
    fn cubic_transform_is_bijective_on_samples() {
        let mut rng = Rng::new(5);
        let spec_raw = GaussianTaskSpec::new(3, 0.5, false);
        let mut rng2 = rng.clone();
        let (_, y_raw) = sample_pair(&spec_raw, 500, &mut rng);
        let spec_cubic = GaussianTaskSpec::new(3, 0.5, true);
        let (_, y_cubic) = sample_pair(&spec_cubic, 500, &mut rng2);
        for (r, c) in y_raw.data().iter().zip(y_cubic.data()) {
            let recovered = c.abs().cbrt().copysign(*c);
            if r.abs() > 1e-100 {
                assert!((recovered - r).abs() <= 1e-9 * r.abs().max(1.0));
            }
        }
    }

    #[test]
    fn staircase_levels() {
        let s = StaircaseSchedule::default();
        assert_eq!(s.mi_at(0).unwrap(), 2.0);
        assert_eq!(s.mi_at(3999).unwrap(), 2.0);
        assert_eq!(s.mi_at(4000).unwrap(), 4.0);
        assert_eq!(s.mi_at(19_999).unwrap(), 10.0);
        assert!(s.mi_at(20_000).is_err());
        assert_eq!(s.levels(), vec![2.0, 4.0, 6.0, 8.0, 10.0]);
    }

    #[test]
    fn staircase_is_monotone_and_right_continuous() {
        let s = StaircaseSchedule::default();
        let mut prev = 0.0;
        for it in 0..s.total_iters {
            let mi = s.mi_at(it).unwrap();
            assert!(mi >= prev);
            // right-continuity: the level at a step boundary matches the
            // level just after it
            if it + 1 < s.total_iters && it % s.step_every == 0 {
                assert_eq!(mi, s.mi_at(it + 1).unwrap());
            }
            prev = mi;
        }
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma: f64 = a.iter().sum::<f64>() / n;
        let mb: f64 = b.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (x, y) in a.iter().zip(b) {
            cov += (x - ma) * (y - mb);
            va += (x - ma) * (x - ma);
            vb += (y - mb) * (y - mb);
        }
        cov / (va.sqrt() * vb.sqrt())
    }
}
