use crate::error::{Error, Result};

use super::tensor::Params;

/// Bias-corrected Adam state over a [`Params`] arena.
///
/// Moment buffers are laid out per parameter slot and match shapes exactly.
/// Defaults follow the training protocol: beta1 = 0.9, beta2 = 0.999.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &Params, learning_rate: f64) -> Self {
        let first = params.ids().map(|id| vec![0.0; params.value(id).len()]).collect();
        let second = params.ids().map(|id| vec![0.0; params.value(id).len()]).collect();
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: first,
            second_moment: second,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over all parameter slots. `grads` is indexed like the
    /// arena; `None` slots are treated as zero gradient (moments still decay).
    ///
    /// A non-finite gradient aborts with a diagnostics record naming the
    /// iteration and parameter; `iteration` is only used for that record.
    pub fn step(
        &mut self,
        params: &mut Params,
        grads: &[Option<Vec<f64>>],
        iteration: usize,
    ) -> Result<()> {
        assert_eq!(grads.len(), params.len(), "gradient slots must match params");
        for id in params.ids() {
            if let Some(g) = &grads[id.0] {
                let norm_sq: f64 = g.iter().map(|v| v * v).sum();
                if !norm_sq.is_finite() {
                    return Err(Error::RunAbort {
                        iteration,
                        what: "gradient",
                        param: params.name(id).to_string(),
                        norm: norm_sq.sqrt(),
                    });
                }
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in params.ids() {
            let zero: &[f64] = &[];
            let g: &[f64] = grads[id.0].as_deref().unwrap_or(zero);
            let m = &mut self.first_moment[id.0];
            let v = &mut self.second_moment[id.0];
            let value = params.value_mut(id);
            for j in 0..value.len() {
                let gj = g.get(j).copied().unwrap_or(0.0);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                value[j] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::tensor::ParamId;
    use super::*;

    fn one_param(vals: &[f64]) -> (Params, ParamId) {
        let mut p = Params::new();
        let id = p.register("w", vec![vals.len()], vals.to_vec());
        (p, id)
    }

    #[test]
    fn first_step_is_signed_learning_rate() {
        // with |g| >> epsilon, bias correction gives m_hat = g, v_hat = g²,
        // so the first update is ≈ −lr·sign(g)
        let (mut params, id) = one_param(&[1.0, -2.0, 3.0]);
        let mut adam = AdamState::new(&params, 1e-3);
        let g = vec![Some(vec![0.5, -4.0, 100.0])];
        adam.step(&mut params, &g, 0).unwrap();
        let v = params.value(id);
        for (x, (orig, gs)) in v.iter().zip([(1.0, 0.5f64), (-2.0, -4.0), (3.0, 100.0)]) {
            let expect = orig - 1e-3 * gs.signum();
            assert!((x - expect).abs() < 1e-6, "{x} vs {expect}");
        }
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let (mut params, id) = one_param(&[0.3, -0.7]);
        let mut adam = AdamState::new(&params, 1e-2);
        // prime the moments with one nonzero step, then feed zeros
        adam.step(&mut params, &[Some(vec![1.0, 1.0])], 0).unwrap();
        let after_one: Vec<f64> = params.value(id).to_vec();
        for it in 1..50 {
            adam.step(&mut params, &[Some(vec![0.0, 0.0])], it).unwrap();
        }
        // m and v decay toward 0 and m_hat/(sqrt(v_hat)+eps) stays bounded by
        // the decaying m̂, so parameters creep by strictly shrinking steps;
        // with g = 0 from a zero-moment start nothing moves at all
        let (mut fresh, fid) = one_param(&[0.3, -0.7]);
        let mut adam2 = AdamState::new(&fresh, 1e-2);
        for it in 0..10 {
            adam2.step(&mut fresh, &[Some(vec![0.0, 0.0])], it).unwrap();
        }
        assert_eq!(fresh.value(fid), &[0.3, -0.7]);
        assert!(after_one.iter().all(|v| v.is_finite()));
        let m_norm: f64 = adam.first_moment[0].iter().map(|v| v.abs()).sum();
        assert!(m_norm < 2.0 * 0.9f64.powi(49), "moments should decay, got {m_norm}");
    }

    #[test]
    fn constant_gradient_keeps_unit_step() {
        // closed form: with constant g, m_hat = g and v_hat = g² at every
        // step, so each update has magnitude ≈ lr
        let (mut params, id) = one_param(&[0.0]);
        let mut adam = AdamState::new(&params, 5e-4);
        let g = vec![Some(vec![2.5])];
        adam.step(&mut params, &g, 0).unwrap();
        let after1 = params.value(id)[0];
        adam.step(&mut params, &g, 1).unwrap();
        let after2 = params.value(id)[0];
        assert!((after1 + 5e-4).abs() < 1e-8, "{after1}");
        assert!(((after2 - after1) + 5e-4).abs() < 1e-8, "{}", after2 - after1);
    }

    #[test]
    fn non_finite_gradient_aborts_with_diagnostics() {
        let (mut params, _) = one_param(&[1.0]);
        let mut adam = AdamState::new(&params, 1e-3);
        let err = adam
            .step(&mut params, &[Some(vec![f64::NAN])], 17)
            .unwrap_err();
        match err {
            Error::RunAbort { iteration, param, .. } => {
                assert_eq!(iteration, 17);
                assert_eq!(param, "w");
            }
            other => panic!("expected RunAbort, got {other:?}"),
        }
    }
}
