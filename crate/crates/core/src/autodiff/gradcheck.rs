use crate::error::{Error, Result};

use super::tape::Tape;
use super::tensor::{Params, Tensor};

/// Outcome of a finite-difference sweep over every parameter entry.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Compare tape gradients of a scalar-output graph against central finite
/// differences, entry by entry.
///
/// `build` must construct the graph afresh on the given tape (define-by-run);
/// it is invoked 1 + 2·|params| times. Restricted to small parameter counts.
pub fn grad_check(
    params: &mut Params,
    h: f64,
    mut build: impl FnMut(&mut Tape, &Params) -> Result<Tensor>,
) -> Result<GradCheckReport> {
    if params.total_elements() > 10_000 {
        return Err(Error::contract(
            "grad_check",
            format!(
                "parameter count {} exceeds the tractable limit of 1e4",
                params.total_elements()
            ),
        ));
    }
    let mut tape = Tape::new();
    let root = build(&mut tape, params)?;
    if root.len() != 1 {
        return Err(Error::contract("grad_check", "graph output must be scalar"));
    }
    let grads = tape.backward(&root)?;
    let analytic = tape.param_grads(&grads, params);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        entries_checked: 0,
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let len = params.value(id).len();
        for j in 0..len {
            let orig = params.value(id)[j];
            params.value_mut(id)[j] = orig + h;
            let f_plus = eval_scalar(&mut build, params)?;
            params.value_mut(id)[j] = orig - h;
            let f_minus = eval_scalar(&mut build, params)?;
            params.value_mut(id)[j] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let tape_grad = analytic[id.0].as_ref().map_or(0.0, |g| g[j]);
            let denom = tape_grad.abs().max(numeric.abs()).max(1e-6);
            let rel = (tape_grad - numeric).abs() / denom;
            report.entries_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = params.name(id).to_string();
                report.worst_index = j;
            }
        }
    }
    Ok(report)
}

fn eval_scalar(
    build: &mut impl FnMut(&mut Tape, &Params) -> Result<Tensor>,
    params: &Params,
) -> Result<f64> {
    let mut tape = Tape::new();
    let out = build(&mut tape, params)?;
    out.item()
}
