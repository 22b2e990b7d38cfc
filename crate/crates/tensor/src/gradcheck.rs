//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward closure, so it stays
//! independent of the backward rules it checks.

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

/// Denominator floor for the relative error, so near-zero gradients are
/// compared on an absolute scale of `1e-2 · tol`.
pub const REL_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic and central-difference gradients of the scalar built by
/// `f` with respect to every trainable tensor in `store`.
///
/// At most `max_per_tensor` entries are probed per tensor (evenly strided).
pub fn check<F>(store: &ParamStore, h: f64, max_per_tensor: usize, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss)?;
    let grads = tape.param_grads();

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let v = f(&mut t, s)?;
        t.scalar(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = store.clone();
    for (name, analytic) in grads {
        let n = analytic.len();
        let stride = (n / max_per_tensor.max(1)).max(1);
        for i in (0..n).step_by(stride).take(max_per_tensor) {
            let orig = probe.get(&name).unwrap().data()[i];
            probe.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(analytic[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((name.clone(), i, analytic[i], numeric));
                }
            }
        }
    }
    Ok(report)
}
