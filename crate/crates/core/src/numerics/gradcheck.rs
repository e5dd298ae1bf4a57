//! Analytic-versus-numeric gradient comparison.

use super::{finite_diff, Matrix, NodeId, Tape};
use crate::error::Result;

/// Step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error. Below this magnitude the
/// comparison is effectively absolute, since central differences carry
/// roughly `1e-11` of rounding noise regardless of the gradient's size.
pub const REL_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Outcome of one gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Builds a scalar on a fresh tape from leaves holding `inputs`, then compares
/// the tape gradient of every input element against central differences of
/// the same closure.
pub fn check_gradients<F>(inputs: &[Matrix], build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Matrix]| -> Result<(Tape, Vec<NodeId>, NodeId)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = build(&mut tape, &ids)?;
        Ok((tape, ids, out))
    };

    let (tape, ids, out) = eval(inputs)?;
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id);
        let numeric = finite_diff(
            |x| {
                let mut perturbed = inputs.to_vec();
                perturbed[k] = x.clone();
                eval(&perturbed).map_or(f64::NAN, |(t, _, o)| t.value(o).as_slice()[0])
            },
            &inputs[k],
            FD_STEP,
        );
        for (&a, &n) in analytic.as_slice().iter().zip(numeric.as_slice()) {
            let err = relative_error(a, n);
            // NaN from a failed re-evaluation must surface as a failure
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        checked,
    })
}
