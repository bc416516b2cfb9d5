//! Central finite-difference checks against the tape's analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Step used for central differences at 64-bit precision.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients below this magnitude are compared on an absolute scale.
///
/// Round-off in a central difference of an O(1) loss is about
/// `f64::EPSILON / step ≈ 2e-11`, far below `REL_FLOOR * 1e-4`.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose stencil crossed a ReLU kink and were not compared.
    pub skipped_kinks: usize,
    /// (input index, coordinate, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval<F>(inputs: &[Tensor], f: &F) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, &vars)?;
    Ok((g.value(loss).data()[0], g.relu_pattern()))
}

/// Compares `d f / d inputs` from the tape with central differences.
///
/// `max_coords` bounds the number of coordinates checked per input; when it
/// is smaller than the input, coordinates are taken at an even stride.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    f: F,
    step: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.leaf(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let base_pattern = g.relu_pattern();

    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).expect("leaf grad").to_vec();
        let n = input.len();
        let stride = max_coords.map_or(1, |m| n.div_ceil(m.max(1)));
        for i in (0..n).step_by(stride) {
            let orig = input.data()[i];
            probe[k].data_mut()[i] = orig + step;
            let (plus, p_pat) = eval(&probe, &f)?;
            probe[k].data_mut()[i] = orig - step;
            let (minus, m_pat) = eval(&probe, &f)?;
            probe[k].data_mut()[i] = orig;
            if p_pat != base_pattern || m_pat != base_pattern {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((k, i, analytic[i], numeric));
            }
        }
    }
    Ok(report)
}
