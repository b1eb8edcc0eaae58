//! Central finite-difference check of analytic gradients.

use crate::diff::{Graph, Matrix, Var};
use crate::error::{Error, Result};

/// Worst disagreement found by [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Input index and flat entry index of the worst offender.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

/// Below this magnitude a central difference with `h = 1e-5` is dominated by
/// rounding (about `eps * |f| / h`), so the denominator is floored here.
pub const NOISE_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, NOISE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(NOISE_FLOOR)
}

fn evaluate<F>(build: &F, inputs: &[Matrix]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.leaf(m.clone())).collect();
    let out = build(&mut g, &vars)?;
    let v = g.value(out);
    if v.shape() != (1, 1) {
        return Err(Error::NonScalarOutput {
            rows: v.rows(),
            cols: v.cols(),
        });
    }
    Ok(v.item())
}

/// Analytic gradient of the scalar graph `build` at `inputs`.
pub fn analytic_gradients<F>(build: &F, inputs: &[Matrix]) -> Result<Vec<Matrix>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.leaf(m.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;
    Ok(vars.iter().map(|&v| grads.wrt(v)).collect())
}

/// Compares reverse-mode gradients of `build` against central differences
/// with step `h` for every entry of every input.
pub fn grad_check<F>(build: F, inputs: &[Matrix], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&build, inputs)?;
    grad_check_against(&build, inputs, &analytic, h)
}

/// Like [`grad_check`] but with caller-supplied analytic gradients.
pub fn grad_check_against<F>(build: &F, inputs: &[Matrix], analytic: &[Matrix], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(h > 0.0 && h <= 1e-3) {
        return Err(Error::Config(format!("perturbation {h} outside (0, 1e-3]")));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for k in 0..input.data().len() {
            let x = input.data()[k];
            probe[i].data_mut()[k] = x + h;
            let plus = evaluate(build, &probe)?;
            probe[i].data_mut()[k] = x - h;
            let minus = evaluate(build, &probe)?;
            probe[i].data_mut()[k] = x;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i].data()[k];
            let err = relative_error(a, numeric);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((i, k));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
