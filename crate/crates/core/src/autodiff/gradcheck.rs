use super::graph::{Graph, Var};
use crate::error::{MarnError, Result};
use crate::tensor::Tensor;

/// Minimum denominator of the relative error, so that gradients that are
/// analytically zero are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Denominator floor for a check of `f` with value `f0`: never below
/// [`REL_ERROR_FLOOR`], and never below the level at which rounding noise
/// in the central difference would by itself exceed `tol`. A deep
/// computation of `f` is taken to carry up to [`ROUNDING_ULPS`] ulps of
/// error, which the difference quotient divides by `eps`.
pub fn error_floor(f0: f64, eps: f64, tol: f64) -> f64 {
    REL_ERROR_FLOOR.max(ROUNDING_ULPS * f64::EPSILON * f0.abs().max(1.0) / (eps * tol))
}

pub const ROUNDING_ULPS: f64 = 100.0;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    pub passed: bool,
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences, coordinate by coordinate, over every input tensor.
///
/// `f` receives a fresh graph and the leaf handles for `inputs` (in order)
/// and must return a scalar node. It has to be deterministic.
pub fn check_gradients<F>(f: F, inputs: &[Tensor<f64>], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new(0);
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if !v.is_scalar() {
            return Err(MarnError::Shape(format!(
                "gradient check needs a scalar function, got shape {:?}",
                v.shape()
            )));
        }
        Ok(v.data()[0])
    };

    let mut g = Graph::new(0);
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let floor = error_floor(g.value(out).data()[0], eps, tol);
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad(v)).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
        passed: true,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for k in 0..input.len() {
            let orig = input.data()[k];
            probe[ti].data_mut()[k] = orig + eps;
            let plus = eval(&probe)?;
            probe[ti].data_mut()[k] = orig - eps;
            let minus = eval(&probe)?;
            probe[ti].data_mut()[k] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(MarnError::Numeric(format!(
                    "non-finite function value perturbing input {ti} coordinate {k}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ti].data()[k];
            if !a.is_finite() {
                return Err(MarnError::Numeric(format!(
                    "non-finite analytic gradient at input {ti} coordinate {k}"
                )));
            }
            let denom = a.abs().max(numeric.abs()).max(floor);
            let rel = (a - numeric).abs() / denom;
            report.coordinates += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (ti, k);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}
