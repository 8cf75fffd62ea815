use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Default central-difference step at 64-bit.
pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradientReport {
    pub max_relative_error: f64,
    /// Largest relative error within each input tensor.
    pub per_parameter: Vec<f64>,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare backward gradients of `f` at `point` with
/// `(f(x + eps) - f(x - eps)) / (2 eps)` for every coordinate.
///
/// `f` receives a fresh tape and one leaf per input tensor and returns the
/// scalar to differentiate.
pub fn check_gradients<F>(f: F, point: &[Tensor], eps: f64) -> Result<GradientReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidInput(format!("finite-difference step {eps} must be positive")));
    }
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.item(out)?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("function value {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.item(out)?.is_finite() {
        return Err(Error::NonFinite("function value at the base point".into()));
    }
    let grads = tape.backward(out)?;

    let mut work: Vec<Tensor> = point.to_vec();
    let mut per_parameter = Vec::with_capacity(point.len());
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(&tape, *var);
        let mut worst: f64 = 0.0;
        for i in 0..point[p].len() {
            let x0 = point[p].data()[i];
            work[p].data_mut()[i] = x0 + eps;
            let hi = eval(&work)?;
            work[p].data_mut()[i] = x0 - eps;
            let lo = eval(&work)?;
            work[p].data_mut()[i] = x0;
            let numeric = (hi - lo) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
        per_parameter.push(worst);
    }
    Ok(GradientReport {
        max_relative_error: per_parameter.iter().cloned().fold(0.0, f64::max),
        per_parameter,
    })
}
