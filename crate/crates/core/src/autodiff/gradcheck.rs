use crate::autodiff::graph::{Graph, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{MctError, Result};

/// Finite-difference step used by default.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Magnitudes below this are compared absolutely rather than relatively.
const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub evaluations: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares the analytic gradient of a scalar graph against central finite
/// differences for every entry of every named parameter.
///
/// `build` must construct the same graph every time it is called; it gets
/// the parameter leaves in the order given.
pub fn check_gradients<F>(params: &[(String, Tensor)], build: F, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        scalar(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    scalar(&g, out)?;
    let grads = g.backward(out)?;

    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradCheckReport {
        params: Vec::with_capacity(params.len()),
        max_rel_error: 0.0,
        evaluations: 0,
    };
    let mut worst: Option<(String, f64)> = None;
    for (pi, (name, _)) in params.iter().enumerate() {
        let analytic = grads.get(vars[pi], &g);
        let mut max_rel: f64 = 0.0;
        for idx in 0..values[pi].len() {
            let orig = values[pi].data()[idx];
            values[pi].data_mut()[idx] = orig + step;
            let plus = eval(&values)?;
            values[pi].data_mut()[idx] = orig - step;
            let minus = eval(&values)?;
            values[pi].data_mut()[idx] = orig;
            report.evaluations += 2;
            let numeric = (plus - minus) / (2.0 * step);
            max_rel = max_rel.max(relative_error(analytic.data()[idx], numeric));
        }
        if max_rel > tol && worst.as_ref().is_none_or(|(_, e)| max_rel > *e) {
            worst = Some((name.clone(), max_rel));
        }
        report.max_rel_error = report.max_rel_error.max(max_rel);
        report.params.push(ParamCheck {
            name: name.clone(),
            max_rel_error: max_rel,
            max_abs_grad: analytic.max_abs(),
        });
    }
    match worst {
        Some((param, rel_error)) => Err(MctError::GradientMismatch { param, rel_error, tol }),
        None => Ok(report),
    }
}

fn scalar(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(MctError::shape("check_gradients", t.shape(), &[1]));
    }
    Ok(t.data()[0])
}
