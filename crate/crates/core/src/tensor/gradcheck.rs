//! Central finite-difference check of analytic gradients.

use super::graph::{Graph, Var};
use super::mat::Mat;
use crate::error::{Error, Result};

/// Denominator floor of the relative error, so coordinates whose true
/// derivative is ~0 are compared on an absolute scale of 1e-2.
pub const REL_ERR_FLOOR: f64 = 1e-2;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the gradient of a scalar graph built by `f` at `point` against
/// central differences with the given `step`; returns the max relative error.
pub fn grad_check<F>(f: F, point: &Mat, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(
        |g: &mut Graph, vars: &[Var]| f(g, vars[0]),
        std::slice::from_ref(point),
        step,
    )
}

/// Multi-input form of [`grad_check`]: every coordinate of every input is perturbed.
pub fn grad_check_many<F>(f: F, points: &[Mat], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Contract(
            "finite-difference step must be positive".into(),
        ));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Mat> = vars.iter().map(|&v| g.grad(v)).collect();

    let eval = |pts: &[Mat]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = pts.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut worst = 0.0f64;
    let mut pts = points.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for k in 0..grad.len() {
            let orig = pts[which].data()[k];
            pts[which].data_mut()[k] = orig + step;
            let up = eval(&pts)?;
            pts[which].data_mut()[k] = orig - step;
            let down = eval(&pts)?;
            pts[which].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(grad.data()[k], numeric));
        }
    }
    Ok(worst)
}
