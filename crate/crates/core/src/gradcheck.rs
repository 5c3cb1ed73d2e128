//! Central finite-difference oracle for reverse-mode gradients.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Central differences of `f` at `x` for the listed flat coordinates.
pub fn central_difference<F>(
    mut f: F,
    x: &Tensor<f64>,
    coords: &[usize],
    h: f64,
) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let plus = f(&probe)?;
            probe.data_mut()[i] = orig - h;
            let minus = f(&probe)?;
            probe.data_mut()[i] = orig;
            Ok((plus - minus) / (2.0 * h))
        })
        .collect()
}

/// Checks the reverse-mode gradient of the scalar function `f` at `x` against
/// central differences and returns the maximum relative error over all
/// coordinates. `f` must be deterministic (stochastic parts take frozen noise).
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_at(f, x, &coords, h)
}

/// [`grad_check`] restricted to the listed flat coordinates of `x`.
pub fn grad_check_at<F>(f: F, x: &Tensor<f64>, coords: &[usize], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic = g
        .grad(xv)
        .ok_or_else(|| Error::Backward("no gradient on input".into()))?
        .clone();

    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };
    let numeric = central_difference(eval, x, coords, h)?;
    Ok(coords
        .iter()
        .zip(&numeric)
        .map(|(&i, &n)| relative_error(analytic.data()[i], n))
        .fold(0.0, f64::max))
}
