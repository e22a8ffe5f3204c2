//! Central finite-difference checks for tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Max over all coordinates of all `points` of
/// `|analytic − central| / max(1, |analytic|)`.
///
/// `f` receives one leaf per point and must return a scalar node. It is
/// re-evaluated forward-only at every perturbed coordinate.
pub fn check_gradients_multi<F>(f: F, points: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(Error::shape("checked function must return a scalar"));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::non_finite("checked function at perturbed point"));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = points.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros_like(&points[pi]));
        for c in 0..points[pi].len() {
            let orig = points[pi].data()[c];
            work[pi].data_mut()[c] = orig + step;
            let up = eval(&work)?;
            work[pi].data_mut()[c] = orig - step;
            let down = eval(&work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[c];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Single-input form of [`check_gradients_multi`].
pub fn check_gradients<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_gradients_multi(|t, v| f(t, v[0]), std::slice::from_ref(point), step)
}
