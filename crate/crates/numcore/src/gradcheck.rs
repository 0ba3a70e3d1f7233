//! Central-difference gradient verification.

use crate::error::{NumError, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Relative error used throughout: `|analytic - numeric| / max(1, |analytic|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn eval_point<F>(f: &F, point: &Tensor, coord: usize) -> Result<f64>
where
    F: Fn(&Graph, Var) -> Result<Var>,
{
    let g = Graph::inference();
    let x = g.leaf(point.clone());
    let y = f(&g, x)?;
    let v = g.scalar(y);
    if !v.is_finite() {
        return Err(NumError::NonFinite {
            what: "grad_check function value".into(),
            index: coord,
        });
    }
    Ok(v)
}

/// Compares the tape gradient of scalar `f` at `point` with central
/// differences and returns the worst relative error over all coordinates.
pub fn grad_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&Graph, Var) -> Result<Var>,
{
    if epsilon <= 0.0 {
        return Err(NumError::invalid("grad_check epsilon must be positive"));
    }
    let g = Graph::new();
    let x = g.leaf(point.clone());
    let y = f(&g, x)?;
    let base = g.scalar(y);
    if !base.is_finite() {
        return Err(NumError::NonFinite {
            what: "grad_check function value".into(),
            index: 0,
        });
    }
    let grads = g.backward(y)?;
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape()));
    let mut worst = 0.0f64;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += epsilon;
        let mut minus = point.clone();
        minus.data_mut()[i] -= epsilon;
        let numeric = (eval_point(&f, &plus, i)? - eval_point(&f, &minus, i)?) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Parameter-store variant: perturbs up to `max_per_param` evenly spaced
/// coordinates of every parameter (all of them when `None`).
pub fn grad_check_params<F>(
    store: &ParamStore,
    f: F,
    epsilon: f64,
    max_per_param: Option<usize>,
) -> Result<f64>
where
    F: Fn(&Graph, &ParamStore) -> Result<Var>,
{
    let g = Graph::new();
    let y = f(&g, store)?;
    let grads = g.backward(y)?.into_params();
    let mut worst = 0.0f64;
    let mut probe = store.clone();
    for (path, t) in store.iter() {
        let n = t.numel();
        let coords: Vec<usize> = match max_per_param {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        let analytic = grads
            .get(path)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()));
        for c in coords {
            let orig = t.data()[c];
            let mut eval = |delta: f64| -> Result<f64> {
                probe.get_mut(path)?.data_mut()[c] = orig + delta;
                let gi = Graph::inference();
                let v = gi.scalar(f(&gi, &probe)?);
                if !v.is_finite() {
                    return Err(NumError::NonFinite {
                        what: format!("grad_check at {path}"),
                        index: c,
                    });
                }
                Ok(v)
            };
            let numeric = (eval(epsilon)? - eval(-epsilon)?) / (2.0 * epsilon);
            probe.get_mut(path)?.data_mut()[c] = orig;
            worst = worst.max(relative_error(analytic.data()[c], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let err = grad_check(
            |g, x| Ok(g.sum(g.square(x))),
            &Tensor::vector(vec![3.0]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn non_finite_reports_failure() {
        let r = grad_check(
            |g, x| Ok(g.sum(g.ln(x))),
            &Tensor::vector(vec![1.0, 0.0]),
            1e-3,
        );
        assert!(matches!(r, Err(NumError::NonFinite { .. })));
    }
}
