//! Exact transducer loss by forward-backward over the `T x (U+1)` lattice.

use numcore::tensor::log_add;
use numcore::{Graph, Tensor, Var};

use crate::error::{invalid, Result};
use crate::textkit::BLANK;

/// Joint-network log-probabilities laid out as rows `t * (U+1) + u`.
#[derive(Clone, Debug, PartialEq)]
pub struct Lattice {
    pub log_probs: Tensor,
    pub t_len: usize,
    pub u_len: usize,
}

impl Lattice {
    pub fn new(log_probs: Tensor, t_len: usize, u_len: usize) -> Result<Self> {
        if log_probs.rank() != 2 || log_probs.rows() != t_len * (u_len + 1) {
            return Err(invalid(format!(
                "lattice of shape {:?} does not match T={t_len}, U={u_len}",
                log_probs.shape()
            )));
        }
        Ok(Lattice {
            log_probs,
            t_len,
            u_len,
        })
    }

    pub fn at(&self, t: usize, u: usize, k: u32) -> f64 {
        self.log_probs.at2(t * (self.u_len + 1) + u, k as usize)
    }
}

fn check(lattice: &Lattice, labels: &[u32]) -> Result<()> {
    if labels.len() != lattice.u_len {
        return Err(invalid(format!(
            "{} labels for a lattice with U={}",
            labels.len(),
            lattice.u_len
        )));
    }
    if lattice.t_len == 0 {
        return Err(invalid("transducer loss needs at least one frame"));
    }
    let v = lattice.log_probs.cols();
    if let Some(&bad) = labels.iter().find(|&&y| y as usize >= v || y == BLANK) {
        return Err(invalid(format!(
            "label {bad} is blank or outside vocabulary of {v}"
        )));
    }
    Ok(())
}

/// Forward variables `alpha[t][u]` (log-probability of reaching `(t, u)`).
pub fn forward_variables(lattice: &Lattice, labels: &[u32]) -> Vec<Vec<f64>> {
    let (t_len, u_len) = (lattice.t_len, lattice.u_len);
    let mut alpha = vec![vec![f64::NEG_INFINITY; u_len + 1]; t_len];
    for t in 0..t_len {
        for u in 0..=u_len {
            alpha[t][u] = if t == 0 && u == 0 {
                0.0
            } else {
                let from_blank = if t > 0 {
                    alpha[t - 1][u] + lattice.at(t - 1, u, BLANK)
                } else {
                    f64::NEG_INFINITY
                };
                let from_label = if u > 0 {
                    alpha[t][u - 1] + lattice.at(t, u - 1, labels[u - 1])
                } else {
                    f64::NEG_INFINITY
                };
                log_add(from_blank, from_label)
            };
        }
    }
    alpha
}

/// Backward variables `beta[t][u]` (log-probability of finishing from
/// `(t, u)`, final blank included).
pub fn backward_variables(lattice: &Lattice, labels: &[u32]) -> Vec<Vec<f64>> {
    let (t_len, u_len) = (lattice.t_len, lattice.u_len);
    let mut beta = vec![vec![f64::NEG_INFINITY; u_len + 1]; t_len];
    for t in (0..t_len).rev() {
        for u in (0..=u_len).rev() {
            beta[t][u] = if t == t_len - 1 && u == u_len {
                lattice.at(t, u, BLANK)
            } else {
                let via_blank = if t + 1 < t_len {
                    lattice.at(t, u, BLANK) + beta[t + 1][u]
                } else {
                    f64::NEG_INFINITY
                };
                let via_label = if u < u_len {
                    lattice.at(t, u, labels[u]) + beta[t][u + 1]
                } else {
                    f64::NEG_INFINITY
                };
                log_add(via_blank, via_label)
            };
        }
    }
    beta
}

/// Log-likelihood computed both ways: `(from alpha, from beta)`.
pub fn log_likelihoods(lattice: &Lattice, labels: &[u32]) -> Result<(f64, f64)> {
    check(lattice, labels)?;
    let alpha = forward_variables(lattice, labels);
    let beta = backward_variables(lattice, labels);
    let (t, u) = (lattice.t_len - 1, lattice.u_len);
    Ok((alpha[t][u] + lattice.at(t, u, BLANK), beta[0][0]))
}

/// Negative log-likelihood of `labels`.
pub fn rnnt_loss_value(lattice: &Lattice, labels: &[u32]) -> Result<f64> {
    Ok(-log_likelihoods(lattice, labels)?.0)
}

/// Gradient of the negative log-likelihood with respect to every lattice
/// entry.
pub fn rnnt_loss_grad(lattice: &Lattice, labels: &[u32]) -> Result<Tensor> {
    check(lattice, labels)?;
    let alpha = forward_variables(lattice, labels);
    let beta = backward_variables(lattice, labels);
    let ll = beta[0][0];
    let (t_len, u_len) = (lattice.t_len, lattice.u_len);
    let mut grad = Tensor::zeros(lattice.log_probs.shape());
    let v = grad.cols();
    for t in 0..t_len {
        for u in 0..=u_len {
            let row = t * (u_len + 1) + u;
            let next_blank = if t + 1 < t_len {
                beta[t + 1][u]
            } else if u == u_len {
                0.0
            } else {
                f64::NEG_INFINITY
            };
            let b = alpha[t][u] + lattice.at(t, u, BLANK) + next_blank - ll;
            grad.data_mut()[row * v + BLANK as usize] = -b.exp();
            if u < u_len {
                let y = labels[u] as usize;
                let l = alpha[t][u] + lattice.at(t, u, labels[u]) + beta[t][u + 1] - ll;
                grad.data_mut()[row * v + y] = -l.exp();
            }
        }
    }
    Ok(grad)
}

/// Differentiable transducer loss on a lattice node of shape
/// `[T * (U+1), V]`.
pub fn rnnt_loss(g: &Graph, log_probs: Var, t_len: usize, labels: &[u32]) -> Result<Var> {
    if t_len == 0 && !labels.is_empty() {
        return Err(invalid("labels given for an empty frame sequence"));
    }
    let lattice = Lattice::new(g.value(log_probs), t_len, labels.len())?;
    let value = rnnt_loss_value(&lattice, labels)?;
    if !g.is_recording() {
        return Ok(g.constant(Tensor::scalar(value)));
    }
    let grad = rnnt_loss_grad(&lattice, labels)?;
    Ok(
        g.op(Tensor::scalar(value), &[log_probs], move |gout, _, _| {
            let mut gx = grad.clone();
            gx.scale_in_place(gout.item());
            vec![Some(gx)]
        }),
    )
}
