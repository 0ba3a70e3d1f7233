//! Adam and Adafactor with a warmup / inverse-square-root schedule and
//! global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::error::{NumError, Result};
use crate::params::{ParamStore, TensorMap};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Adafactor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub grad_norm_cap: f64,
    pub factored_second_moment: bool,
    /// Adam denominator epsilon.
    pub eps: f64,
    /// Adafactor `(eps1, eps2)`: squared-gradient floor and parameter-scale floor.
    pub adafactor_eps: (f64, f64),
    /// Adafactor update clipping threshold.
    pub clip_threshold: f64,
    /// Adafactor: scale the step by `max(eps2, rms(param))`.
    pub scale_by_param_rms: bool,
}

impl OptimizerConfig {
    pub fn adam(peak_lr: f64, warmup_steps: u64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.98,
            peak_lr,
            warmup_steps,
            grad_norm_cap: 20.0,
            factored_second_moment: false,
            eps: 1e-8,
            adafactor_eps: (1e-30, 1e-3),
            clip_threshold: 1.0,
            scale_by_param_rms: false,
        }
    }

    pub fn adafactor(peak_lr: f64, warmup_steps: u64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adafactor,
            factored_second_moment: true,
            ..Self::adam(peak_lr, warmup_steps)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..1.0).contains(&x);
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(NumError::invalid(format!(
                "betas must lie in [0, 1): beta1={}, beta2={}",
                self.beta1, self.beta2
            )));
        }
        if self.warmup_steps < 1 {
            return Err(NumError::invalid("warmup_steps must be at least 1"));
        }
        if !(self.grad_norm_cap > 0.0) {
            return Err(NumError::invalid("grad_norm_cap must be positive"));
        }
        if !(self.peak_lr >= 0.0) {
            return Err(NumError::invalid("peak_lr must be non-negative"));
        }
        Ok(())
    }
}

/// `peak · min(step / warmup, sqrt(warmup / step))`.
pub fn transformer_lr(step: u64, peak_lr: f64, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(NumError::invalid("learning-rate schedule steps start at 1"));
    }
    if warmup == 0 {
        return Err(NumError::invalid("warmup must be at least 1"));
    }
    let (s, w) = (step as f64, warmup as f64);
    Ok(peak_lr * (s / w).min((w / s).sqrt()))
}

pub fn global_norm(grads: &TensorMap) -> f64 {
    grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales all gradients by `cap / norm` when the global L2 norm exceeds
/// `cap`. Returns the norm measured before clipping.
pub fn clip_global_norm(grads: &mut TensorMap, cap: f64) -> Result<f64> {
    if !(cap > 0.0) {
        return Err(NumError::invalid("clipping cap must be positive"));
    }
    for (path, g) in grads.iter() {
        if let Some(index) = g.first_non_finite() {
            return Err(NumError::NonFinite {
                what: format!("gradient of {path}"),
                index,
            });
        }
    }
    let norm = global_norm(grads);
    if norm > cap {
        let s = cap / norm;
        grads.values_mut().for_each(|g| g.scale_in_place(s));
    }
    Ok(norm)
}

/// Optimizer slots keyed `"<slot>/<param path>"` plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub slots: TensorMap,
}

impl OptimizerState {
    /// Number of scalar accumulators held for `slot` across all parameters.
    pub fn slot_size(&self, slot: &str) -> usize {
        let prefix = format!("{slot}/");
        self.slots
            .iter()
            .filter(|(k, _)| k.starts_with(&prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn to_tensors(&self) -> TensorMap {
        let mut m = self.slots.clone();
        m.insert("step".into(), Tensor::scalar(self.step as f64));
        m
    }

    pub fn from_tensors(mut m: TensorMap) -> Result<Self> {
        let step = m
            .remove("step")
            .ok_or_else(|| NumError::Missing("step".into()))?
            .item();
        if !(step >= 0.0) || step.fract() != 0.0 {
            return Err(NumError::format("optimizer step is not a count"));
        }
        Ok(OptimizerState {
            step: step as u64,
            slots: m,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub state: OptimizerState,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            state: OptimizerState::default(),
        })
    }

    pub fn current_lr(&self) -> Result<f64> {
        transformer_lr(
            self.state.step.max(1),
            self.config.peak_lr,
            self.config.warmup_steps,
        )
    }

    /// Clips, advances the schedule, and updates every parameter present in
    /// `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &TensorMap) -> Result<StepReport> {
        for (path, g) in grads {
            params
                .get(path)?
                .expect_shape("optimizer step", g.shape())?;
        }
        let mut grads = grads.clone();
        let grad_norm = clip_global_norm(&mut grads, self.config.grad_norm_cap)?;
        let step = self.state.step + 1;
        let lr = transformer_lr(step, self.config.peak_lr, self.config.warmup_steps)?;
        for (path, g) in &grads {
            let p = params.get_mut(path)?;
            match self.config.kind {
                OptimizerKind::Adam => {
                    adam_update(&self.config, &mut self.state.slots, path, p, g, step, lr)?
                }
                OptimizerKind::Adafactor => {
                    adafactor_update(&self.config, &mut self.state.slots, path, p, g, step, lr)?
                }
            }
        }
        self.state.step = step;
        Ok(StepReport {
            step,
            lr,
            grad_norm,
        })
    }
}

fn slot<'a>(
    slots: &'a mut TensorMap,
    name: &str,
    path: &str,
    shape: &[usize],
) -> Result<&'a mut Tensor> {
    let key = format!("{name}/{path}");
    let t = slots.entry(key).or_insert_with(|| Tensor::zeros(shape));
    t.expect_shape("optimizer slot", shape)?;
    Ok(t)
}

/// One bias-corrected Adam update of a single parameter.
pub fn adam_update(
    cfg: &OptimizerConfig,
    slots: &mut TensorMap,
    path: &str,
    param: &mut Tensor,
    grad: &Tensor,
    step: u64,
    lr: f64,
) -> Result<()> {
    param.expect_shape("adam", grad.shape())?;
    let shape = param.shape().to_vec();
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    {
        let m = slot(slots, "m", path, &shape)?;
        for (mv, g) in m.data_mut().iter_mut().zip(grad.data()) {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * g;
        }
    }
    {
        let v = slot(slots, "v", path, &shape)?;
        for (vv, g) in v.data_mut().iter_mut().zip(grad.data()) {
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * g * g;
        }
    }
    let m = &slots[&format!("m/{path}")];
    let v = &slots[&format!("v/{path}")];
    for ((p, mv), vv) in param.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
        let mh = mv / bc1;
        let vh = vv / bc2;
        *p -= lr * mh / (vh.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Whether a parameter of this shape keeps a factored second moment.
pub fn is_factored(cfg: &OptimizerConfig, shape: &[usize]) -> bool {
    cfg.factored_second_moment && shape.len() >= 2 && shape.iter().all(|&d| d > 0)
}

/// Factored estimate `V[i,j] = R[i] C[j] / mean(R)` from row and column means.
pub fn factored_estimate(row_mean: &[f64], col_mean: &[f64]) -> Vec<f64> {
    let mean_r = row_mean.iter().sum::<f64>() / row_mean.len().max(1) as f64;
    let mut out = Vec::with_capacity(row_mean.len() * col_mean.len());
    for r in row_mean {
        for c in col_mean {
            out.push(if mean_r > 0.0 { r * c / mean_r } else { 0.0 });
        }
    }
    out
}

/// One Adafactor update of a single parameter. Matrices (rank >= 2, leading
/// dims folded into rows) keep row and column accumulators; everything else
/// keeps a full second moment.
pub fn adafactor_update(
    cfg: &OptimizerConfig,
    slots: &mut TensorMap,
    path: &str,
    param: &mut Tensor,
    grad: &Tensor,
    step: u64,
    lr: f64,
) -> Result<()> {
    param.expect_shape("adafactor", grad.shape())?;
    let shape = param.shape().to_vec();
    let (eps1, eps2) = cfg.adafactor_eps;
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    let g2: Vec<f64> = grad.data().iter().map(|g| g * g + eps1).collect();

    let vhat: Vec<f64> = if is_factored(cfg, &shape) {
        let cols = *shape.last().unwrap();
        let rows = grad.numel() / cols;
        let mut rmean = vec![0.0; rows];
        let mut cmean = vec![0.0; cols];
        for i in 0..rows {
            for j in 0..cols {
                let x = g2[i * cols + j];
                rmean[i] += x / cols as f64;
                cmean[j] += x / rows as f64;
            }
        }
        let vr = slot(slots, "vr", path, &[rows])?;
        for (a, x) in vr.data_mut().iter_mut().zip(&rmean) {
            *a = cfg.beta2 * *a + (1.0 - cfg.beta2) * x;
        }
        let r: Vec<f64> = vr.data().iter().map(|a| a / bc2).collect();
        let vc = slot(slots, "vc", path, &[cols])?;
        for (a, x) in vc.data_mut().iter_mut().zip(&cmean) {
            *a = cfg.beta2 * *a + (1.0 - cfg.beta2) * x;
        }
        let c: Vec<f64> = vc.data().iter().map(|a| a / bc2).collect();
        factored_estimate(&r, &c)
    } else {
        let v = slot(slots, "v", path, &shape)?;
        for (a, x) in v.data_mut().iter_mut().zip(&g2) {
            *a = cfg.beta2 * *a + (1.0 - cfg.beta2) * x;
        }
        v.data().iter().map(|a| a / bc2).collect()
    };

    let mut u: Vec<f64> = grad
        .data()
        .iter()
        .zip(&vhat)
        .map(|(g, v)| g / v.sqrt())
        .collect();
    let rms_u = (u.iter().map(|x| x * x).sum::<f64>() / u.len().max(1) as f64).sqrt();
    let denom = (rms_u / cfg.clip_threshold).max(1.0);
    u.iter_mut().for_each(|x| *x /= denom);

    let scale = if cfg.scale_by_param_rms {
        let rms_p = (param.sq_norm() / param.numel().max(1) as f64).sqrt();
        rms_p.max(eps2)
    } else {
        1.0
    };
    if cfg.beta1 > 0.0 {
        let m = slot(slots, "m", path, &shape)?;
        for (mv, x) in m.data_mut().iter_mut().zip(&u) {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * x;
        }
        u.copy_from_slice(m.data());
    }
    for (p, x) in param.data_mut().iter_mut().zip(&u) {
        *p -= lr * scale * x;
    }
    Ok(())
}

/// Parameter-path partition used when separate parameter groups run
/// separate optimizers.
pub fn split_grads(grads: &TensorMap, keep: impl Fn(&str) -> bool) -> TensorMap {
    grads
        .iter()
        .filter(|(k, _)| keep(k))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect::<BTreeMap<_, _>>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let w = 1000;
        assert_eq!(transformer_lr(w, 2e-3, w).unwrap(), 2e-3);
        assert!((transformer_lr(w / 2, 2e-3, w).unwrap() - 1e-3).abs() < 1e-18);
        assert!((transformer_lr(4 * w, 2e-3, w).unwrap() - 1e-3).abs() < 1e-18);
        assert!(transformer_lr(0, 2e-3, w).is_err());
    }

    #[test]
    fn clipping_halves_when_norm_is_forty() {
        let mut g = TensorMap::new();
        g.insert("a".into(), Tensor::vector(vec![24.0, 32.0]));
        let n = clip_global_norm(&mut g, 20.0).unwrap();
        assert_eq!(n, 40.0);
        assert_eq!(g["a"].data(), &[12.0, 16.0]);
    }

    #[test]
    fn clipping_below_cap_and_zero_are_identity() {
        let mut g = TensorMap::new();
        g.insert("a".into(), Tensor::vector(vec![6.0, 8.0]));
        g.insert("z".into(), Tensor::zeros(&[3]));
        let before = g.clone();
        clip_global_norm(&mut g, 20.0).unwrap();
        assert_eq!(g, before);
    }

    #[test]
    fn clipping_rejects_nan() {
        let mut g = TensorMap::new();
        g.insert("a".into(), Tensor::vector(vec![1.0, f64::NAN]));
        assert!(matches!(
            clip_global_norm(&mut g, 20.0),
            Err(NumError::NonFinite { index: 1, .. })
        ));
    }

    #[test]
    fn adam_first_step_without_momentum() {
        let mut cfg = OptimizerConfig::adam(0.1, 1);
        cfg.beta1 = 0.0;
        cfg.beta2 = 0.0;
        let mut slots = TensorMap::new();
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let g = Tensor::vector(vec![0.5, -3.0]);
        adam_update(&cfg, &mut slots, "p", &mut p, &g, 1, 0.1).unwrap();
        for (i, (&orig, &gv)) in [1.0, -2.0].iter().zip(g.data()).enumerate() {
            let expect = orig - 0.1 * gv / (f64::abs(gv) + 1e-8);
            assert!((p.data()[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn adafactor_factored_state_is_rows_plus_cols() {
        let cfg = OptimizerConfig::adafactor(1e-2, 10);
        let mut opt = Optimizer::new(cfg).unwrap();
        let mut params = ParamStore::new();
        params.insert("w", Tensor::ones(&[4, 5]));
        let mut grads = TensorMap::new();
        grads.insert(
            "w".into(),
            Tensor::from_fn(&[4, 5], |i| i as f64 * 0.1 - 0.7),
        );
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(opt.state.slot_size("vr") + opt.state.slot_size("vc"), 9);
        assert_eq!(opt.state.slot_size("v"), 0);
    }
}
