use crate::error::{NumError, Result};
use crate::params::ParamStore;

/// Exponential moving average of model parameters kept for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub decay: f64,
    pub shadow: ParamStore,
}

impl EmaState {
    pub fn new(decay: f64, params: &ParamStore) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(NumError::invalid(format!(
                "EMA decay {decay} outside [0, 1]"
            )));
        }
        Ok(EmaState {
            decay,
            shadow: params.clone(),
        })
    }

    /// `shadow <- decay * shadow + (1 - decay) * params`.
    pub fn update(&mut self, params: &ParamStore) -> Result<()> {
        if params.len() != self.shadow.len() {
            return Err(NumError::invalid("EMA parameter set differs from shadow"));
        }
        for (path, p) in params.iter() {
            let s = self.shadow.get_mut(path)?;
            s.expect_shape("ema_update", p.shape())?;
            for (sv, pv) in s.data_mut().iter_mut().zip(p.data()) {
                *sv = self.decay * *sv + (1.0 - self.decay) * pv;
            }
        }
        Ok(())
    }
}
