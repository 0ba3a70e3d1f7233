//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles.
//! Calling [`Graph::backward`] walks the tape in reverse and returns the
//! gradient of a scalar with respect to every tracked leaf and parameter.
//!
//! Graphs built with [`Graph::inference`] compute values only and never
//! store backward closures.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use crate::error::{NumError, Result};
use crate::params::{ParamStore, TensorMap};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) type BackFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

struct Backward {
    inputs: Vec<usize>,
    f: BackFn,
}

#[derive(Default)]
struct Tape {
    values: Vec<Tensor>,
    needs_grad: Vec<bool>,
    backs: Vec<Option<Backward>>,
    params: HashMap<String, usize>,
}

pub struct Graph {
    tape: RefCell<Tape>,
    record: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: TensorMap,
}

impl Gradients {
    /// Gradient of a recorded value; zeros if it did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &TensorMap {
        &self.params
    }

    pub fn into_params(self) -> TensorMap {
        self.params
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            tape: RefCell::new(Tape::default()),
            record: true,
        }
    }

    /// A graph that evaluates values without recording backward closures.
    pub fn inference() -> Self {
        Graph {
            tape: RefCell::new(Tape::default()),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.tape.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_raw(&self, value: Tensor, needs: bool, back: Option<Backward>) -> Var {
        let mut tape = self.tape.borrow_mut();
        tape.values.push(value);
        tape.needs_grad.push(needs);
        tape.backs.push(back);
        Var(tape.values.len() - 1)
    }

    /// Untracked constant.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_raw(value, false, None)
    }

    /// Tracked leaf; its gradient is available through [`Gradients::get`].
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push_raw(value, self.record, None)
    }

    /// Tracked parameter loaded from a store. Repeated calls with the same
    /// path return the same handle so gradients accumulate in one place.
    pub fn param(&self, store: &ParamStore, path: &str) -> Result<Var> {
        if let Some(&id) = self.tape.borrow().params.get(path) {
            return Ok(Var(id));
        }
        let t = store.get(path)?.clone();
        let v = self.push_raw(t, self.record, None);
        self.tape.borrow_mut().params.insert(path.to_string(), v.0);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.tape.borrow().values[v.0].clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.tape.borrow().values[v.0].shape().to_vec()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.tape.borrow().values[v.0].item()
    }

    /// Runs `f` against a borrowed value.
    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.borrow().values[v.0])
    }

    /// Records an operation. `back` maps `(grad_out, inputs, output)` to one
    /// optional gradient per input.
    pub fn op(
        &self,
        value: Tensor,
        inputs: &[Var],
        back: impl Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Var {
        let needs = self.record && {
            let tape = self.tape.borrow();
            inputs.iter().any(|v| tape.needs_grad[v.0])
        };
        let back = needs.then(|| Backward {
            inputs: inputs.iter().map(|v| v.0).collect(),
            f: Box::new(back),
        });
        self.push_raw(value, needs, back)
    }

    /// Computes a new value from borrowed inputs.
    pub fn compute<R>(&self, inputs: &[Var], f: impl FnOnce(&[&Tensor]) -> R) -> R {
        let tape = self.tape.borrow();
        let vals: Vec<&Tensor> = inputs.iter().map(|v| &tape.values[v.0]).collect();
        f(&vals)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let tape = self.tape.borrow();
        if tape.values[loss.0].numel() != 1 {
            return Err(NumError::invalid("backward expects a scalar loss"));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(tape.values[loss.0].shape(), 1.0));
        for i in (0..n).rev() {
            let Some(back) = &tape.backs[i] else { continue };
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = back.inputs.iter().map(|&j| &tape.values[j]).collect();
            let gins = (back.f)(&gout, &inputs, &tape.values[i]);
            for (&j, gin) in back.inputs.iter().zip(gins) {
                let Some(gin) = gin else { continue };
                if !tape.needs_grad[j] {
                    continue;
                }
                debug_assert_eq!(gin.shape(), tape.values[j].shape());
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&gin)?,
                    slot @ None => *slot = Some(gin),
                }
            }
        }
        let mut params = BTreeMap::new();
        for (path, &id) in &tape.params {
            let g = if id < n { grads[id].clone() } else { None };
            let g = g.unwrap_or_else(|| Tensor::zeros(tape.values[id].shape()));
            params.insert(path.clone(), g);
        }
        Ok(Gradients {
            by_node: grads,
            params,
        })
    }
}
