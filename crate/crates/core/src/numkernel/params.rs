use std::collections::BTreeMap;

use super::tape::{Tape, Var};
use super::Matrix;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
struct Slot {
    value: Matrix,
    grad: Matrix,
    m: Matrix,
    v: Matrix,
}

/// Named trainable tensors with their gradient and Adam moment buffers.
///
/// Iteration is in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    slots: BTreeMap<String, Slot>,
    step_count: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds or replaces a parameter, resetting its buffers.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        let (r, c) = value.shape();
        self.slots.insert(
            name.into(),
            Slot {
                value,
                grad: Matrix::zeros(r, c),
                m: Matrix::zeros(r, c),
                v: Matrix::zeros(r, c),
            },
        );
    }

    /// Overwrites the value of an existing parameter, keeping its buffers.
    pub fn set_value(&mut self, name: &str, value: Matrix) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| Error::Model(format!("unknown parameter {name:?}")))?;
        if slot.value.shape() != value.shape() {
            return Err(Error::Model(format!(
                "parameter {name:?} has shape {:?}, got {:?}",
                slot.value.shape(),
                value.shape()
            )));
        }
        slot.value = value;
        Ok(())
    }

    pub fn value(&self, name: &str) -> Option<&Matrix> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.slots.get_mut(name).map(|s| &mut s.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Matrix> {
        self.slots.get(name).map(|s| &s.grad)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn scalar_count(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    /// Copy of the values with fresh gradient and moment buffers.
    pub fn snapshot(&self) -> Self {
        let mut out = Self::new();
        for (name, slot) in &self.slots {
            out.insert(name.clone(), slot.value.clone());
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for slot in self.slots.values_mut() {
            slot.grad.fill(0.0);
        }
    }

    fn set_grads(&mut self, grads: BTreeMap<String, Matrix>) {
        for slot in self.slots.values_mut() {
            slot.grad.fill(0.0);
        }
        for (name, g) in grads {
            if let Some(slot) = self.slots.get_mut(&name) {
                slot.grad = g;
            }
        }
    }

    /// One Adam update with bias correction. Gradients are cleared afterwards.
    pub fn adam_step(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be > 0, got {lr}")));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for slot in self.slots.values_mut() {
            let Slot { value, grad, m, v } = slot;
            let it = value
                .as_mut_slice()
                .iter_mut()
                .zip(grad.as_mut_slice())
                .zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice()));
            for ((w, g), (m, v)) in it {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * *g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * *g * *g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                *g = 0.0;
            }
        }
        Ok(())
    }
}

/// Runs `objective` on a fresh tape and returns the loss without touching
/// gradients.
pub fn evaluate<F>(store: &ParamStore, objective: F) -> Result<f64>
where
    F: FnOnce(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let loss = objective(&mut tape)?;
    if let Some(name) = tape.first_non_finite() {
        return Err(Error::NonFinite {
            tensor: name.to_owned(),
        });
    }
    Ok(tape.scalar(loss))
}

/// Runs `objective`, then writes `∂loss/∂param` into every gradient buffer of
/// `store`. Parameters the objective never binds get zero gradients.
pub fn evaluate_with_gradients<F>(store: &mut ParamStore, objective: F) -> Result<f64>
where
    F: FnOnce(&mut Tape<'_>) -> Result<Var>,
{
    let (loss, grads) = {
        let mut tape = Tape::new(store);
        let loss = objective(&mut tape)?;
        if let Some(name) = tape.first_non_finite() {
            return Err(Error::NonFinite {
                tensor: name.to_owned(),
            });
        }
        (tape.scalar(loss), tape.backward(loss))
    };
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite {
            tensor: format!("grad({name})"),
        });
    }
    store.set_grads(grads);
    Ok(loss)
}
