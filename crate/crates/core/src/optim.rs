//! Parameter storage and the two optimizers used for fine-tuning (SGD) and
//! agent updates (Adam).

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// One named parameter with its gradient slot and optimizer state.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Adam first moment, or the SGD momentum buffer.
    pub first_moment: Option<Tensor>,
    /// Adam second moment.
    pub second_moment: Option<Tensor>,
    /// Number of Adam steps taken, for bias correction.
    pub steps: u64,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter, or replaces the value of an existing one with the
    /// same name (resetting its gradient and optimizer state).
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        let grad = Tensor::zeros(value.shape());
        let param = Param { name, value, grad, first_moment: None, second_moment: None, steps: 0 };
        match self.id_of(&param.name) {
            Some(id) => {
                self.params[id.0] = param;
                id
            }
            None => {
                self.params.push(param);
                ParamId(self.params.len() - 1)
            }
        }
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    /// Mutable access to a value. Optimizer steps reject the parameter if
    /// its shape no longer matches the stored gradient and moments.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.id_of(name).map(|id| self.value(id))
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn accumulate_grad(&mut self, id: ParamId, delta: &Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.grad.shape() != delta.shape() {
            return shape_err(format!(
                "gradient for {} has shape {:?}, parameter is {:?}",
                p.name,
                delta.shape(),
                p.grad.shape()
            ));
        }
        for (g, d) in p.grad.data_mut().iter_mut().zip(delta.data()) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            if p.grad.shape() != p.value.shape() {
                p.grad = Tensor::zeros(p.value.shape());
            } else {
                p.grad.data_mut().fill(0.0);
            }
        }
    }

    /// Flattened copy of every gradient, in parameter order.
    pub fn flat_grads(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.grad.data().iter().copied()).collect()
    }

    /// Flattened copy of every value, in parameter order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    fn check_state(p: &Param) -> Result<()> {
        if p.grad.shape() != p.value.shape() {
            return shape_err(format!("gradient slot of {} does not match its value", p.name));
        }
        for m in [&p.first_moment, &p.second_moment].into_iter().flatten() {
            if m.shape() != p.value.shape() {
                return shape_err(format!("optimizer state of {} does not match its value", p.name));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One Adam step with bias correction on every parameter of `store`.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig, zero_grad: bool) -> Result<()> {
    for p in &mut store.params {
        ParamStore::check_state(p)?;
        let shape = p.value.shape().to_vec();
        let m = p.first_moment.get_or_insert_with(|| Tensor::zeros(&shape));
        let v = p.second_moment.get_or_insert_with(|| Tensor::zeros(&shape));
        p.steps += 1;
        let t = p.steps as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    if zero_grad {
        store.zero_grad();
    }
    Ok(())
}

/// SGD with optional heavy-ball momentum.
pub fn sgd_step(store: &mut ParamStore, lr: f64, momentum: f64, zero_grad: bool) -> Result<()> {
    for p in &mut store.params {
        ParamStore::check_state(p)?;
        if momentum == 0.0 {
            for (w, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *w -= lr * g;
            }
        } else {
            let shape = p.value.shape().to_vec();
            let buf = p.first_moment.get_or_insert_with(|| Tensor::zeros(&shape));
            for ((w, g), b) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(buf.data_mut()) {
                *b = momentum * *b + g;
                *w -= lr * *b;
            }
        }
    }
    if zero_grad {
        store.zero_grad();
    }
    Ok(())
}
