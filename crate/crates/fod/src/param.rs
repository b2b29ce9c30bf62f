//! Learnable parameters and the Adam optimizer.
//!
//! Parameters live in a flat [`ParamStore`] and are addressed by [`ParamId`];
//! model structs hold ids, never tensors, which keeps forward passes readable
//! and lets checkpoints serialize by name.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
    pub step_count: u64,
}

impl Param {
    fn new(name: String, value: Tensor) -> Self {
        let zeros = Tensor::zeros(value.shape().to_vec());
        Self {
            name,
            grad: zeros.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            value,
            step_count: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Param::new(name.into(), value));
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) {
        self.params[id.0].grad.add_assign(grad);
    }

    /// One Adam update with bias correction. The gradient is consumed (zeroed)
    /// and the step counter advances.
    pub fn adam_step(&mut self, id: ParamId, lr: f64) -> Result<()> {
        let p = &mut self.params[id.0];
        if !p.grad.all_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {}", p.name)));
        }
        p.step_count += 1;
        let t = p.step_count as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let g = p.grad.data();
        let m = p.adam_m.data_mut();
        for (mi, &gi) in m.iter_mut().zip(g.iter()) {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
        }
        let v = p.adam_v.data_mut();
        for (vi, &gi) in v.iter_mut().zip(g.iter()) {
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
        }
        let m = p.adam_m.data();
        let v = p.adam_v.data();
        let w = p.value.data_mut();
        for i in 0..w.len() {
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        p.grad.fill(0.0);
        Ok(())
    }

    pub fn adam_step_all(&mut self, lr: f64) -> Result<()> {
        for i in 0..self.params.len() {
            self.adam_step(ParamId(i), lr)?;
        }
        Ok(())
    }
}
