//! Named parameters, their gradients, and Adam state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
struct Param {
    name: String,
    value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.id(&name).is_some() {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        let (r, c) = value.shape();
        self.params.push(Param {
            name,
            value,
            grad: Tensor::zeros(r, c),
            m: Tensor::zeros(r, c),
            v: Tensor::zeros(r, c),
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub(crate) fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].grad
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// One bias-corrected Adam update using the stored gradients.
    pub fn adam_step(&mut self, lr: f64, cfg: AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for p in &mut self.params {
            let values = p.value.data_mut();
            let (m, v) = (p.m.data_mut(), p.v.data_mut());
            for (i, &g) in p.grad.data().iter().enumerate() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }

    /// Copies parameter values (not optimizer state) from a store with the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::config("parameter layouts differ"));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::config(format!("parameter `{}` does not match", dst.name)));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> StoreCheckpoint {
        let entry = |t: &Tensor| TensorEntry {
            shape: [t.rows(), t.cols()],
            values: t.data().to_vec(),
        };
        StoreCheckpoint {
            params: self
                .params
                .iter()
                .map(|p| (p.name.clone(), entry(&p.value)))
                .collect(),
            optimizer: OptimizerState {
                step: self.step,
                m: self.params.iter().map(|p| (p.name.clone(), entry(&p.m))).collect(),
                v: self.params.iter().map(|p| (p.name.clone(), entry(&p.v))).collect(),
            },
            order: self.params.iter().map(|p| p.name.clone()).collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &StoreCheckpoint) -> Result<Self> {
        let tensor = |map: &BTreeMap<String, TensorEntry>, name: &str| -> Result<Tensor> {
            let e = map
                .get(name)
                .ok_or_else(|| Error::config(format!("checkpoint is missing `{name}`")))?;
            Tensor::new(e.shape[0], e.shape[1], e.values.clone())
        };
        let mut store = ParamStore::new();
        for name in &ckpt.order {
            let value = tensor(&ckpt.params, name)?;
            let id = store.insert(name.clone(), value)?;
            let p = &mut store.params[id.0];
            p.m = tensor(&ckpt.optimizer.m, name)?;
            p.v = tensor(&ckpt.optimizer.v, name)?;
            if p.m.shape() != p.value.shape() || p.v.shape() != p.value.shape() {
                return Err(Error::config(format!("optimizer state shape mismatch for `{name}`")));
            }
        }
        if store.params.len() != ckpt.params.len() {
            return Err(Error::config("checkpoint order does not list every parameter"));
        }
        store.step = ckpt.optimizer.step;
        Ok(store)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, TensorEntry>,
    pub v: BTreeMap<String, TensorEntry>,
}

/// JSON form of a [`ParamStore`]: `{name: {"shape": [r, c], "values": [...]}}`
/// plus Adam moments and the step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreCheckpoint {
    pub params: BTreeMap<String, TensorEntry>,
    pub optimizer: OptimizerState,
    /// Insertion order, so parameter ids survive a round trip.
    pub order: Vec<String>,
}
