//! Named parameter sets, the Adam update, and the parameter checkpoint file.
//!
//! A checkpoint is one line of JSON mapping each parameter name to a byte
//! offset, a `\n`, then the parameters as concatenated `STLB` tensors. Offsets
//! are relative to the first byte after the newline.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    first: Tensor,
    second: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor>,
    moments: BTreeMap<String, Moments>,
    steps: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        self.moments.remove(&name);
        self.params.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Number of optimizer steps taken so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Record every parameter on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape, requires_grad: bool) -> Bound<'t> {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), requires_grad)))
                .collect(),
        }
    }

    /// One Adam step. Parameters without a gradient entry are left alone.
    pub fn adam_step(
        &mut self,
        grads: &BTreeMap<String, Tensor>,
        config: &AdamConfig,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = self
                .params
                .get(name)
                .ok_or_else(|| Error::ConfigInvalid(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::MissingGradShape {
                    name: name.clone(),
                    grad: g.shape().to_vec(),
                    param: p.shape().to_vec(),
                });
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - config.beta1.powi(t);
        let c2 = 1.0 - config.beta2.powi(t);
        for (name, g) in grads {
            let p = self.params.get_mut(name).expect("checked above");
            let m = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                first: Tensor::zeros(p.shape()),
                second: Tensor::zeros(p.shape()),
            });
            let pd = p.data_mut();
            let md = m.first.data_mut();
            let vd = m.second.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = config.beta1 * md[i] + (1.0 - config.beta1) * gi;
                vd[i] = config.beta2 * vd[i] + (1.0 - config.beta2) * gi * gi;
                let m_hat = md[i] / c1;
                let v_hat = vd[i] / c2;
                pd[i] -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut index = BTreeMap::new();
        let mut body = Vec::new();
        for (name, t) in &self.params {
            index.insert(name.clone(), body.len() as u64);
            t.write_to(&mut body).expect("writing to a Vec cannot fail");
        }
        let mut out = serde_json::to_vec(&index).expect("string keys always serialize");
        out.push(b'\n');
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("checkpoint has no index line".into()))?;
        let index: BTreeMap<String, u64> = serde_json::from_slice(&bytes[..split])?;
        let body = &bytes[split + 1..];
        let mut params = BTreeMap::new();
        for (name, offset) in index {
            let mut slice = body
                .get(offset as usize..)
                .ok_or_else(|| Error::Format(format!("offset of `{name}` past end of file")))?;
            params.insert(name, Tensor::read_from(&mut slice)?);
        }
        Ok(Self {
            params,
            ..Self::default()
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::atomic_write(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Parameters of a [`ParamSet`] recorded as leaves on one tape.
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Var<'t> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    /// Pull the gradient of every bound parameter out of `grads`.
    pub fn collect(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(k, &v)| grads.take(v).map(|g| (k.clone(), g)))
            .collect()
    }
}
