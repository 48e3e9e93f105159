//! Named parameter storage and the momentum-SGD update.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MOMENTUM_PREFIX: &str = "opt.momentum.";

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub momentum: Tensor,
}

/// Hierarchically named parameters (`student.backbone.c1.w`, ...) kept in
/// sorted order so that iteration and serialization are deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::invalid("param_store", format!("duplicate parameter `{name}`")));
        }
        let momentum = Tensor::zeros(value.shape());
        self.entries.insert(
            name.to_string(),
            Param {
                value,
                grad: None,
                momentum,
            },
        );
        Ok(())
    }

    /// He-uniform initialization: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    pub fn insert_he_uniform<R: Rng>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) -> Result<()> {
        self.insert_uniform(name, shape, (6.0 / fan_in as f64).sqrt(), rng)
    }

    /// `U(-bound, bound)` initialization.
    pub fn insert_uniform<R: Rng>(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut R) -> Result<()> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    /// Adds `grad` into the entry's gradient buffer.
    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if p.value.shape() != grad.shape() {
            return Err(Error::shape("accumulate_grad", p.value.shape(), grad.shape()));
        }
        match &mut p.grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(grad.data()) {
                    *a += b;
                }
            }
            None => p.grad = Some(grad.clone()),
        }
        Ok(())
    }

    /// Global L2 norm of the gradients of entries passing `keep`.
    pub fn grad_norm(&self, keep: impl Fn(&str) -> bool) -> f64 {
        self.entries
            .iter()
            .filter(|(n, _)| keep(n))
            .filter_map(|(_, p)| p.grad.as_ref())
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Multiplies the gradients of entries passing `keep` by `factor`.
    pub fn scale_grads(&mut self, factor: f64, keep: impl Fn(&str) -> bool) {
        for (name, p) in self.entries.iter_mut() {
            if let Some(g) = p.grad.as_mut().filter(|_| keep(name)) {
                g.data_mut().iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }

    /// One momentum-SGD step over every entry not selected by `frozen`:
    ///
    /// ```text
    /// v <- momentum * v + (grad + weight_decay * w)
    /// w <- w - lr * v
    /// ```
    ///
    /// Frozen entries keep both value and momentum buffer. All gradients are
    /// cleared afterwards.
    pub fn sgd_update(&mut self, cfg: &SgdConfig, frozen: impl Fn(&str) -> bool) -> Result<()> {
        for (name, p) in &self.entries {
            if !frozen(name) && p.grad.is_none() {
                return Err(Error::MissingGradient(name.clone()));
            }
        }
        for (name, p) in self.entries.iter_mut() {
            if frozen(name) {
                continue;
            }
            let g = p.grad.as_ref().unwrap();
            for ((w, v), g) in p.value.data_mut().iter_mut().zip(p.momentum.data_mut()).zip(g.data()) {
                *v = cfg.momentum * *v + (g + cfg.weight_decay * *w);
                *w -= cfg.lr * *v;
            }
        }
        self.zero_grads();
        Ok(())
    }

    /// Parameter values whose names pass `keep`, in sorted order.
    pub fn records(&self, keep: impl Fn(&str) -> bool) -> Vec<(&str, &Tensor)> {
        self.entries
            .iter()
            .filter(|(k, _)| keep(k))
            .map(|(k, p)| (k.as_str(), &p.value))
            .collect()
    }

    /// Values plus momentum buffers (`opt.momentum.<name>`).
    pub fn full_state(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self.entries.iter().map(|(k, p)| (k.clone(), p.value.clone())).collect();
        out.extend(
            self.entries
                .iter()
                .map(|(k, p)| (format!("{MOMENTUM_PREFIX}{k}"), p.momentum.clone())),
        );
        out
    }

    /// Rebuilds a store from checkpoint records. Momentum records, when
    /// present, are attached to their parameter; other `opt.*` records are
    /// ignored.
    pub fn from_records(records: Vec<(String, Tensor)>) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut momenta = Vec::new();
        for (name, t) in records {
            if let Some(target) = name.strip_prefix(MOMENTUM_PREFIX) {
                momenta.push((target.to_string(), t));
            } else if !name.starts_with("opt.") {
                store.insert(&name, t)?;
            }
        }
        for (name, m) in momenta {
            let p = store
                .entries
                .get_mut(&name)
                .ok_or_else(|| Error::Checkpoint(format!("momentum for unknown parameter `{name}`")))?;
            if p.value.shape() != m.shape() {
                return Err(Error::shape("checkpoint momentum", p.value.shape(), m.shape()));
            }
            p.momentum = m;
        }
        Ok(store)
    }
}
