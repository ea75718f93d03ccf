use serde::{Deserialize, Serialize};

use super::dense::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors. Insertion order is stable and is the order used
/// for checkpoints and traversal counts.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_requires_grad(trainable));
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        let t = &mut self.tensors[id.0];
        t.set_requires_grad(trainable);
        if !trainable {
            t.clear_grad();
        }
    }

    /// Element count of all tensors with `requires_grad` set.
    pub fn trainable_count(&self) -> usize {
        self.tensors.iter().filter(|t| t.requires_grad()).map(Tensor::len).sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.tensors.iter().filter(|t| !t.requires_grad()).map(Tensor::len).sum()
    }

    /// Moves the tensor out, leaving an empty frozen placeholder so ids stay
    /// stable.
    pub(crate) fn take(&mut self, id: ParamId) -> Tensor {
        std::mem::replace(&mut self.tensors[id.0], Tensor::zeros(0, 0))
    }

    /// Global L2 norm of all populated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(Tensor::grad)
            .flatten()
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.clear_grad();
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) -> Result<()> {
        let t = &mut self.tensors[id.0];
        match t.take_grad() {
            Some(mut existing) => {
                for (e, x) in existing.iter_mut().zip(g) {
                    *e += x;
                }
                t.set_grad(existing)
            }
            None => t.set_grad(g.to_vec()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub steps: usize,
    /// Rescale the global gradient to at most this L2 norm before the update.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
}

impl SgdConfig {
    pub fn new(learning_rate: f64, steps: usize) -> Result<Self> {
        let cfg = Self {
            learning_rate,
            steps,
            clip_norm: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// A zero rate is accepted as the degenerate "frozen" run.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be a finite non-negative number, got {}",
                self.learning_rate
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        Ok(())
    }

    pub fn with_clip_norm(mut self, max: f64) -> Result<Self> {
        self.clip_norm = Some(max);
        self.validate()?;
        Ok(self)
    }
}

/// `p ← p − η·∇p` for every trainable parameter, then clears the gradients.
/// With `clip_norm = Some(c)` the gradient is first scaled by
/// `min(1, c / ‖∇‖₂)`, the norm taken over all trainable parameters.
pub fn sgd_step(store: &mut ParamStore, cfg: &SgdConfig) -> Result<()> {
    if let Some(id) = store
        .ids()
        .find(|&id| store.get(id).requires_grad() && store.get(id).grad().is_none())
    {
        return Err(Error::UninitializedGradient(store.name(id).to_string()));
    }
    let lr = cfg.learning_rate;
    let mut factor = 1.0;
    if let Some(max) = cfg.clip_norm {
        let norm = store.grad_norm();
        if norm > max {
            factor = max / norm;
        }
    }
    for t in store.tensors.iter_mut().filter(|t| t.requires_grad()) {
        let g = t.take_grad().expect("checked above");
        for (p, gi) in t.data_mut().iter_mut().zip(&g) {
            *p -= lr * (factor * gi);
        }
    }
    Ok(())
}
