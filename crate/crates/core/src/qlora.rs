//! Linear layer over a frozen quantized weight with a LoRA adapter:
//! `Y = X·dequant(W_q) + X·A·B`.
//!
//! The base weight is dequantized inside the forward op and again inside the
//! backward op (to propagate `∂L/∂X`); it is never a gradient target and no
//! full-precision copy outlives the op unless the cache flag is set.

use std::sync::{Arc, OnceLock};

use rand::Rng;

use crate::adapters::LoraAdapter;
use crate::error::{Error, Result};
use crate::quant::{quantize_with, DequantOnTheFly, QuantSpec, QuantizedTensor};
use crate::tensor::{ParamStore, Precision, Tape, Tensor, Var};

#[derive(Debug)]
pub struct QloraLinear {
    weight: Arc<QuantizedTensor>,
    pub adapter: LoraAdapter,
    pub compute_precision: Precision,
    cache_dequantized: bool,
    cache: OnceLock<Tensor>,
}

impl QloraLinear {
    /// Quantizes `w` under `spec` and attaches a fresh rank-`rank` adapter.
    pub fn from_weight<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        w: &Tensor,
        spec: &QuantSpec,
        rank: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let q = quantize_with(w, spec)?;
        let (n, k) = w.shape();
        let adapter = LoraAdapter::new(store, name, n, k, rank, rng)?;
        Self::new(Arc::new(q), adapter)
    }

    pub fn new(weight: Arc<QuantizedTensor>, adapter: LoraAdapter) -> Result<Self> {
        if weight.shape() != adapter.shape() {
            return Err(Error::Dimension {
                op: "qlora layer",
                left: weight.shape(),
                right: adapter.shape(),
            });
        }
        Ok(Self {
            weight,
            adapter,
            compute_precision: Precision::F32,
            cache_dequantized: false,
            cache: OnceLock::new(),
        })
    }

    /// Keep one dequantized copy of the base weight across calls.
    pub fn with_cache(mut self, enabled: bool) -> Self {
        self.cache_dequantized = enabled;
        self
    }

    pub fn weight(&self) -> &Arc<QuantizedTensor> {
        &self.weight
    }

    /// A fresh tape at this layer's compute precision.
    pub fn tape(&self) -> Tape {
        Tape::with_precision(self.compute_precision)
    }

    pub fn trainable_count(&self) -> usize {
        self.adapter.trainable_count()
    }
}

pub fn qlora_forward(tape: &mut Tape, store: &ParamStore, x: Var, layer: &QloraLinear) -> Result<Var> {
    let base = if layer.cache_dequantized {
        let w = match layer.cache.get() {
            Some(w) => w.clone(),
            None => {
                let w = layer.weight.dequantize()?;
                layer.cache.get_or_init(|| w).clone()
            }
        };
        let wv = tape.constant(w);
        tape.matmul(x, wv)?
    } else {
        tape.frozen_matmul(x, Arc::new(DequantOnTheFly(layer.weight.clone())))?
    };
    let delta = layer.adapter.forward_delta(tape, store, x)?;
    tape.add(base, delta)
}

/// Back-propagates `loss`; only the adapter factors receive gradients.
pub fn qlora_backward(tape: &mut Tape, loss: Var, store: &mut ParamStore) -> Result<()> {
    tape.backward(loss, store)
}
