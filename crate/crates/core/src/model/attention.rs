//! Single-head scaled dot-product attention with adapter-capable projections.

use std::sync::Arc;

use crate::adapters::Adapter;
use crate::error::{Error, Result};
use crate::quant::{DequantOnTheFly, QuantizedTensor};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Additive score for masked (future) positions.
const MASKED: f64 = -1e9;

/// A base weight: either a dense parameter or a frozen quantized tensor that
/// is dequantized on use.
#[derive(Debug, Clone)]
pub enum BaseWeight {
    Dense(ParamId),
    Quantized(Arc<QuantizedTensor>),
}

impl BaseWeight {
    pub fn shape(&self, store: &ParamStore) -> (usize, usize) {
        match self {
            BaseWeight::Dense(id) => store.get(*id).shape(),
            BaseWeight::Quantized(q) => q.shape(),
        }
    }

    /// Full-precision value (dequantized if needed).
    pub fn materialize(&self, store: &ParamStore) -> Result<Tensor> {
        match self {
            BaseWeight::Dense(id) => Ok(store.get(*id).clone()),
            BaseWeight::Quantized(q) => q.dequantize(),
        }
    }

    /// The weight as a tape leaf, for lookups that are not a right-multiply.
    pub(crate) fn leaf(&self, tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        match self {
            BaseWeight::Dense(id) => Ok(tape.param(store, *id)),
            BaseWeight::Quantized(q) => Ok(tape.constant(q.dequantize()?)),
        }
    }

    /// `x · W`.
    pub(crate) fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            BaseWeight::Dense(id) => {
                let w = tape.param(store, *id);
                tape.matmul(x, w)
            }
            BaseWeight::Quantized(q) => tape.frozen_matmul(x, Arc::new(DequantOnTheFly(q.clone()))),
        }
    }
}

/// `x · W (+ adapter delta)`.
#[derive(Debug, Clone)]
pub struct Projection {
    pub name: String,
    pub base: BaseWeight,
    pub adapter: Option<Adapter>,
}

impl Projection {
    pub(crate) fn dense(name: String, id: ParamId) -> Self {
        Self {
            name,
            base: BaseWeight::Dense(id),
            adapter: None,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let base = self.base.apply(tape, store, x)?;
        match &self.adapter {
            Some(a) => {
                let delta = a.forward_delta(tape, store, x)?;
                tape.add(base, delta)
            }
            None => Ok(base),
        }
    }
}

/// Which attention projection an adapter targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Target {
    #[serde(rename = "W_Q", alias = "q")]
    Query,
    #[serde(rename = "W_K", alias = "k")]
    Key,
    #[serde(rename = "W_V", alias = "v")]
    Value,
}

impl Target {
    pub const ALL: [Target; 3] = [Target::Query, Target::Key, Target::Value];

    fn index(self) -> usize {
        self as usize
    }
}

impl std::str::FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "w_q" | "wq" | "q" | "query" => Ok(Target::Query),
            "w_k" | "wk" | "k" | "key" => Ok(Target::Key),
            "w_v" | "wv" | "v" | "value" => Ok(Target::Value),
            _ => Err(Error::Config(format!("unknown adapter target '{s}' (expected W_Q, W_K or W_V)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttentionLayer {
    /// `W_Q`, `W_K`, `W_V`, each `d_model × d_k`.
    pub projections: [Projection; 3],
    pub d_k: usize,
}

impl AttentionLayer {
    pub fn projection(&self, t: Target) -> &Projection {
        &self.projections[t.index()]
    }

    pub fn projection_mut(&mut self, t: Target) -> &mut Projection {
        &mut self.projections[t.index()]
    }

    /// `softmax(Q Kᵀ / √d_k + M) V` with `Q` from `xq` and `K`, `V` from `xkv`.
    /// `causal` masks keys after each query position. Output is
    /// `positions × d_k`.
    pub fn attend(&self, tape: &mut Tape, store: &ParamStore, xq: Var, xkv: Var, causal: bool) -> Result<Var> {
        let weights = self.weights(tape, store, xq, xkv, causal)?;
        let v = self.projections[2].forward(tape, store, xkv)?;
        tape.matmul(weights, v)
    }

    /// Attention weight matrix (`queries × keys`); each row sums to 1.
    pub fn weights(&self, tape: &mut Tape, store: &ParamStore, xq: Var, xkv: Var, causal: bool) -> Result<Var> {
        let q = self.projections[0].forward(tape, store, xq)?;
        let k = self.projections[1].forward(tape, store, xkv)?;
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt)?;
        let mut scores = tape.scale(scores, 1.0 / (self.d_k as f64).sqrt());
        if causal {
            let (n, m) = tape.shape(scores);
            let mut mask = Tensor::zeros(n, m);
            for i in 0..n {
                for j in i + 1..m {
                    mask.set(i, j, MASKED);
                }
            }
            let mask = tape.constant(mask);
            scores = tape.add(scores, mask)?;
        }
        Ok(tape.softmax_rows(scores))
    }
}

/// Unmasked self-attention over the rows of `x`.
pub fn self_attention(tape: &mut Tape, store: &ParamStore, x: Var, layer: &AttentionLayer) -> Result<Var> {
    layer.attend(tape, store, x, x, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(store: &mut ParamStore, wq: Tensor, wk: Tensor, wv: Tensor) -> AttentionLayer {
        let d_k = wq.cols();
        let ids = [wq, wk, wv].map(|w| store.insert("w", w, false));
        AttentionLayer {
            projections: ids.map(|id| Projection::dense("w".into(), id)),
            d_k,
        }
    }

    #[test]
    fn single_position_returns_value_row() {
        let mut store = ParamStore::new();
        let l = layer(
            &mut store,
            Tensor::filled(2, 2, 0.3),
            Tensor::filled(2, 2, -0.7),
            Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap(),
        );
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[&[1.0, -1.0]]).unwrap());
        let out = self_attention(&mut tape, &store, x, &l).unwrap();
        assert_eq!(tape.value(out).data(), &[-2.0, -2.0]);
    }

    #[test]
    fn zero_value_projection_gives_zero() {
        let mut store = ParamStore::new();
        let l = layer(
            &mut store,
            Tensor::filled(3, 2, 0.5),
            Tensor::filled(3, 2, 0.1),
            Tensor::zeros(3, 2),
        );
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[0.0, 1.0, 0.0]]).unwrap());
        let out = self_attention(&mut tape, &store, x, &l).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_position_hand_example() {
        // d_model = d_k = 1 and all weights 1: Q = K = V = x
        let mut store = ParamStore::new();
        let one = || Tensor::filled(1, 1, 1.0);
        let l = layer(&mut store, one(), one(), one());
        let (x1, x2) = (0.5, 2.0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(2, 1, vec![x1, x2]).unwrap());
        let out = self_attention(&mut tape, &store, x, &l).unwrap();
        let row = |a: f64| {
            let (s1, s2) = (a * x1, a * x2);
            let (e1, e2) = (s1.exp(), s2.exp());
            (e1 * x1 + e2 * x2) / (e1 + e2)
        };
        let got = tape.value(out).data();
        assert!((got[0] - row(x1)).abs() < 1e-15);
        assert!((got[1] - row(x2)).abs() < 1e-15);
    }

    #[test]
    fn causal_mask_blocks_future() {
        let mut store = ParamStore::new();
        let l = layer(
            &mut store,
            Tensor::filled(2, 2, 0.4),
            Tensor::filled(2, 2, 0.2),
            Tensor::identity(2),
        );
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]).unwrap());
        let w = l.weights(&mut tape, &store, x, x, true).unwrap();
        let w = tape.value(w);
        assert_eq!(w.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(w.get(1, 2), 0.0);
        for r in 0..3 {
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut store = ParamStore::new();
        let l = layer(&mut store, Tensor::zeros(3, 2), Tensor::zeros(3, 2), Tensor::zeros(3, 2));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(2, 4));
        assert!(matches!(
            self_attention(&mut tape, &store, x, &l),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn target_names() {
        assert_eq!("W_Q".parse::<Target>().unwrap(), Target::Query);
        assert_eq!("v".parse::<Target>().unwrap(), Target::Value);
        assert!(matches!("W_O".parse::<Target>(), Err(Error::Config(_))));
    }
}
