//! Encoder–decoder transformer for the synthetic tasks.
//!
//! Blocks have no layer norm and no biases. An encoder block is
//! `h += attn(h)·W_O; h += tanh(h·W_ff)`; a decoder block adds a causal
//! self-attention and a cross-attention over the encoder output, each with
//! its own `W_O`. Positions are fixed sinusoids added to a shared token
//! embedding.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::{AttentionLayer, BaseWeight, Projection, Target};
use super::task::{Example, BOS, EOS};
use crate::adapters::{check_rank, AdaLoraAdapter, Adapter, BudgetSchedule, LoraAdapter};
use crate::error::{Error, Result};
use crate::quant::{quantize_with, QuantSpec};
use crate::tensor::{ParamStore, Precision, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Longest source sequence; decoding stops after `max_len + 1` tokens.
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            d_model: 32,
            d_k: 32,
            encoder_layers: 2,
            decoder_layers: 2,
            max_len: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 || self.d_model == 0 || self.d_k == 0 || self.max_len == 0 {
            return Err(Error::Config(format!("degenerate model dimensions {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum AdapterKind {
    Lora,
    #[serde(rename = "adalora")]
    AdaLora { gamma: f64, schedule: BudgetSchedule },
}

#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub attn: AttentionLayer,
    pub wo: Projection,
    pub ff: Projection,
}

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub self_attn: AttentionLayer,
    pub self_wo: Projection,
    pub cross_attn: AttentionLayer,
    pub cross_wo: Projection,
    pub ff: Projection,
}

/// Trainable vs frozen element counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub trainable: usize,
    pub frozen: usize,
}

#[derive(Debug, Clone)]
pub struct ToyTransformer {
    config: ModelConfig,
    pub params: ParamStore,
    pub compute_precision: Precision,
    embedding: Projection,
    encoder: Vec<EncoderBlock>,
    decoder: Vec<DecoderBlock>,
    output: Projection,
}

struct Init<'a, R: Rng + ?Sized> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
}

impl<R: Rng + ?Sized> Init<'_, R> {
    fn dense(&mut self, name: String, rows: usize, cols: usize, std: f64) -> Projection {
        let id = self.store.insert(name.clone(), Tensor::randn(rows, cols, std, self.rng), true);
        Projection::dense(name, id)
    }

    fn attention(&mut self, prefix: &str, d_model: usize, d_k: usize) -> AttentionLayer {
        let std = 1.0 / (d_model as f64).sqrt();
        let projections = ["wq", "wk", "wv"].map(|p| self.dense(format!("{prefix}.{p}"), d_model, d_k, std));
        AttentionLayer { projections, d_k }
    }
}

/// `pe[p][2i] = sin(p / 10000^(2i/d))`, `pe[p][2i+1] = cos(…)`.
pub fn positional_encoding(positions: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(positions, d);
    for p in 0..positions {
        for c in 0..d {
            let i = (c / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * i / d as f64);
            t.set(p, c, if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

impl ToyTransformer {
    /// Fresh dense model with every weight trainable.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (v, d, dk) = (config.vocab_size, config.d_model, config.d_k);
        let mut store = ParamStore::new();
        let mut init = Init { store: &mut store, rng };
        let out_std = 1.0 / (dk as f64).sqrt();
        let ff_std = 1.0 / (d as f64).sqrt();

        let embedding = init.dense("embed".into(), v, d, 0.5);
        let encoder = (0..config.encoder_layers)
            .map(|l| EncoderBlock {
                attn: init.attention(&format!("enc.{l}.self"), d, dk),
                wo: init.dense(format!("enc.{l}.self.wo"), dk, d, out_std),
                ff: init.dense(format!("enc.{l}.ff"), d, d, ff_std),
            })
            .collect();
        let decoder = (0..config.decoder_layers)
            .map(|l| DecoderBlock {
                self_attn: init.attention(&format!("dec.{l}.self"), d, dk),
                self_wo: init.dense(format!("dec.{l}.self.wo"), dk, d, out_std),
                cross_attn: init.attention(&format!("dec.{l}.cross"), d, dk),
                cross_wo: init.dense(format!("dec.{l}.cross.wo"), dk, d, out_std),
                ff: init.dense(format!("dec.{l}.ff"), d, d, ff_std),
            })
            .collect();
        let output = init.dense("out".into(), d, v, 0.1 * ff_std);
        Ok(Self {
            config,
            params: store,
            compute_precision: Precision::F64,
            embedding,
            encoder,
            decoder,
            output,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &[EncoderBlock] {
        &self.encoder
    }

    pub fn decoder(&self) -> &[DecoderBlock] {
        &self.decoder
    }

    /// Every projection (base weight plus optional adapter), in a fixed order.
    pub fn projections(&self) -> Vec<&Projection> {
        let mut out = vec![&self.embedding];
        for b in &self.encoder {
            out.extend(b.attn.projections.iter());
            out.extend([&b.wo, &b.ff]);
        }
        for b in &self.decoder {
            out.extend(b.self_attn.projections.iter());
            out.push(&b.self_wo);
            out.extend(b.cross_attn.projections.iter());
            out.extend([&b.cross_wo, &b.ff]);
        }
        out.push(&self.output);
        out
    }

    fn projections_mut(&mut self) -> Vec<&mut Projection> {
        let mut out = vec![&mut self.embedding];
        for b in &mut self.encoder {
            out.extend(b.attn.projections.iter_mut());
            out.extend([&mut b.wo, &mut b.ff]);
        }
        for b in &mut self.decoder {
            out.extend(b.self_attn.projections.iter_mut());
            out.push(&mut b.self_wo);
            out.extend(b.cross_attn.projections.iter_mut());
            out.extend([&mut b.cross_wo, &mut b.ff]);
        }
        out.push(&mut self.output);
        out
    }

    pub(crate) fn projection_by_name_mut(&mut self, name: &str) -> Option<&mut Projection> {
        self.projections_mut().into_iter().find(|p| p.name == name)
    }

    /// Total element count of all base weights, dense or quantized.
    pub fn base_element_count(&self) -> usize {
        self.projections()
            .iter()
            .map(|p| {
                let (r, c) = p.base.shape(&self.params);
                r * c
            })
            .sum()
    }

    pub fn attention_layers(&self) -> Vec<&AttentionLayer> {
        let mut out: Vec<&AttentionLayer> = self.encoder.iter().map(|b| &b.attn).collect();
        for b in &self.decoder {
            out.extend([&b.self_attn, &b.cross_attn]);
        }
        out
    }

    fn attention_layers_mut(&mut self) -> Vec<&mut AttentionLayer> {
        let mut out: Vec<&mut AttentionLayer> = self.encoder.iter_mut().map(|b| &mut b.attn).collect();
        for b in &mut self.decoder {
            out.extend([&mut b.self_attn, &mut b.cross_attn]);
        }
        out
    }

    pub fn adapters(&self) -> impl Iterator<Item = (&str, &Adapter)> {
        self.projections()
            .into_iter()
            .filter_map(|p| p.adapter.as_ref().map(|a| (p.name.as_str(), a)))
    }

    pub fn adalora_adapters_mut(&mut self) -> Vec<&mut AdaLoraAdapter> {
        self.projections_mut()
            .into_iter()
            .filter_map(|p| p.adapter.as_mut().and_then(Adapter::as_adalora_mut))
            .collect()
    }

    pub fn has_adapters(&self) -> bool {
        self.adapters().next().is_some()
    }

    /// Marks every dense base weight as frozen.
    pub fn freeze_base(&mut self) {
        let ids: Vec<_> = self
            .projections()
            .into_iter()
            .filter_map(|p| match p.base {
                BaseWeight::Dense(id) => Some(id),
                BaseWeight::Quantized(_) => None,
            })
            .collect();
        for id in ids {
            self.params.set_trainable(id, false);
        }
    }

    /// Attaches fresh adapters to the selected projections of every attention
    /// module and freezes all base weights. Outputs are unchanged at attach
    /// time because every adapter starts with a zero factor.
    pub fn attach_adapters<R: Rng + ?Sized>(
        &mut self,
        kind: &AdapterKind,
        rank: usize,
        targets: &[Target],
        rng: &mut R,
    ) -> Result<()> {
        let (d, dk) = (self.config.d_model, self.config.d_k);
        check_rank(rank, d, dk)?;
        if targets.is_empty() {
            return Err(Error::Config("no adapter targets given".into()));
        }
        let mut targets = targets.to_vec();
        targets.sort();
        targets.dedup();
        if self.has_adapters() {
            return Err(Error::Config("adapters are already attached".into()));
        }
        self.freeze_base();
        let mut store = std::mem::take(&mut self.params);
        let result = (|| {
            for layer in self.attention_layers_mut() {
                for &t in &targets {
                    let proj = layer.projection_mut(t);
                    let adapter = match kind {
                        AdapterKind::Lora => Adapter::Lora(LoraAdapter::new(&mut store, &proj.name, d, dk, rank, rng)?),
                        AdapterKind::AdaLora { gamma, schedule } => Adapter::AdaLora(AdaLoraAdapter::new(
                            &mut store,
                            &proj.name,
                            d,
                            dk,
                            rank,
                            *gamma,
                            *schedule,
                            rng,
                        )?),
                    };
                    proj.adapter = Some(adapter);
                }
            }
            Ok(())
        })();
        self.params = store;
        result
    }

    /// Replaces every dense base weight by its quantized form. The dense
    /// values are dropped from the parameter store.
    pub fn quantize_base(&mut self, spec: &QuantSpec) -> Result<()> {
        spec.validate()?;
        let mut store = std::mem::take(&mut self.params);
        let result = (|| {
            for proj in self.projections_mut() {
                if let BaseWeight::Dense(id) = proj.base {
                    let q = quantize_with(store.get(id), spec)?;
                    store.take(id);
                    proj.base = BaseWeight::Quantized(Arc::new(q));
                }
            }
            Ok(())
        })();
        self.params = store;
        result
    }

    /// Counts by walking the model: dense bases by their `requires_grad`
    /// flag, quantized bases as frozen, adapter factors as trainable.
    pub fn parameter_counts(&self) -> ParamCounts {
        let mut counts = ParamCounts { trainable: 0, frozen: 0 };
        for p in self.projections() {
            match &p.base {
                BaseWeight::Dense(id) => {
                    let t = self.params.get(*id);
                    if t.requires_grad() {
                        counts.trainable += t.len();
                    } else {
                        counts.frozen += t.len();
                    }
                }
                BaseWeight::Quantized(q) => {
                    let (r, c) = q.shape();
                    counts.frozen += r * c;
                }
            }
            if let Some(a) = &p.adapter {
                counts.trainable += a.trainable_count();
            }
        }
        counts
    }

    /// Sum of `γ·(‖PᵀP − I‖² + ‖QQᵀ − I‖²)` over AdaLoRA adapters, recorded.
    pub fn orthogonality_penalty(&self, tape: &mut Tape) -> Result<Option<Var>> {
        let mut total: Option<Var> = None;
        for (_, a) in self.adapters() {
            if let Some(a) = a.as_adalora() {
                let p = a.orthogonality_penalty(tape, &self.params)?;
                total = Some(match total {
                    Some(t) => tape.add(t, p)?,
                    None => p,
                });
            }
        }
        Ok(total)
    }

    pub fn orthogonality_penalty_value(&self) -> f64 {
        self.adapters()
            .filter_map(|(_, a)| a.as_adalora())
            .map(|a| a.orthogonality_penalty_value(&self.params))
            .sum()
    }

    fn embed(&self, tape: &mut Tape, table: Var, ids: &[usize]) -> Result<Var> {
        let tok = tape.gather_rows(table, ids)?;
        let pos = tape.constant(positional_encoding(ids.len(), self.config.d_model));
        tape.add(tok, pos)
    }

    fn residual(tape: &mut Tape, store: &ParamStore, h: Var, attn: Var, wo: &Projection) -> Result<Var> {
        let o = wo.forward(tape, store, attn)?;
        tape.add(h, o)
    }

    fn feed_forward(tape: &mut Tape, store: &ParamStore, h: Var, ff: &Projection) -> Result<Var> {
        let z = ff.forward(tape, store, h)?;
        let z = tape.tanh(z);
        tape.add(h, z)
    }

    /// Encoder output, `|src| × d_model`.
    pub fn encode(&self, tape: &mut Tape, table: Var, src: &[usize]) -> Result<Var> {
        let store = &self.params;
        let mut h = self.embed(tape, table, src)?;
        for b in &self.encoder {
            let a = b.attn.attend(tape, store, h, h, false)?;
            h = Self::residual(tape, store, h, a, &b.wo)?;
            h = Self::feed_forward(tape, store, h, &b.ff)?;
        }
        Ok(h)
    }

    /// Next-token logits, `|dec_in| × V`.
    pub fn decode(&self, tape: &mut Tape, table: Var, memory: Var, dec_in: &[usize]) -> Result<Var> {
        let store = &self.params;
        let mut g = self.embed(tape, table, dec_in)?;
        for b in &self.decoder {
            let a = b.self_attn.attend(tape, store, g, g, true)?;
            g = Self::residual(tape, store, g, a, &b.self_wo)?;
            let c = b.cross_attn.attend(tape, store, g, memory, false)?;
            g = Self::residual(tape, store, g, c, &b.cross_wo)?;
            g = Self::feed_forward(tape, store, g, &b.ff)?;
        }
        self.output.forward(tape, store, g)
    }

    /// The embedding table as a tape leaf; share it between encode and decode.
    pub fn embedding_leaf(&self, tape: &mut Tape) -> Result<Var> {
        self.embedding.base.leaf(tape, &self.params)
    }

    pub fn logits(&self, tape: &mut Tape, src: &[usize], dec_in: &[usize]) -> Result<Var> {
        let table = self.embedding_leaf(tape)?;
        let memory = self.encode(tape, table, src)?;
        self.decode(tape, table, memory, dec_in)
    }

    /// Teacher-forced logits as a plain tensor.
    pub fn forward(&self, src: &[usize], dec_in: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::with_precision(self.compute_precision);
        let l = self.logits(&mut tape, src, dec_in)?;
        Ok(tape.value(l).clone())
    }

    /// Mean cross-entropy of `[target, EOS]` given `[BOS, target]`.
    pub fn example_loss(&self, tape: &mut Tape, ex: &Example) -> Result<Var> {
        let mut dec_in = Vec::with_capacity(ex.target.len() + 1);
        dec_in.push(BOS);
        dec_in.extend_from_slice(&ex.target);
        let mut targets = ex.target.clone();
        targets.push(EOS);
        let logits = self.logits(tape, &ex.source, &dec_in)?;
        tape.cross_entropy(logits, &targets)
    }

    /// Argmax decoding (ties to the lowest id) until `EOS` or
    /// `max_len + 1` tokens. The returned sequence includes the `EOS` if one
    /// was produced. An empty source decodes to `[EOS]`.
    pub fn greedy_decode(&self, src: &[usize]) -> Result<Vec<usize>> {
        if src.is_empty() {
            return Ok(vec![EOS]);
        }
        let mut tape = Tape::with_precision(self.compute_precision);
        let table = self.embedding_leaf(&mut tape)?;
        let memory = self.encode(&mut tape, table, src)?;
        let mut dec_in = vec![BOS];
        let mut out = Vec::new();
        for _ in 0..=self.config.max_len {
            let logits = self.decode(&mut tape, table, memory, &dec_in)?;
            let logits = tape.value(logits);
            let last = logits.row(logits.rows() - 1);
            let mut best = 0;
            for (i, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = i;
                }
            }
            out.push(best);
            if best == EOS {
                break;
            }
            dec_in.push(best);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 10,
            d_model: 8,
            d_k: 6,
            encoder_layers: 1,
            decoder_layers: 1,
            max_len: 5,
        }
    }

    #[test]
    fn logits_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = ToyTransformer::new(small(), &mut rng).unwrap();
        let l = m.forward(&[2, 3, 4], &[BOS, 2]).unwrap();
        assert_eq!(l.shape(), (2, 10));
    }

    #[test]
    fn attach_preserves_outputs_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = ToyTransformer::new(small(), &mut rng).unwrap();
        let before = m.forward(&[2, 3, 4, 5], &[BOS, 7, 8]).unwrap();
        let schedule = BudgetSchedule::new(2, 1, 10, 2).unwrap();
        m.attach_adapters(
            &AdapterKind::AdaLora { gamma: 0.1, schedule },
            2,
            &Target::ALL,
            &mut rng,
        )
        .unwrap();
        assert_eq!(m.forward(&[2, 3, 4, 5], &[BOS, 7, 8]).unwrap().data(), before.data());
    }

    #[test]
    fn trainable_count_formula() {
        let cfg = small();
        for r in 1..=6 {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let mut m = ToyTransformer::new(cfg.clone(), &mut rng).unwrap();
            let total = m.parameter_counts().trainable;
            m.attach_adapters(&AdapterKind::Lora, r, &[Target::Query, Target::Value], &mut rng)
                .unwrap();
            let modules = cfg.encoder_layers + 2 * cfg.decoder_layers;
            let counts = m.parameter_counts();
            assert_eq!(counts.trainable, 2 * modules * r * (cfg.d_model + cfg.d_k));
            assert_eq!(counts.trainable, m.params.trainable_count());
            assert_eq!(counts.frozen, total);
        }
    }

    #[test]
    fn rank_above_dk_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = ToyTransformer::new(small(), &mut rng).unwrap();
        let err = m.attach_adapters(&AdapterKind::Lora, 7, &Target::ALL, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        assert!(!m.has_adapters());
    }

    #[test]
    fn empty_source_decodes_to_eos() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = ToyTransformer::new(small(), &mut rng).unwrap();
        assert_eq!(m.greedy_decode(&[]).unwrap(), vec![EOS]);
    }

    #[test]
    fn decode_is_deterministic_and_in_vocab() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            ToyTransformer::new(small(), &mut rng).unwrap()
        };
        let a = build().greedy_decode(&[2, 3, 9]).unwrap();
        assert_eq!(a, build().greedy_decode(&[2, 3, 9]).unwrap());
        assert!(a.len() <= 6);
        assert!(a.iter().all(|&t| t < 10));
    }

    #[test]
    fn quantized_base_counts_as_frozen() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut m = ToyTransformer::new(small(), &mut rng).unwrap();
        let total = m.parameter_counts().trainable;
        m.quantize_base(&QuantSpec::nf4_default()).unwrap();
        m.attach_adapters(&AdapterKind::Lora, 2, &Target::ALL, &mut rng).unwrap();
        let c = m.parameter_counts();
        assert_eq!(c.frozen, total);
        assert_eq!(c.trainable, m.params.trainable_count());
        assert_eq!(m.params.frozen_count(), 0);
    }
}
