//! Central finite-difference oracle shared by the gradient tests and the
//! acceptance runner.
#![allow(dead_code)]

pub mod oracles;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use peftlab::adapters::{adalora_forward, lora_forward, Adapter, AdaLoraAdapter, BudgetSchedule, LoraAdapter};
use peftlab::model::{
    self_attention, AdapterKind, AttentionLayer, BaseWeight, Example, ModelConfig, Projection, Target, ToyTransformer,
};
use peftlab::qlora::{qlora_forward, QloraLinear};
use peftlab::quant::{quantize_with, DequantOnTheFly, QuantSpec};
use peftlab::tensor::{ParamId, ParamStore, Precision, Tape, Tensor, Var};
use peftlab::Result;

pub const FD_STEP: f64 = 1e-5;
pub const TOL_F64: f64 = 1e-6;
pub const TOL_F32: f64 = 1e-4;

pub trait Objective {
    fn store(&mut self) -> &mut ParamStore;
    fn loss(&self, tape: &mut Tape) -> Result<Var>;
}

type LossFn = Box<dyn Fn(&mut Tape, &ParamStore) -> Result<Var>>;

/// Parameters in a store and a closure that builds a scalar from them.
pub struct Free {
    store: ParamStore,
    f: LossFn,
}

impl Free {
    fn boxed(store: ParamStore, f: impl Fn(&mut Tape, &ParamStore) -> Result<Var> + 'static) -> Box<dyn Objective> {
        Box::new(Self { store, f: Box::new(f) })
    }
}

impl Objective for Free {
    fn store(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn loss(&self, tape: &mut Tape) -> Result<Var> {
        (self.f)(tape, &self.store)
    }
}

/// Model cross-entropy on one example, plus the orthogonality penalty when
/// AdaLoRA adapters are attached.
pub struct ModelLoss {
    pub model: ToyTransformer,
    pub example: Example,
}

impl Objective for ModelLoss {
    fn store(&mut self) -> &mut ParamStore {
        &mut self.model.params
    }
    fn loss(&self, tape: &mut Tape) -> Result<Var> {
        let ce = self.model.example_loss(tape, &self.example)?;
        match self.model.orthogonality_penalty(tape)? {
            Some(p) => tape.add(ce, p),
            None => Ok(ce),
        }
    }
}

fn value(obj: &dyn Objective, precision: Precision) -> f64 {
    let mut tape = Tape::with_precision(precision);
    let l = obj.loss(&mut tape).expect("loss builds");
    tape.value(l).get(0, 0)
}

pub struct GradCheck {
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub elements: usize,
}

/// Analytic gradient on a tape of `precision` against central differences of
/// the 64-bit forward, compared as `‖g − ĝ‖₂ / max(‖g‖₂, ‖ĝ‖₂)`.
pub fn check(obj: &mut dyn Objective, precision: Precision) -> GradCheck {
    let ids: Vec<ParamId> = obj
        .store()
        .iter()
        .filter(|(_, _, t)| t.requires_grad())
        .map(|(id, _, _)| id)
        .collect();
    obj.store().zero_grads();
    let mut tape = Tape::with_precision(precision);
    let l = obj.loss(&mut tape).expect("loss builds");
    tape.backward(l, obj.store()).expect("backward");
    let mut analytic = Vec::new();
    for &id in &ids {
        let t = obj.store().get(id);
        match t.grad() {
            Some(g) => analytic.extend_from_slice(g),
            None => analytic.extend(std::iter::repeat_n(0.0, t.len())),
        }
    }

    let mut numeric = Vec::with_capacity(analytic.len());
    for &id in &ids {
        for i in 0..obj.store().get(id).len() {
            let orig = obj.store().get(id).data()[i];
            obj.store().get_mut(id).data_mut()[i] = orig + FD_STEP;
            let plus = value(obj, Precision::F64);
            obj.store().get_mut(id).data_mut()[i] = orig - FD_STEP;
            let minus = value(obj, Precision::F64);
            obj.store().get_mut(id).data_mut()[i] = orig;
            numeric.push((plus - minus) / (2.0 * FD_STEP));
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    let scale = norm(&analytic).max(norm(&numeric)).max(f64::MIN_POSITIVE);
    GradCheck {
        rel_error: norm(&diff) / scale,
        analytic_norm: norm(&analytic),
        elements: analytic.len(),
    }
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4))
}

fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(rows, cols, 1.0, rng)
}

/// `Σ y ⊙ r` for a fixed random `r`, so every output entry gets its own weight.
fn contract(tape: &mut Tape, y: Var, r: &Tensor) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let p = tape.mul(y, rv)?;
    Ok(tape.sum(p))
}

fn unary(rng: &mut ChaCha8Rng, op: fn(&mut Tape, Var) -> Var, transposed: bool, min_cols: usize) -> Box<dyn Objective> {
    let (n, m, _) = dims(rng);
    let m = m.max(min_cols);
    let mut store = ParamStore::new();
    let a = store.insert("a", randn(n, m, rng), true);
    let r = if transposed { randn(m, n, rng) } else { randn(n, m, rng) };
    Free::boxed(store, move |t, s| {
        let av = t.param(s, a);
        let y = op(t, av);
        contract(t, y, &r)
    })
}

fn binary(rng: &mut ChaCha8Rng, op: fn(&mut Tape, Var, Var) -> Result<Var>) -> Box<dyn Objective> {
    let (n, m, _) = dims(rng);
    let mut store = ParamStore::new();
    let a = store.insert("a", randn(n, m, rng), true);
    let b = store.insert("b", randn(n, m, rng), true);
    let r = randn(n, m, rng);
    Free::boxed(store, move |t, s| {
        let (av, bv) = (t.param(s, a), t.param(s, b));
        let y = op(t, av, bv)?;
        contract(t, y, &r)
    })
}

fn random_spec(rng: &mut ChaCha8Rng) -> QuantSpec {
    let mut spec = match rng.random_range(0..3) {
        0 => QuantSpec::nf4_default(),
        1 => QuantSpec::int4_default(),
        _ => QuantSpec::int8_default(),
    };
    spec.granularity = peftlab::quant::Granularity::PerBlock(rng.random_range(2..=8));
    spec
}

fn randomize(store: &mut ParamStore, id: ParamId, std: f64, rng: &mut ChaCha8Rng) {
    let t = store.get_mut(id);
    let fresh = Tensor::randn(t.rows(), t.cols(), std, rng);
    t.data_mut().copy_from_slice(fresh.data());
}

fn attention_layer(store: &mut ParamStore, d: usize, dk: usize, rng: &mut ChaCha8Rng) -> AttentionLayer {
    let projections = ["wq", "wk", "wv"].map(|n| Projection {
        name: n.to_string(),
        base: BaseWeight::Dense(store.insert(n, Tensor::randn(d, dk, 0.7, rng), true)),
        adapter: None,
    });
    AttentionLayer { projections, d_k: dk }
}

fn tiny_model(rng: &mut ChaCha8Rng) -> (ToyTransformer, Example) {
    let config = ModelConfig {
        vocab_size: 6,
        d_model: 4,
        d_k: 4,
        encoder_layers: 1,
        decoder_layers: 1,
        max_len: 4,
    };
    let model = ToyTransformer::new(config, rng).unwrap();
    let len = rng.random_range(1..=3);
    let source: Vec<usize> = (0..len).map(|_| rng.random_range(2..6)).collect();
    let example = Example {
        target: source.clone(),
        source,
    };
    (model, example)
}

fn randomize_adapters(model: &mut ToyTransformer, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = model
        .adapters()
        .flat_map(|(_, a)| match a {
            Adapter::Lora(l) => vec![l.a(), l.b()],
            Adapter::AdaLora(l) => vec![l.p(), l.lambda(), l.q()],
        })
        .collect();
    for id in ids {
        randomize(&mut model.params, id, 0.3, rng);
    }
    let mut store = std::mem::take(&mut model.params);
    for a in model.adalora_adapters_mut() {
        let mut mask: Vec<bool> = (0..a.rank()).map(|_| rng.random_bool(0.7)).collect();
        mask[0] = true;
        a.set_mask(&mut store, mask).unwrap();
    }
    model.params = store;
}

pub type Builder = fn(&mut ChaCha8Rng) -> Box<dyn Objective>;

/// Every differentiable op and composite path, each as a random-instance builder.
pub fn catalog() -> Vec<(&'static str, Builder)> {
    vec![
        ("matmul", |rng| {
            let (n, k, m) = dims(rng);
            let mut store = ParamStore::new();
            let a = store.insert("a", randn(n, k, rng), true);
            let b = store.insert("b", randn(k, m, rng), true);
            let r = randn(n, m, rng);
            Free::boxed(store, move |t, s| {
                let (av, bv) = (t.param(s, a), t.param(s, b));
                let y = t.matmul(av, bv)?;
                contract(t, y, &r)
            })
        }),
        ("frozen_matmul", |rng| {
            let (n, k, m) = dims(rng);
            let mut store = ParamStore::new();
            let x = store.insert("x", randn(n, k, rng), true);
            let w = Arc::new(quantize_with(&randn(k, m, rng), &random_spec(rng)).unwrap());
            let r = randn(n, m, rng);
            Free::boxed(store, move |t, s| {
                let xv = t.param(s, x);
                let y = t.frozen_matmul(xv, Arc::new(DequantOnTheFly(w.clone())))?;
                contract(t, y, &r)
            })
        }),
        ("add", |rng| binary(rng, |t, a, b| t.add(a, b))),
        ("sub", |rng| binary(rng, |t, a, b| t.sub(a, b))),
        ("mul", |rng| binary(rng, |t, a, b| t.mul(a, b))),
        ("scale", |rng| {
            let c = rng.random_range(-3.0..3.0);
            let (n, m, _) = dims(rng);
            let mut store = ParamStore::new();
            let a = store.insert("a", randn(n, m, rng), true);
            let r = randn(n, m, rng);
            Free::boxed(store, move |t, s| {
                let av = t.param(s, a);
                let y = t.scale(av, c);
                contract(t, y, &r)
            })
        }),
        ("transpose", |rng| unary(rng, |t, a| t.transpose(a), true, 1)),
        // A single-column softmax is constant, so rows get at least two entries.
        ("softmax_rows", |rng| unary(rng, |t, a| t.softmax_rows(a), false, 2)),
        ("tanh", |rng| unary(rng, |t, a| t.tanh(a), false, 1)),
        ("scale_columns", |rng| {
            let (n, m, _) = dims(rng);
            let mut store = ParamStore::new();
            let a = store.insert("a", randn(n, m, rng), true);
            let v = store.insert("v", randn(1, m, rng), true);
            let r = randn(n, m, rng);
            Free::boxed(store, move |t, s| {
                let (av, vv) = (t.param(s, a), t.param(s, v));
                let y = t.scale_columns(av, vv)?;
                contract(t, y, &r)
            })
        }),
        ("gather_rows", |rng| {
            let (rows, cols, _) = dims(rng);
            let picks: Vec<usize> = (0..rng.random_range(1..=6)).map(|_| rng.random_range(0..rows)).collect();
            let mut store = ParamStore::new();
            let table = store.insert("table", randn(rows, cols, rng), true);
            let r = randn(picks.len(), cols, rng);
            Free::boxed(store, move |t, s| {
                let tv = t.param(s, table);
                let y = t.gather_rows(tv, &picks)?;
                contract(t, y, &r)
            })
        }),
        ("sum", |rng| {
            let (n, m, _) = dims(rng);
            let mut store = ParamStore::new();
            let a = store.insert("a", randn(n, m, rng), true);
            Free::boxed(store, move |t, s| {
                let av = t.param(s, a);
                Ok(t.sum(av))
            })
        }),
        ("sum_squares", |rng| {
            let (n, m, _) = dims(rng);
            let mut store = ParamStore::new();
            let a = store.insert("a", randn(n, m, rng), true);
            Free::boxed(store, move |t, s| {
                let av = t.param(s, a);
                Ok(t.sum_squares(av))
            })
        }),
        ("cross_entropy", |rng| {
            let (n, _, _) = dims(rng);
            let vocab = rng.random_range(2..=5);
            let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab)).collect();
            let mut store = ParamStore::new();
            let logits = store.insert("logits", Tensor::randn(n, vocab, 2.0, rng), true);
            Free::boxed(store, move |t, s| {
                let lv = t.param(s, logits);
                t.cross_entropy(lv, &targets)
            })
        }),
        ("lora_forward", |rng| {
            let (b, n, k) = dims(rng);
            let r = rng.random_range(1..=n.min(k));
            let mut store = ParamStore::new();
            let x = store.insert("x", randn(b, n, rng), true);
            let adapter = LoraAdapter::new(&mut store, "w", n, k, r, rng).unwrap();
            randomize(&mut store, adapter.a(), 0.5, rng);
            let w = randn(n, k, rng);
            let rr = randn(b, k, rng);
            Free::boxed(store, move |t, s| {
                let xv = t.param(s, x);
                let wv = t.constant(w.clone());
                let y = lora_forward(t, s, xv, wv, &adapter)?;
                contract(t, y, &rr)
            })
        }),
        ("adalora_forward", |rng| {
            let (b, n, k) = dims(rng);
            let r = rng.random_range(1..=n.min(k));
            let mut store = ParamStore::new();
            let x = store.insert("x", randn(b, n, rng), true);
            let mut adapter =
                AdaLoraAdapter::new(&mut store, "w", n, k, r, 0.1, BudgetSchedule::constant(r, 10), rng).unwrap();
            for id in [adapter.p(), adapter.lambda(), adapter.q()] {
                randomize(&mut store, id, 0.5, rng);
            }
            let mask: Vec<bool> = (0..r).map(|i| i == 0 || rng.random_bool(0.6)).collect();
            adapter.set_mask(&mut store, mask).unwrap();
            let w = randn(n, k, rng);
            let rr = randn(b, k, rng);
            Free::boxed(store, move |t, s| {
                let xv = t.param(s, x);
                let wv = t.constant(w.clone());
                let y = adalora_forward(t, s, xv, wv, &adapter)?;
                contract(t, y, &rr)
            })
        }),
        ("orthogonality_penalty", |rng| {
            let (_, n, k) = dims(rng);
            let r = rng.random_range(1..=n.min(k));
            let gamma = rng.random_range(0.01..1.0);
            let mut store = ParamStore::new();
            let adapter =
                AdaLoraAdapter::new(&mut store, "w", n, k, r, gamma, BudgetSchedule::constant(r, 10), rng).unwrap();
            for id in [adapter.p(), adapter.q()] {
                randomize(&mut store, id, 0.6, rng);
            }
            Free::boxed(store, move |t, s| adapter.orthogonality_penalty(t, s))
        }),
        ("qlora_forward", |rng| {
            let (b, n, k) = dims(rng);
            let r = rng.random_range(1..=n.min(k));
            let mut store = ParamStore::new();
            let x = store.insert("x", randn(b, n, rng), true);
            let w = randn(n, k, rng);
            let layer = QloraLinear::from_weight(&mut store, "w", &w, &random_spec(rng), r, rng).unwrap();
            randomize(&mut store, layer.adapter.a(), 0.5, rng);
            let rr = randn(b, k, rng);
            Free::boxed(store, move |t, s| {
                let xv = t.param(s, x);
                let y = qlora_forward(t, s, xv, &layer)?;
                contract(t, y, &rr)
            })
        }),
        ("self_attention", |rng| {
            let (len, d, dk) = dims(rng);
            let mut store = ParamStore::new();
            let layer = attention_layer(&mut store, d, dk, rng);
            let x = store.insert("x", randn(len, d, rng), true);
            let rr = randn(len, dk, rng);
            Free::boxed(store, move |t, s| {
                let xv = t.param(s, x);
                let y = self_attention(t, s, xv, &layer)?;
                contract(t, y, &rr)
            })
        }),
        ("masked_cross_attention", |rng| {
            let (lq, d, dk) = dims(rng);
            let lkv = rng.random_range(1..=4);
            let causal = lq == lkv && rng.random_bool(0.5);
            let mut store = ParamStore::new();
            let layer = attention_layer(&mut store, d, dk, rng);
            let xq = store.insert("xq", randn(lq, d, rng), true);
            let xkv = store.insert("xkv", randn(lkv, d, rng), true);
            let rr = randn(lq, dk, rng);
            Free::boxed(store, move |t, s| {
                let (q, kv) = (t.param(s, xq), t.param(s, xkv));
                let y = layer.attend(t, s, q, kv, causal)?;
                contract(t, y, &rr)
            })
        }),
        ("model_full", |rng| {
            let (model, example) = tiny_model(rng);
            Box::new(ModelLoss { model, example })
        }),
        ("model_lora", |rng| {
            let (mut model, example) = tiny_model(rng);
            let r = rng.random_range(1..=4);
            model.attach_adapters(&AdapterKind::Lora, r, &Target::ALL, rng).unwrap();
            randomize_adapters(&mut model, rng);
            Box::new(ModelLoss { model, example })
        }),
        ("model_adalora_with_penalty", |rng| {
            let (mut model, example) = tiny_model(rng);
            let r = rng.random_range(1..=4);
            let kind = AdapterKind::AdaLora {
                gamma: rng.random_range(0.01..0.5),
                schedule: BudgetSchedule::constant(r, 10),
            };
            model.attach_adapters(&kind, r, &Target::ALL, rng).unwrap();
            randomize_adapters(&mut model, rng);
            Box::new(ModelLoss { model, example })
        }),
        ("model_qlora", |rng| {
            let (mut model, example) = tiny_model(rng);
            model.quantize_base(&random_spec(rng)).unwrap();
            let r = rng.random_range(1..=4);
            model.attach_adapters(&AdapterKind::Lora, r, &Target::ALL, rng).unwrap();
            randomize_adapters(&mut model, rng);
            Box::new(ModelLoss { model, example })
        }),
    ]
}

pub struct OpReport {
    pub name: &'static str,
    pub instances: usize,
    pub worst_f64: f64,
    pub worst_f32: f64,
    /// Smallest analytic gradient norm seen; guards against vacuous passes.
    pub min_norm: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.worst_f64 < TOL_F64 && self.worst_f32 < TOL_F32 && self.min_norm > 1e-8
    }
}

pub fn run_op(name: &'static str, build: Builder, instances: usize, seed: u64) -> OpReport {
    let mut worst_f64: f64 = 0.0;
    let mut worst_f32: f64 = 0.0;
    let mut min_norm = f64::INFINITY;
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
        let mut obj = build(&mut rng);
        let c = check(obj.as_mut(), Precision::F64);
        worst_f64 = worst_f64.max(c.rel_error);
        min_norm = min_norm.min(c.analytic_norm);
        let c = check(obj.as_mut(), Precision::F32);
        worst_f32 = worst_f32.max(c.rel_error);
    }
    OpReport {
        name,
        instances,
        worst_f64,
        worst_f32,
        min_norm,
    }
}
