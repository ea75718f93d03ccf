use rand::Rng;

use super::lora::{check_rank, INIT_STD};
use super::schedule::BudgetSchedule;
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub const DEFAULT_GAMMA: f64 = 0.1;

/// SVD-shaped update `ΔW = P·diag(λ ⊙ mask)·Q`.
///
/// `λ` lives in the store as a `1 × r` row. Pruned entries are zeroed and
/// dropped from `mask`; a dropped index never comes back.
#[derive(Debug, Clone)]
pub struct AdaLoraAdapter {
    p: ParamId,
    lambda: ParamId,
    q: ParamId,
    rank: usize,
    in_dim: usize,
    out_dim: usize,
    pub gamma: f64,
    pub schedule: BudgetSchedule,
    mask: Vec<bool>,
}

/// Per-index importance; `None` for masked indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScore(pub Vec<Option<f64>>);

/// Hook for ranking singular values before pruning.
pub trait ImportanceScorer {
    fn score(&self, adapter: &AdaLoraAdapter, store: &ParamStore) -> ImportanceScore;
}

/// `S_i = |λ_i|`.
#[derive(Debug, Clone, Copy, Default)]
pub struct MagnitudeScorer;

impl ImportanceScorer for MagnitudeScorer {
    fn score(&self, adapter: &AdaLoraAdapter, store: &ParamStore) -> ImportanceScore {
        let lambda = store.get(adapter.lambda).data();
        ImportanceScore(
            adapter
                .mask
                .iter()
                .zip(lambda)
                .map(|(&alive, &l)| alive.then_some(l.abs()))
                .collect(),
        )
    }
}

impl AdaLoraAdapter {
    /// `P`, `Q` from N(0, 0.02²), `λ = 0`, every index alive.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rank: usize,
        gamma: f64,
        schedule: BudgetSchedule,
        rng: &mut R,
    ) -> Result<Self> {
        check_rank(rank, in_dim, out_dim)?;
        schedule.validate()?;
        if schedule.initial > rank {
            return Err(Error::Schedule(format!(
                "initial budget {} exceeds rank {rank}",
                schedule.initial
            )));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be non-negative, got {gamma}")));
        }
        let p = store.insert(format!("{name}.ada_p"), Tensor::randn(in_dim, rank, INIT_STD, rng), true);
        let lambda = store.insert(format!("{name}.ada_lambda"), Tensor::zeros(1, rank), true);
        let q = store.insert(format!("{name}.ada_q"), Tensor::randn(rank, out_dim, INIT_STD, rng), true);
        Ok(Self {
            p,
            lambda,
            q,
            rank,
            in_dim,
            out_dim,
            gamma,
            schedule,
            mask: vec![true; rank],
        })
    }

    /// Rebinds to factors already in `store`, e.g. after loading a checkpoint.
    pub fn from_params(
        store: &ParamStore,
        ids: (ParamId, ParamId, ParamId),
        gamma: f64,
        schedule: BudgetSchedule,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let (p, lambda, q) = ids;
        let (d1, r) = store.get(p).shape();
        let (r2, d2) = store.get(q).shape();
        if r != r2 || store.get(lambda).shape() != (1, r) || mask.len() != r {
            return Err(Error::Dimension {
                op: "adalora factors",
                left: (d1, r),
                right: (r2, d2),
            });
        }
        Ok(Self {
            p,
            lambda,
            q,
            rank: r,
            in_dim: d1,
            out_dim: d2,
            gamma,
            schedule,
            mask,
        })
    }

    pub fn p(&self) -> ParamId {
        self.p
    }

    pub fn lambda(&self) -> ParamId {
        self.lambda
    }

    pub fn q(&self) -> ParamId {
        self.q
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.in_dim, self.out_dim)
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn set_mask(&mut self, store: &mut ParamStore, mask: Vec<bool>) -> Result<()> {
        if mask.len() != self.rank {
            return Err(Error::Dimension {
                op: "set_mask",
                left: (1, self.rank),
                right: (1, mask.len()),
            });
        }
        self.mask = mask;
        self.zero_masked(store);
        Ok(())
    }

    pub fn effective_rank(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// `r·(d1 + d2 + 1)`.
    pub fn trainable_count(&self) -> usize {
        self.rank * (self.in_dim + self.out_dim + 1)
    }

    fn mask_tensor(&self) -> Tensor {
        let data = self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        Tensor::from_vec(1, self.rank, data).expect("mask shape")
    }

    /// `P·diag(λ ⊙ mask)·Q`, materialized.
    pub fn delta(&self, store: &ParamStore) -> Result<Tensor> {
        let lam = store.get(self.lambda).hadamard(&self.mask_tensor())?;
        let mut p = store.get(self.p).clone();
        for r in 0..p.rows() {
            for c in 0..p.cols() {
                p.set(r, c, p.get(r, c) * lam.get(0, c));
            }
        }
        p.matmul(store.get(self.q))
    }

    /// `((x·P) ⊙ (λ ⊙ mask)) · Q`; masked entries of `λ` get zero gradient.
    pub fn forward_delta(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let p = tape.param(store, self.p);
        let lam = tape.param(store, self.lambda);
        let q = tape.param(store, self.q);
        let mask = tape.constant(self.mask_tensor());
        let lam_eff = tape.mul(lam, mask)?;
        let xp = tape.matmul(x, p)?;
        let scaled = tape.scale_columns(xp, lam_eff)?;
        tape.matmul(scaled, q)
    }

    /// `γ‖PᵀP − I‖²_F + γ‖QQᵀ − I‖²_F` as a recorded scalar.
    pub fn orthogonality_penalty(&self, tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        let p = tape.param(store, self.p);
        let q = tape.param(store, self.q);
        let eye = tape.constant(Tensor::identity(self.rank));
        let pt = tape.transpose(p);
        let ptp = tape.matmul(pt, p)?;
        let dp = tape.sub(ptp, eye)?;
        let np = tape.sum_squares(dp);
        let qt = tape.transpose(q);
        let qqt = tape.matmul(q, qt)?;
        let dq = tape.sub(qqt, eye)?;
        let nq = tape.sum_squares(dq);
        let total = tape.add(np, nq)?;
        Ok(tape.scale(total, self.gamma))
    }

    /// Penalty value without recording.
    pub fn orthogonality_penalty_value(&self, store: &ParamStore) -> f64 {
        let p = store.get(self.p);
        let q = store.get(self.q);
        let eye = Tensor::identity(self.rank);
        let ptp = p.transpose().matmul(p).expect("shape");
        let qqt = q.matmul(&q.transpose()).expect("shape");
        self.gamma * (ptp.sub(&eye).unwrap().frobenius_sq() + qqt.sub(&eye).unwrap().frobenius_sq())
    }

    pub fn importance_scores(&self, store: &ParamStore) -> ImportanceScore {
        MagnitudeScorer.score(self, store)
    }

    /// Keeps the `b^t` highest-scoring alive indices, zeroes the rest, then
    /// advances the schedule by one step.
    pub fn prune_step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.prune_step_with(store, &MagnitudeScorer)
    }

    pub fn prune_step_with(&mut self, store: &mut ParamStore, scorer: &dyn ImportanceScorer) -> Result<()> {
        let budget = self.schedule.current()?;
        let alive = self.effective_rank();
        if budget > alive {
            return Err(Error::Schedule(format!(
                "budget {budget} at step {} exceeds {alive} surviving singular values",
                self.schedule.step
            )));
        }
        let ImportanceScore(scores) = scorer.score(self, store);
        let mut ranked: Vec<(usize, f64)> = scores
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.map(|s| (i, s)))
            .collect();
        // highest score first; equal scores keep the lower index first
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for &(i, _) in &ranked[budget..] {
            self.mask[i] = false;
        }
        self.zero_masked(store);
        self.schedule.advance();
        Ok(())
    }

    fn zero_masked(&self, store: &mut ParamStore) {
        let lam = store.get_mut(self.lambda);
        for (v, &m) in lam.data_mut().iter_mut().zip(&self.mask) {
            if !m {
                *v = 0.0;
            }
        }
    }
}

/// `x·W + P·diag(λ ⊙ mask)·Q` applied to `x`.
pub fn adalora_forward(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    w: Var,
    adapter: &AdaLoraAdapter,
) -> Result<Var> {
    if tape.shape(w) != adapter.shape() {
        return Err(Error::Dimension {
            op: "adalora_forward",
            left: tape.shape(w),
            right: adapter.shape(),
        });
    }
    let base = tape.matmul(x, w)?;
    let delta = adapter.forward_delta(tape, store, x)?;
    tape.add(base, delta)
}
