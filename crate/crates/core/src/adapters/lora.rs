use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Standard deviation of the random factor at initialization.
pub const INIT_STD: f64 = 0.02;

/// Low-rank update `ΔW = A·B` for a frozen `n × k` weight.
///
/// `A` (`n × r`) starts at zero and `B` (`r × k`) is drawn from N(0, 0.02²),
/// so `ΔW` is exactly zero until the first update.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    a: ParamId,
    b: ParamId,
    rank: usize,
    in_dim: usize,
    out_dim: usize,
}

impl LoraAdapter {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rank: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_rank(rank, in_dim, out_dim)?;
        let a = store.insert(format!("{name}.lora_a"), Tensor::zeros(in_dim, rank), true);
        let b = store.insert(
            format!("{name}.lora_b"),
            Tensor::randn(rank, out_dim, INIT_STD, rng),
            true,
        );
        Ok(Self {
            a,
            b,
            rank,
            in_dim,
            out_dim,
        })
    }

    /// Rebinds an adapter to factors already present in `store`.
    pub fn from_params(store: &ParamStore, a: ParamId, b: ParamId) -> Result<Self> {
        let (n, r) = store.get(a).shape();
        let (r2, k) = store.get(b).shape();
        if r != r2 {
            return Err(Error::Dimension {
                op: "lora factors",
                left: (n, r),
                right: (r2, k),
            });
        }
        check_rank(r, n, k)?;
        Ok(Self {
            a,
            b,
            rank: r,
            in_dim: n,
            out_dim: k,
        })
    }

    pub fn a(&self) -> ParamId {
        self.a
    }

    pub fn b(&self) -> ParamId {
        self.b
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.in_dim, self.out_dim)
    }

    /// `r·(n + k)`.
    pub fn trainable_count(&self) -> usize {
        self.rank * (self.in_dim + self.out_dim)
    }

    /// `ΔW = A·B`, materialized (for inspection only; the forward pass never
    /// forms it).
    pub fn delta(&self, store: &ParamStore) -> Result<Tensor> {
        store.get(self.a).matmul(store.get(self.b))
    }

    /// `(x·A)·B`.
    pub fn forward_delta(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let a = tape.param(store, self.a);
        let b = tape.param(store, self.b);
        let xa = tape.matmul(x, a)?;
        tape.matmul(xa, b)
    }
}

pub(crate) fn check_rank(rank: usize, n: usize, k: usize) -> Result<()> {
    if rank == 0 || rank > n.min(k) {
        return Err(Error::Config(format!(
            "adapter rank {rank} must be in 1..={} for a {n}×{k} weight",
            n.min(k)
        )));
    }
    Ok(())
}

/// `x·W + (x·A)·B`. `W` should be a frozen parameter or constant; it never
/// receives a gradient from this call unless it was registered as trainable.
pub fn lora_forward(tape: &mut Tape, store: &ParamStore, x: Var, w: Var, adapter: &LoraAdapter) -> Result<Var> {
    let (n, k) = tape.shape(w);
    if (n, k) != adapter.shape() {
        return Err(Error::Dimension {
            op: "lora_forward",
            left: (n, k),
            right: adapter.shape(),
        });
    }
    let base = tape.matmul(x, w)?;
    let delta = adapter.forward_delta(tape, store, x)?;
    tape.add(base, delta)
}

/// How many times fewer parameters the adapter trains than the full weight:
/// `n·k / ((n + k)·r)`.
pub fn lora_parameter_ratio(n: usize, k: usize, r: usize) -> f64 {
    (n * k) as f64 / ((n + k) * r) as f64
}
