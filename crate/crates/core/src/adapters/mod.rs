//! Low-rank adapters for frozen linear maps.

mod adalora;
mod lora;
mod schedule;

pub use adalora::{
    adalora_forward, AdaLoraAdapter, ImportanceScore, ImportanceScorer, MagnitudeScorer, DEFAULT_GAMMA,
};
pub use lora::{lora_forward, lora_parameter_ratio, LoraAdapter, INIT_STD};
pub(crate) use lora::check_rank;
pub use schedule::{budget_at, BudgetSchedule};

use crate::error::Result;
use crate::tensor::{ParamStore, Tape, Var};

/// An adapter attached to one projection.
#[derive(Debug, Clone)]
pub enum Adapter {
    Lora(LoraAdapter),
    AdaLora(AdaLoraAdapter),
}

impl Adapter {
    pub fn forward_delta(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Adapter::Lora(a) => a.forward_delta(tape, store, x),
            Adapter::AdaLora(a) => a.forward_delta(tape, store, x),
        }
    }

    pub fn trainable_count(&self) -> usize {
        match self {
            Adapter::Lora(a) => a.trainable_count(),
            Adapter::AdaLora(a) => a.trainable_count(),
        }
    }

    pub fn as_adalora(&self) -> Option<&AdaLoraAdapter> {
        match self {
            Adapter::AdaLora(a) => Some(a),
            Adapter::Lora(_) => None,
        }
    }

    pub fn as_adalora_mut(&mut self) -> Option<&mut AdaLoraAdapter> {
        match self {
            Adapter::AdaLora(a) => Some(a),
            Adapter::Lora(_) => None,
        }
    }
}
