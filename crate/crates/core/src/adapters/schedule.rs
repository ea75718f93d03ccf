use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Non-increasing budget of retained singular values.
///
/// `b(t) = b0` for `t < warmup`; afterwards it falls linearly to `b_T` at
/// `t = T`, rounded down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetSchedule {
    pub initial: usize,
    pub final_budget: usize,
    pub total_steps: usize,
    pub warmup: usize,
    #[serde(default)]
    pub step: usize,
}

impl BudgetSchedule {
    pub fn new(initial: usize, final_budget: usize, total_steps: usize, warmup: usize) -> Result<Self> {
        let s = Self {
            initial,
            final_budget,
            total_steps,
            warmup,
            step: 0,
        };
        s.validate()?;
        Ok(s)
    }

    /// Constant budget `b` for all steps.
    pub fn constant(budget: usize, total_steps: usize) -> Self {
        Self {
            initial: budget,
            final_budget: budget,
            total_steps,
            warmup: 0,
            step: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.final_budget > self.initial {
            return Err(Error::Schedule(format!(
                "final budget {} exceeds initial budget {}",
                self.final_budget, self.initial
            )));
        }
        if self.warmup > self.total_steps {
            return Err(Error::Schedule(format!(
                "warmup {} exceeds total steps {}",
                self.warmup, self.total_steps
            )));
        }
        if self.step > self.total_steps {
            return Err(Error::Schedule(format!(
                "current step {} beyond total steps {}",
                self.step, self.total_steps
            )));
        }
        Ok(())
    }

    pub fn budget_at(&self, t: usize) -> Result<usize> {
        if t > self.total_steps {
            return Err(Error::Schedule(format!(
                "step {t} beyond schedule end {}",
                self.total_steps
            )));
        }
        if t < self.warmup {
            return Ok(self.initial);
        }
        if t == self.total_steps {
            return Ok(self.final_budget);
        }
        // floor(b0 − (b0 − bT)·(t − w)/(T − w)) = b0 − ceil(...)
        let span = self.total_steps - self.warmup;
        let drop = (self.initial - self.final_budget) * (t - self.warmup);
        Ok(self.initial - drop.div_ceil(span))
    }

    pub fn current(&self) -> Result<usize> {
        self.budget_at(self.step)
    }

    /// Moves to the next step, saturating at the schedule end.
    pub fn advance(&mut self) {
        self.step = (self.step + 1).min(self.total_steps);
    }
}

pub fn budget_at(schedule: &BudgetSchedule, t: usize) -> Result<usize> {
    schedule.budget_at(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example() {
        let s = BudgetSchedule::new(8, 2, 6, 0).unwrap();
        assert_eq!(s.budget_at(3).unwrap(), 5);
        assert_eq!(s.budget_at(0).unwrap(), 8);
        assert_eq!(s.budget_at(6).unwrap(), 2);
        assert!(s.budget_at(7).is_err());
    }

    #[test]
    fn warmup_holds_initial() {
        let s = BudgetSchedule::new(6, 1, 10, 4).unwrap();
        for t in 0..4 {
            assert_eq!(s.budget_at(t).unwrap(), 6);
        }
        assert_eq!(s.budget_at(4).unwrap(), 6);
        assert_eq!(s.budget_at(10).unwrap(), 1);
    }

    #[test]
    fn non_increasing_everywhere() {
        for b0 in 0..=8 {
            for bt in 0..=b0 {
                for total in 0..=12 {
                    for w in 0..=total {
                        let s = BudgetSchedule::new(b0, bt, total, w).unwrap();
                        let seq: Vec<_> = (0..=total).map(|t| s.budget_at(t).unwrap()).collect();
                        assert!(seq.windows(2).all(|p| p[0] >= p[1]), "{s:?} {seq:?}");
                        assert_eq!(*seq.last().unwrap(), bt);
                    }
                }
            }
        }
    }

    #[test]
    fn invalid_schedules() {
        assert!(BudgetSchedule::new(2, 3, 5, 0).is_err());
        assert!(BudgetSchedule::new(3, 2, 5, 6).is_err());
    }
}
