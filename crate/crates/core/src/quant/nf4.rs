use std::sync::OnceLock;

use statrs::distribution::{ContinuousCDF, Normal};

/// Probability offset of the outermost quantile on each side.
pub const NF4_TAIL_PROBABILITY: f64 = 1.0 / 32.0;

/// The 16-value NF4 codebook: sorted, with exact -1, 0 and +1.
#[derive(Debug, Clone, PartialEq)]
pub struct Nf4Codebook {
    values: [f64; 16],
}

impl Nf4Codebook {
    pub fn values(&self) -> &[f64; 16] {
        &self.values
    }

    pub fn get(&self, index: usize) -> f64 {
        self.values[index]
    }

    /// Index of the codebook value holding exact zero.
    pub fn zero_index(&self) -> usize {
        self.values.iter().position(|&v| v == 0.0).expect("codebook contains zero")
    }

    /// Nearest codebook entry to `y`; on an exact tie the smaller-magnitude
    /// value wins.
    pub fn nearest(&self, y: f64) -> usize {
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (i, &c) in self.values.iter().enumerate() {
            let d = (y - c).abs();
            if d < best_dist || (d == best_dist && c.abs() < self.values[best].abs()) {
                best = i;
                best_dist = d;
            }
        }
        best
    }

    /// Half of the widest gap between neighbouring values.
    pub fn max_half_gap(&self) -> f64 {
        self.values.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max) / 2.0
    }
}

/// Builds the codebook from standard-normal quantiles.
///
/// Negative side: quantiles at 8 evenly spaced probabilities from `p0` up to
/// (not including) 1/2, divided by the magnitude of the outermost one.
/// Positive side: 7 evenly spaced probabilities above 1/2 up to `1 - p0`,
/// divided by the outermost one. Zero is appended between them.
pub fn build_nf4_codebook() -> Nf4Codebook {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p0 = NF4_TAIL_PROBABILITY;
    let edge = normal.inverse_cdf(1.0 - p0);

    let mut values = [0.0; 16];
    // 8 negative values: p_i = p0 + i·(1/2 − p0)/8, i = 0..8
    let step_neg = (0.5 - p0) / 8.0;
    for (i, v) in values.iter_mut().take(8).enumerate() {
        let q = normal.inverse_cdf(p0 + i as f64 * step_neg);
        *v = if i == 0 { -1.0 } else { q / edge };
    }
    values[8] = 0.0;
    // 7 positive values: p_j = 1/2 + j·(1/2 − p0)/7, j = 1..=7
    let step_pos = (0.5 - p0) / 7.0;
    for j in 1..=7 {
        let q = normal.inverse_cdf(0.5 + j as f64 * step_pos);
        values[8 + j] = if j == 7 { 1.0 } else { q / edge };
    }
    Nf4Codebook { values }
}

/// Process-wide codebook instance.
pub fn nf4_codebook() -> &'static Nf4Codebook {
    static BOOK: OnceLock<Nf4Codebook> = OnceLock::new();
    BOOK.get_or_init(build_nf4_codebook)
}
