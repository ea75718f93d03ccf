//! Second-level quantization of per-group scales.

use crate::error::{Error, Result};

/// Scales per super-group.
pub const SUPER_GROUP_SIZE: usize = 256;
const LEVELS: f64 = 127.0;

/// Symmetric int8 codes of first-level scales plus one absmax per
/// super-group of [`SUPER_GROUP_SIZE`] scales.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedScales {
    pub(crate) super_group: usize,
    pub(crate) absmax: Vec<f64>,
    pub(crate) codes: Vec<i8>,
}

impl QuantizedScales {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn super_group(&self) -> usize {
        self.super_group
    }

    pub fn super_constants(&self) -> &[f64] {
        &self.absmax
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    /// Second-level step size of super-group `g`.
    pub fn step(&self, g: usize) -> f64 {
        self.absmax[g] / LEVELS
    }

    /// Reconstructs `absmax · (code / 127)`; a code of ±127 returns the
    /// super-group absmax bit-exactly.
    pub fn dequantize(&self) -> Vec<f64> {
        self.codes
            .iter()
            .enumerate()
            .map(|(i, &q)| self.absmax[i / self.super_group] * (q as f64 / LEVELS))
            .collect()
    }

    pub fn byte_len(&self) -> usize {
        8 + self.absmax.len() * 8 + self.codes.len()
    }

    pub(crate) fn from_parts(super_group: usize, absmax: Vec<f64>, codes: Vec<i8>) -> Result<Self> {
        if super_group == 0 || absmax.len() != codes.len().div_ceil(super_group) {
            return Err(Error::Integrity(format!(
                "{} super-constants for {} scale codes at super-group size {super_group}",
                absmax.len(),
                codes.len()
            )));
        }
        if codes.contains(&i8::MIN) {
            return Err(Error::Integrity("scale code -128 outside symmetric range".into()));
        }
        Ok(Self {
            super_group,
            absmax,
            codes,
        })
    }
}

/// Quantizes `scales` to symmetric int8 in super-groups of 256.
pub fn double_quantize_constants(scales: &[f64]) -> QuantizedScales {
    let mut absmax = Vec::with_capacity(scales.len().div_ceil(SUPER_GROUP_SIZE));
    let mut codes = Vec::with_capacity(scales.len());
    for group in scales.chunks(SUPER_GROUP_SIZE) {
        let m = group.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        absmax.push(m);
        for &s in group {
            let q = if m == 0.0 {
                0.0
            } else {
                (LEVELS * s / m).round_ties_even().clamp(-LEVELS, LEVELS)
            };
            codes.push(q as i8);
        }
    }
    QuantizedScales {
        super_group: SUPER_GROUP_SIZE,
        absmax,
        codes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn check_bound(scales: &[f64], q: &QuantizedScales) {
        let back = q.dequantize();
        for (i, (s, r)) in scales.iter().zip(&back).enumerate() {
            let bound = q.step(i / q.super_group()) / 2.0 + 1e-15;
            assert!((s - r).abs() <= bound, "scale {i}: {s} vs {r}");
        }
    }

    #[test]
    fn single_group() {
        let scales = [0.37];
        let q = double_quantize_constants(&scales);
        assert_eq!(q.super_constants().len(), 1);
        check_bound(&scales, &q);
    }

    #[test]
    fn equal_scales_reconstruct_exactly() {
        for s in [0.1, 0.3, 1.0 / 3.0, 7.77e-3, 123.456] {
            let scales = vec![s; 300];
            let q = double_quantize_constants(&scales);
            assert_eq!(q.dequantize(), scales);
        }
    }

    #[test]
    fn abs_normal_scales_bytes_and_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = Normal::<f64>::new(0.0, 1.0).unwrap();
        let scales: Vec<f64> = (0..1024).map(|_| n.sample(&mut rng).abs()).collect();
        let q = double_quantize_constants(&scales);
        assert_eq!(q.super_constants().len(), 4);
        // 1024 one-byte codes + 4 eight-byte super-constants + 8 bytes of layout
        assert_eq!(q.byte_len(), 1024 + 4 * 8 + 8);
        assert!(q.byte_len() < 1024 * 8);
        check_bound(&scales, &q);
    }
}
