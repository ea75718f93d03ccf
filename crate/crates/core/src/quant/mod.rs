//! Weight quantization.
//!
//! Three schemes share one group-wise pipeline:
//!
//! - asymmetric affine: `X_q = round(X/S + Z)`, `X = S(X_q − Z)`, with
//!   `S = (R_max − R_min)/(Q_max − Q_min)` and `Z = round(Q_min − R_min/S)`;
//! - symmetric affine: `Z = 0`, `S = |R|_max / (2^(N−1) − 1)`, code range
//!   `[−(2^(N−1) − 1), 2^(N−1) − 1]`;
//! - NF4: values are divided by the group absmax and snapped to the nearest
//!   entry of a 16-value normal-quantile codebook.
//!
//! Rounding is round-half-to-even throughout. Groups are contiguous row-major
//! spans (whole tensor, one row, or fixed-size blocks), so groups can be
//! processed in any order with identical results.

mod double;
mod format;
mod nf4;
mod pack;

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{FrozenWeight, Tensor};

pub use double::{double_quantize_constants, QuantizedScales, SUPER_GROUP_SIZE};
pub use format::{footprint_bytes, tensor_footprint, Footprint, PQT_MAGIC};
pub use nf4::{build_nf4_codebook, nf4_codebook, Nf4Codebook, NF4_TAIL_PROBABILITY};
pub use pack::{pack_codes, packed_len, unpack_codes};

pub const DEFAULT_BLOCK_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantKind {
    AsymmetricAffine,
    SymmetricAffine,
    Nf4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantScheme {
    pub kind: QuantKind,
    pub bits: u8,
}

impl QuantScheme {
    pub fn asymmetric(bits: u8) -> Result<Self> {
        Self::new(QuantKind::AsymmetricAffine, bits)
    }

    pub fn symmetric(bits: u8) -> Result<Self> {
        Self::new(QuantKind::SymmetricAffine, bits)
    }

    pub fn nf4() -> Self {
        Self {
            kind: QuantKind::Nf4,
            bits: 4,
        }
    }

    pub fn new(kind: QuantKind, bits: u8) -> Result<Self> {
        let s = Self { kind, bits };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            QuantKind::Nf4 => self.bits == 4,
            _ => matches!(self.bits, 4 | 8),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("{:?} does not support {} bits", self.kind, self.bits)))
        }
    }

    /// Inclusive code range `(Q_min, Q_max)`.
    pub fn code_range(&self) -> (i32, i32) {
        let half = 1i32 << (self.bits - 1);
        match self.kind {
            QuantKind::AsymmetricAffine => (-half, half - 1),
            QuantKind::SymmetricAffine => (-(half - 1), half - 1),
            QuantKind::Nf4 => (0, 15),
        }
    }

    fn signed_codes(&self) -> bool {
        self.kind != QuantKind::Nf4
    }
}

impl fmt::Display for QuantScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            QuantKind::AsymmetricAffine => write!(f, "asym-int{}", self.bits),
            QuantKind::SymmetricAffine => write!(f, "sym-int{}", self.bits),
            QuantKind::Nf4 => write!(f, "nf4"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    PerTensor,
    PerRow,
    PerBlock(usize),
}

impl Granularity {
    /// Elements per group for a `rows × cols` tensor.
    pub fn group_size(&self, rows: usize, cols: usize) -> usize {
        match *self {
            Granularity::PerTensor => (rows * cols).max(1),
            Granularity::PerRow => cols.max(1),
            Granularity::PerBlock(b) => b,
        }
    }

    pub fn group_count(&self, rows: usize, cols: usize) -> usize {
        (rows * cols).div_ceil(self.group_size(rows, cols))
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Granularity::PerBlock(0) => Err(Error::Config("block size must be positive".into())),
            _ => Ok(()),
        }
    }
}

impl std::str::FromStr for QuantScheme {
    type Err = Error;

    /// `nf4`, `asym-int{4,8}`, `sym-int{4,8}`; bare `int4` means symmetric and
    /// bare `int8` asymmetric.
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nf4" => Ok(Self::nf4()),
            "int4" | "sym-int4" => Self::symmetric(4),
            "int8" | "asym-int8" => Self::asymmetric(8),
            "asym-int4" => Self::asymmetric(4),
            "sym-int8" => Self::symmetric(8),
            other => Err(Error::Config(format!("unknown quantization scheme '{other}'"))),
        }
    }
}

/// Scheme, granularity, and whether the per-group scales get a second
/// quantization level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub scheme: QuantScheme,
    pub granularity: Granularity,
    #[serde(default)]
    pub double_quant: bool,
}

impl QuantSpec {
    pub fn nf4_default() -> Self {
        Self {
            scheme: QuantScheme::nf4(),
            granularity: Granularity::PerBlock(DEFAULT_BLOCK_SIZE),
            double_quant: true,
        }
    }

    /// Symmetric int4, block 64, double-quantized scales.
    pub fn int4_default() -> Self {
        Self {
            scheme: QuantScheme {
                kind: QuantKind::SymmetricAffine,
                bits: 4,
            },
            ..Self::nf4_default()
        }
    }

    /// Defaults for `scheme`: block 64, double quantization for 4-bit schemes.
    pub fn for_scheme(scheme: QuantScheme) -> Self {
        Self {
            scheme,
            granularity: Granularity::PerBlock(DEFAULT_BLOCK_SIZE),
            double_quant: scheme.bits == 4,
        }
    }

    pub fn int8_default() -> Self {
        Self {
            scheme: QuantScheme {
                kind: QuantKind::AsymmetricAffine,
                bits: 8,
            },
            granularity: Granularity::PerBlock(DEFAULT_BLOCK_SIZE),
            double_quant: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scheme.validate()?;
        self.granularity.validate()
    }
}

/// Constants of one quantization group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantConstants {
    /// Scale `S` (for NF4, the group absmax).
    pub scale: f64,
    /// Zero-point `Z`; always 0 outside the asymmetric scheme.
    pub zero_point: i32,
    /// Set when the group was all zeros and `S` was forced to 1.
    pub degenerate: bool,
}

/// Fits `S` and `Z` to one group of values.
pub fn fit_constants(group: &[f64], scheme: QuantScheme) -> Result<QuantConstants> {
    if group.is_empty() {
        return Err(Error::Usage("cannot fit quantization constants to an empty group".into()));
    }
    if group.iter().any(|v| !v.is_finite()) {
        return Err(Error::Usage("cannot quantize non-finite values".into()));
    }
    let (q_min, q_max) = scheme.code_range();
    let degenerate = QuantConstants {
        scale: 1.0,
        zero_point: 0,
        degenerate: true,
    };
    match scheme.kind {
        QuantKind::AsymmetricAffine => {
            // The range always covers 0 so that Z is a valid code.
            let r_min = group.iter().copied().fold(0.0f64, f64::min);
            let r_max = group.iter().copied().fold(0.0f64, f64::max);
            if r_max == r_min {
                return Ok(degenerate);
            }
            let scale = (r_max - r_min) / (q_max - q_min) as f64;
            let z = (q_min as f64 - r_min / scale).round_ties_even();
            Ok(QuantConstants {
                scale,
                zero_point: (z as i32).clamp(q_min, q_max),
                degenerate: false,
            })
        }
        QuantKind::SymmetricAffine | QuantKind::Nf4 => {
            let absmax = group.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if absmax == 0.0 {
                return Ok(degenerate);
            }
            let scale = match scheme.kind {
                QuantKind::Nf4 => absmax,
                _ => absmax / q_max as f64,
            };
            Ok(QuantConstants {
                scale,
                zero_point: 0,
                degenerate: false,
            })
        }
    }
}

fn encode_value(x: f64, c: &QuantConstants, scheme: QuantScheme) -> i32 {
    let (q_min, q_max) = scheme.code_range();
    match scheme.kind {
        QuantKind::Nf4 => {
            let book = nf4_codebook();
            if c.degenerate {
                book.zero_index() as i32
            } else {
                book.nearest(x / c.scale) as i32
            }
        }
        _ => {
            if c.degenerate {
                return c.zero_point;
            }
            let q = (x / c.scale + c.zero_point as f64).round_ties_even();
            q.clamp(q_min as f64, q_max as f64) as i32
        }
    }
}

fn decode_value(code: i32, scale: f64, zero_point: i32, kind: QuantKind) -> f64 {
    match kind {
        QuantKind::Nf4 => scale * nf4_codebook().get(code as usize),
        QuantKind::AsymmetricAffine => scale * (code - zero_point) as f64,
        QuantKind::SymmetricAffine => scale * code as f64,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScaleStore {
    Plain(Vec<f64>),
    Double(QuantizedScales),
}

impl ScaleStore {
    /// Scales as used by dequantization.
    pub fn effective(&self) -> Vec<f64> {
        match self {
            ScaleStore::Plain(s) => s.clone(),
            ScaleStore::Double(q) => q.dequantize(),
        }
    }
}

/// Codes plus constants for a quantized 2-D tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub(crate) scheme: QuantScheme,
    pub(crate) granularity: Granularity,
    pub(crate) rows: usize,
    pub(crate) cols: usize,
    pub(crate) scales: ScaleStore,
    pub(crate) zero_points: Vec<i32>,
    pub(crate) degenerate: Vec<bool>,
    pub(crate) codes: Vec<u8>,
}

/// Quantizes without double quantization.
pub fn quantize(x: &Tensor, scheme: QuantScheme, granularity: Granularity) -> Result<QuantizedTensor> {
    quantize_with(
        x,
        &QuantSpec {
            scheme,
            granularity,
            double_quant: false,
        },
    )
}

pub fn quantize_with(x: &Tensor, spec: &QuantSpec) -> Result<QuantizedTensor> {
    spec.validate()?;
    let (rows, cols) = x.shape();
    let group_size = spec.granularity.group_size(rows, cols);
    let scheme = spec.scheme;

    let per_group: Vec<(QuantConstants, Vec<i32>)> = x
        .data()
        .par_chunks(group_size)
        .map(|group| {
            let c = fit_constants(group, scheme)?;
            let codes = group.iter().map(|&v| encode_value(v, &c, scheme)).collect();
            Ok((c, codes))
        })
        .collect::<Result<_>>()?;

    let mut codes = Vec::with_capacity(x.len());
    let mut scales = Vec::with_capacity(per_group.len());
    let mut zero_points = Vec::new();
    let mut degenerate = Vec::with_capacity(per_group.len());
    for (c, group_codes) in per_group {
        codes.extend(group_codes);
        scales.push(c.scale);
        if scheme.kind == QuantKind::AsymmetricAffine {
            zero_points.push(c.zero_point);
        }
        degenerate.push(c.degenerate);
    }

    let scales = if spec.double_quant {
        // Degenerate groups decode to zero whatever their scale, so they do
        // not widen their super-group's range.
        let first_level: Vec<f64> = scales
            .iter()
            .zip(&degenerate)
            .map(|(&s, &d)| if d { 0.0 } else { s })
            .collect();
        ScaleStore::Double(double_quantize_constants(&first_level))
    } else {
        ScaleStore::Plain(scales)
    };

    Ok(QuantizedTensor {
        scheme,
        granularity: spec.granularity,
        rows,
        cols,
        scales,
        zero_points,
        degenerate,
        codes: pack_codes(&codes, scheme.bits),
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Result<Tensor> {
    q.dequantize()
}

impl QuantizedTensor {
    pub fn scheme(&self) -> QuantScheme {
        self.scheme
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn group_size(&self) -> usize {
        self.granularity.group_size(self.rows, self.cols)
    }

    pub fn group_count(&self) -> usize {
        self.degenerate.len()
    }

    pub fn scales(&self) -> &ScaleStore {
        &self.scales
    }

    pub fn is_double_quantized(&self) -> bool {
        matches!(self.scales, ScaleStore::Double(_))
    }

    pub fn zero_points(&self) -> &[i32] {
        &self.zero_points
    }

    pub fn degenerate_flags(&self) -> &[bool] {
        &self.degenerate
    }

    pub fn packed_codes(&self) -> &[u8] {
        &self.codes
    }

    /// Mutable access to the packed code bytes, for integrity tests.
    pub fn packed_codes_mut(&mut self) -> &mut [u8] {
        &mut self.codes
    }

    pub fn codes(&self) -> Result<Vec<i32>> {
        unpack_codes(&self.codes, self.len(), self.scheme.bits, self.scheme.signed_codes())
    }

    /// Constants of each group as used for dequantization.
    pub fn constants(&self) -> Vec<QuantConstants> {
        let scales = self.scales.effective();
        (0..self.group_count())
            .map(|g| QuantConstants {
                scale: scales[g],
                zero_point: self.zero_points.get(g).copied().unwrap_or(0),
                degenerate: self.degenerate[g],
            })
            .collect()
    }

    pub fn dequantize(&self) -> Result<Tensor> {
        let codes = self.codes()?;
        let (q_min, q_max) = self.scheme.code_range();
        if let Some((i, &c)) = codes.iter().enumerate().find(|(_, &c)| c < q_min || c > q_max) {
            return Err(Error::Integrity(format!(
                "code {c} at element {i} outside range [{q_min}, {q_max}] of {}",
                self.scheme
            )));
        }
        let group_size = self.group_size();
        let constants = self.constants();
        let mut out = Vec::with_capacity(codes.len());
        for (group_codes, c) in codes.chunks(group_size).zip(&constants) {
            for &code in group_codes {
                out.push(if c.degenerate {
                    0.0
                } else {
                    decode_value(code, c.scale, c.zero_point, self.scheme.kind)
                });
            }
        }
        Tensor::from_vec(self.rows, self.cols, out)
    }

    /// Largest effective scale over all groups.
    pub fn max_scale(&self) -> f64 {
        self.scales.effective().into_iter().fold(0.0, f64::max)
    }
}

/// [`FrozenWeight`] adapter that dequantizes on every materialization and
/// reports each live buffer to [`dequant_tracker`].
#[derive(Debug, Clone)]
pub struct DequantOnTheFly(pub Arc<QuantizedTensor>);

impl FrozenWeight for DequantOnTheFly {
    fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    fn materialize(&self) -> Tensor {
        let t = self
            .0
            .dequantize()
            .expect("quantized weight failed integrity check during forward pass");
        dequant_tracker::record(t.len());
        t
    }
}

/// Thread-local counters of dequantized weight materializations.
pub mod dequant_tracker {
    use std::cell::Cell;

    thread_local! {
        static CALLS: Cell<usize> = const { Cell::new(0) };
        static LARGEST: Cell<usize> = const { Cell::new(0) };
    }

    pub(crate) fn record(elements: usize) {
        CALLS.with(|c| c.set(c.get() + 1));
        LARGEST.with(|l| l.set(l.get().max(elements)));
    }

    pub fn reset() {
        CALLS.with(|c| c.set(0));
        LARGEST.with(|l| l.set(0));
    }

    /// Number of dequantizations since the last reset.
    pub fn calls() -> usize {
        CALLS.with(Cell::get)
    }

    /// Largest single materialization, in elements, since the last reset.
    pub fn largest() -> usize {
        LARGEST.with(Cell::get)
    }
}
