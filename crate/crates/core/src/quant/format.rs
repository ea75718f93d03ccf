//! `PQT1` byte layout of a [`QuantizedTensor`]. All integers little-endian.
//!
//! ```text
//! "PQT1"
//! u8  scheme kind (0 asymmetric, 1 symmetric, 2 nf4)
//! u8  bits
//! u32 rows, u32 cols
//! u8  granularity kind (0 per-tensor, 1 per-row, 2 per-block)
//! u32 block size (0 unless per-block)
//! u32 group count G
//! u8  double-quant flag
//!     0: G × f64 scales
//!     1: u32 super-group size, u32 super count C, C × f64 absmax, G × i8 scale codes
//! G × i8 zero points          (asymmetric only)
//! ceil(G/8) degenerate-group bitmap, LSB first
//! packed codes: ceil(rows·cols·bits/8) bytes
//! ```

use serde::{Deserialize, Serialize};

use super::double::QuantizedScales;
use super::{Granularity, QuantKind, QuantScheme, QuantizedTensor, ScaleStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PQT_MAGIC: &[u8; 4] = b"PQT1";
const HEADER_LEN: usize = 4 + 1 + 1 + 4 + 4 + 1 + 4 + 4 + 1;

/// Exact byte breakdown of a serialized tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Footprint {
    pub codes: usize,
    pub constants: usize,
    /// Bytes of codebook stored with the tensor. The NF4 codebook is a fixed
    /// built-in table and is never serialized, so this is always 0.
    pub codebook: usize,
    pub metadata: usize,
    pub total: usize,
}

impl std::ops::Add for Footprint {
    type Output = Footprint;
    fn add(self, o: Footprint) -> Footprint {
        Footprint {
            codes: self.codes + o.codes,
            constants: self.constants + o.constants,
            codebook: self.codebook + o.codebook,
            metadata: self.metadata + o.metadata,
            total: self.total + o.total,
        }
    }
}

impl std::iter::Sum for Footprint {
    fn sum<I: Iterator<Item = Footprint>>(iter: I) -> Footprint {
        iter.fold(Footprint::default(), |a, b| a + b)
    }
}

pub fn footprint_bytes(q: &QuantizedTensor) -> Footprint {
    let groups = q.group_count();
    let constants = match &q.scales {
        ScaleStore::Plain(s) => s.len() * 8,
        ScaleStore::Double(d) => d.byte_len(),
    } + q.zero_points.len();
    let metadata = HEADER_LEN + groups.div_ceil(8);
    let codes = q.codes.len();
    Footprint {
        codes,
        constants,
        codebook: 0,
        metadata,
        total: codes + constants + metadata,
    }
}

/// Plain tensor stored at `element_bytes` per value (2 for a 16-bit baseline).
pub fn tensor_footprint(t: &Tensor, element_bytes: usize) -> Footprint {
    let codes = t.len() * element_bytes;
    Footprint {
        codes,
        total: codes,
        ..Footprint::default()
    }
}

fn kind_byte(kind: QuantKind) -> u8 {
    match kind {
        QuantKind::AsymmetricAffine => 0,
        QuantKind::SymmetricAffine => 1,
        QuantKind::Nf4 => 2,
    }
}

impl QuantizedTensor {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(footprint_bytes(self).total);
        out.extend_from_slice(PQT_MAGIC);
        out.push(kind_byte(self.scheme.kind));
        out.push(self.scheme.bits);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        let (gk, bs) = match self.granularity {
            Granularity::PerTensor => (0u8, 0u32),
            Granularity::PerRow => (1, 0),
            Granularity::PerBlock(b) => (2, b as u32),
        };
        out.push(gk);
        out.extend_from_slice(&bs.to_le_bytes());
        out.extend_from_slice(&(self.group_count() as u32).to_le_bytes());
        match &self.scales {
            ScaleStore::Plain(scales) => {
                out.push(0);
                for s in scales {
                    out.extend_from_slice(&s.to_le_bytes());
                }
            }
            ScaleStore::Double(d) => {
                out.push(1);
                out.extend_from_slice(&(d.super_group as u32).to_le_bytes());
                out.extend_from_slice(&(d.absmax.len() as u32).to_le_bytes());
                for m in &d.absmax {
                    out.extend_from_slice(&m.to_le_bytes());
                }
                out.extend(d.codes.iter().map(|&c| c as u8));
            }
        }
        out.extend(self.zero_points.iter().map(|&z| z as i8 as u8));
        let mut bitmap = vec![0u8; self.group_count().div_ceil(8)];
        for (i, _) in self.degenerate.iter().enumerate().filter(|(_, &d)| d) {
            bitmap[i / 8] |= 1 << (i % 8);
        }
        out.extend_from_slice(&bitmap);
        out.extend_from_slice(&self.codes);
        out
    }

    /// Parses one `PQT1` block; the slice must contain exactly one block.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let q = r.read_tensor()?;
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos, "trailing bytes after PQT1 block"));
        }
        Ok(q)
    }

    /// Parses one `PQT1` block from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn read_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut r = Reader { bytes, pos: 0 };
        let q = r.read_tensor()?;
        Ok((q, r.pos))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.pos, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn read_tensor(&mut self) -> Result<QuantizedTensor> {
        let start = self.pos;
        if self.take(4, "magic")? != PQT_MAGIC {
            return Err(Error::format(start, "bad magic, expected PQT1"));
        }
        let kind_at = self.pos;
        let kind = match self.u8("scheme kind")? {
            0 => QuantKind::AsymmetricAffine,
            1 => QuantKind::SymmetricAffine,
            2 => QuantKind::Nf4,
            other => return Err(Error::format(kind_at, format!("unknown scheme kind {other}"))),
        };
        let bits_at = self.pos;
        let bits = self.u8("bits")?;
        let scheme = QuantScheme::new(kind, bits)
            .map_err(|_| Error::format(bits_at, format!("invalid bit width {bits} for {kind:?}")))?;
        let rows = self.u32("rows")? as usize;
        let cols = self.u32("cols")? as usize;
        let gran_at = self.pos;
        let gk = self.u8("granularity")?;
        let bs = self.u32("block size")? as usize;
        let granularity = match (gk, bs) {
            (0, 0) => Granularity::PerTensor,
            (1, 0) => Granularity::PerRow,
            (2, b) if b > 0 => Granularity::PerBlock(b),
            _ => return Err(Error::format(gran_at, format!("invalid granularity {gk}/{bs}"))),
        };
        let groups_at = self.pos;
        let groups = self.u32("group count")? as usize;
        if groups != granularity.group_count(rows, cols) {
            return Err(Error::format(groups_at, format!("group count {groups} inconsistent with shape")));
        }
        let flag_at = self.pos;
        let scales = match self.u8("double-quant flag")? {
            0 => ScaleStore::Plain((0..groups).map(|_| self.f64("scale")).collect::<Result<_>>()?),
            1 => {
                let sg = self.u32("super-group size")? as usize;
                let count_at = self.pos;
                let count = self.u32("super-group count")? as usize;
                if sg == 0 || count != groups.div_ceil(sg) {
                    return Err(Error::format(count_at, "super-group layout inconsistent"));
                }
                let absmax = (0..count).map(|_| self.f64("super constant")).collect::<Result<_>>()?;
                let codes_at = self.pos;
                let codes = self.take(groups, "scale codes")?.iter().map(|&b| b as i8).collect();
                let q = QuantizedScales::from_parts(sg, absmax, codes)
                    .map_err(|e| Error::format(codes_at, e.to_string()))?;
                ScaleStore::Double(q)
            }
            other => return Err(Error::format(flag_at, format!("unknown double-quant flag {other}"))),
        };
        let zero_points = if kind == QuantKind::AsymmetricAffine {
            self.take(groups, "zero points")?.iter().map(|&b| b as i8 as i32).collect()
        } else {
            Vec::new()
        };
        let bitmap = self.take(groups.div_ceil(8), "degenerate bitmap")?;
        let degenerate = (0..groups).map(|i| bitmap[i / 8] & (1 << (i % 8)) != 0).collect();
        let n_codes = super::packed_len(rows * cols, bits);
        let codes = self.take(n_codes, "codes")?.to_vec();
        Ok(QuantizedTensor {
            scheme,
            granularity,
            rows,
            cols,
            scales,
            zero_points,
            degenerate,
            codes,
        })
    }
}
