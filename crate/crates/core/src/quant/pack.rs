//! Bit packing of integer codes. 4-bit codes go two per byte, low nibble first.

use crate::error::{Error, Result};

pub fn packed_len(count: usize, bits: u8) -> usize {
    (count * bits as usize).div_ceil(8)
}

/// Packs codes into bytes. Signed codes are stored in two's complement of
/// `bits` width; only the low `bits` of each code are kept.
pub fn pack_codes(codes: &[i32], bits: u8) -> Vec<u8> {
    match bits {
        8 => codes.iter().map(|&c| c as u8).collect(),
        4 => codes
            .chunks(2)
            .map(|pair| {
                let lo = (pair[0] as u8) & 0x0F;
                let hi = pair.get(1).map_or(0, |&c| (c as u8) & 0x0F);
                lo | (hi << 4)
            })
            .collect(),
        other => panic!("unsupported code width {other}"),
    }
}

pub fn unpack_codes(bytes: &[u8], count: usize, bits: u8, signed: bool) -> Result<Vec<i32>> {
    if bytes.len() != packed_len(count, bits) {
        return Err(Error::Integrity(format!(
            "expected {} packed bytes for {count} codes, found {}",
            packed_len(count, bits),
            bytes.len()
        )));
    }
    let out = match bits {
        8 => bytes
            .iter()
            .map(|&b| if signed { b as i8 as i32 } else { b as i32 })
            .collect(),
        4 => {
            let mut out = Vec::with_capacity(count);
            for &b in bytes {
                for nib in [b & 0x0F, b >> 4] {
                    if out.len() == count {
                        break;
                    }
                    let v = nib as i32;
                    out.push(if signed && v >= 8 { v - 16 } else { v });
                }
            }
            out
        }
        other => {
            return Err(Error::Integrity(format!("unsupported code width {other}")));
        }
    };
    Ok(out)
}
