//! Prefix-coded 8-bit "dynamic tree" baseline.
//!
//! Code layout, most significant bit first:
//!
//! ```text
//!   s | 1 1 … 1 0 | m m … m
//!   ^   unary e     6 − e mantissa bits
//! ```
//!
//! `s` is the sign. The exponent `e` is the length of the run of 1-bits
//! that follows, terminated by a 0 (when `e = 7` the run fills the code and
//! there is no terminator). The remaining `f = 6 − e` bits hold a linear
//! mantissa `m`, and the normalized magnitude is
//! `2^-e · (1/2 + (m + 1) / 2^(f+1))`, i.e. `f` bits of resolution inside
//! `(2^-(e+1), 2^-e]`. `e = 7` (`0x7f`) is the single level `2^-7`.
//! Code `0x00` is reserved for zero. Values are normalized by the tensor's
//! absolute maximum before encoding; encoding picks the nearest table entry.
//!
//! Small magnitudes get long prefixes and few mantissa bits, and anything
//! below `2^-8 · absmax` collapses to zero.

use std::sync::OnceLock;

use crate::{Error, Result};

/// Codes plus the absmax scale they were normalized by.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicTreeCodes {
    pub codes: Vec<u8>,
    pub absmax: f32,
}

/// Normalized value of a single code.
pub fn decode_dynamic_tree(code: u8) -> f32 {
    if code == 0 {
        return 0.0;
    }
    let negative = code & 0x80 != 0;
    let body = code & 0x7f;
    let mut e = 0u32;
    while e < 7 && body & (0x40 >> e) != 0 {
        e += 1;
    }
    let magnitude = if e == 7 {
        2f64.powi(-7)
    } else {
        let f = 6 - e;
        let m = u32::from(body) & ((1u32 << f) - 1);
        2f64.powi(-(e as i32)) * (0.5 + f64::from(m + 1) / f64::from(1u32 << (f + 1)))
    };
    let v = magnitude as f32;
    if negative {
        -v
    } else {
        v
    }
}

/// All 256 code values, indexed by code.
pub fn dynamic_tree_table() -> &'static [f32; 256] {
    static TABLE: OnceLock<[f32; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [0.0f32; 256];
        for (code, v) in t.iter_mut().enumerate() {
            *v = decode_dynamic_tree(code as u8);
        }
        t
    })
}

/// `(value, code)` pairs sorted by value, for nearest-entry search.
fn sorted_table() -> &'static [(f32, u8)] {
    static SORTED: OnceLock<Vec<(f32, u8)>> = OnceLock::new();
    SORTED.get_or_init(|| {
        let mut pairs: Vec<(f32, u8)> = dynamic_tree_table()
            .iter()
            .enumerate()
            .map(|(c, &v)| (v, c as u8))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        pairs.dedup_by(|b, a| a.0 == b.0);
        pairs
    })
}

fn nearest_code(y: f32) -> u8 {
    let table = sorted_table();
    let idx = table.partition_point(|&(v, _)| v < y);
    if idx == 0 {
        return table[0].1;
    }
    if idx == table.len() {
        return table[table.len() - 1].1;
    }
    let (below, above) = (table[idx - 1], table[idx]);
    // ties go to the smaller value
    if (y - below.0) <= (above.0 - y) {
        below.1
    } else {
        above.1
    }
}

pub fn quantize_dynamic_tree(x: &[f32]) -> Result<DynamicTreeCodes> {
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite value {} at index {i}", x[i])));
    }
    let absmax = x.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if absmax == 0.0 {
        return Ok(DynamicTreeCodes {
            codes: vec![0; x.len()],
            absmax,
        });
    }
    let codes = x.iter().map(|&v| nearest_code(v / absmax)).collect();
    Ok(DynamicTreeCodes { codes, absmax })
}

pub fn dequantize_dynamic_tree(c: &DynamicTreeCodes) -> Vec<f32> {
    let table = dynamic_tree_table();
    c.codes
        .iter()
        .map(|&q| table[usize::from(q)] * c.absmax)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_encodes_to_code_zero() {
        let c = quantize_dynamic_tree(&[0.0]).unwrap();
        assert_eq!(c.codes, vec![0]);
        assert_eq!(c.absmax, 0.0);
        assert_eq!(dequantize_dynamic_tree(&c), vec![0.0]);
    }

    #[test]
    fn table_shape() {
        let t = dynamic_tree_table();
        assert_eq!(t[0], 0.0);
        assert_eq!(t[0x7f], 2f32.powi(-7));
        // e = 0, m = 63 → 1.0; e = 1 with five mantissa bits tops out at 0.5
        assert_eq!(t[0b0011_1111], 1.0);
        assert_eq!(t[0b0101_1111], 0.5);
        assert_eq!(t[0x80 | 0b0011_1111], -1.0);
        // positives are distinct
        let mut pos: Vec<f32> = t[1..128].to_vec();
        pos.sort_by(f32::total_cmp);
        pos.dedup();
        assert_eq!(pos.len(), 127);
        assert!(t[1..128].iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn absmax_roundtrips() {
        for a in [1.0f32, 3.7e-5, -2.0] {
            let c = quantize_dynamic_tree(&[a, a / 3.0]).unwrap();
            let back = dequantize_dynamic_tree(&c);
            assert!(((back[0] - a) / a).abs() <= 1.0 / 64.0);
        }
    }

    #[test]
    fn tiny_values_starve() {
        let c = quantize_dynamic_tree(&[1.0, 1e-3]).unwrap();
        assert_eq!(dequantize_dynamic_tree(&c)[1], 0.0);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(quantize_dynamic_tree(&[f32::NAN]).is_err());
    }
}
