//! Bit-faithful JSON encoding of 64-bit floats.
//!
//! Floats are written as `"0x"` followed by the 16 hex digits of their IEEE-754
//! bit pattern. Plain JSON numbers are also accepted on input.

use nalgebra::DMatrix;
use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HexF64(pub f64);

impl Serialize for HexF64 {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&format!("0x{:016x}", self.0.to_bits()))
    }
}

struct HexVisitor;

impl<'de> Visitor<'de> for HexVisitor {
    type Value = HexF64;

    fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
        f.write_str("a hex bit-pattern string or a number")
    }

    fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<HexF64, E> {
        parse_hex(v).map(HexF64).ok_or_else(|| E::custom(format!("bad float encoding {v:?}")))
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<HexF64, E> {
        Ok(HexF64(v))
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<HexF64, E> {
        Ok(HexF64(v as f64))
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<HexF64, E> {
        Ok(HexF64(v as f64))
    }
}

impl<'de> Deserialize<'de> for HexF64 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        d.deserialize_any(HexVisitor)
    }
}

pub fn parse_hex(s: &str) -> Option<f64> {
    let h = s.strip_prefix("0x")?;
    if h.len() != 16 {
        return None;
    }
    u64::from_str_radix(h, 16).ok().map(f64::from_bits)
}

pub type HexMatrix = Vec<Vec<HexF64>>;

pub fn matrix_to_hex(m: &DMatrix<f64>) -> HexMatrix {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| HexF64(m[(i, j)])).collect()).collect()
}

pub fn matrix_from_hex(rows: &HexMatrix) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    if rows.iter().any(|x| x.len() != c) {
        return Err(Error::Format("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j].0))
}
