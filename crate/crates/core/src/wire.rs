//! Little-endian binary encoding for adapters and backbone snapshots.
//!
//! Adapter set layout:
//!
//! ```text
//! u32 pair_count
//! repeat pair_count times:
//!     u32 layer_id, u32 rank, u32 d_in, u32 d_out
//!     f64 a_mat[rank × d_in]   (row-major)
//!     f64 b_mat[d_out × rank]  (row-major)
//! ```
//!
//! A message that omits one factor (FFA-LoRA only ships `B`) writes an empty
//! `a_mat` by setting a flag bit in the high half of `layer_id`.

use crate::backbone::LayerId;
use crate::error::{Error, Result};
use crate::lowrank::{AdapterPair, Matrix};

const B_ONLY_FLAG: u32 = 1 << 31;

/// Bytes of framing per message plus per pair.
pub const MESSAGE_HEADER_BYTES: usize = 4;
pub const PAIR_HEADER_BYTES: usize = 16;

/// Which factors a message carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Factors {
    Both,
    BOnly,
}

pub fn encode_adapters<'a>(pairs: impl IntoIterator<Item = &'a AdapterPair>, factors: Factors) -> Vec<u8> {
    let pairs: Vec<&AdapterPair> = pairs.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(&(pairs.len() as u32).to_le_bytes());
    for p in pairs {
        let flag = if factors == Factors::BOnly { B_ONLY_FLAG } else { 0 };
        out.extend_from_slice(&(p.layer_id.0 | flag).to_le_bytes());
        out.extend_from_slice(&(p.rank() as u32).to_le_bytes());
        out.extend_from_slice(&(p.d_in() as u32).to_le_bytes());
        out.extend_from_slice(&(p.d_out() as u32).to_le_bytes());
        if factors == Factors::Both {
            put_entries(&mut out, &p.a_mat);
        }
        put_entries(&mut out, &p.b_mat);
    }
    out
}

/// Decodes an adapter message. Pairs sent `B`-only come back with a zero `A`.
pub fn decode_adapters(bytes: &[u8]) -> Result<(Vec<AdapterPair>, Factors)> {
    let mut cur = Cursor { bytes, pos: 0 };
    let n = cur.u32()? as usize;
    let mut pairs = Vec::with_capacity(n);
    let mut factors = Factors::Both;
    for _ in 0..n {
        let raw_id = cur.u32()?;
        let b_only = raw_id & B_ONLY_FLAG != 0;
        if b_only {
            factors = Factors::BOnly;
        }
        let layer_id = LayerId(raw_id & !B_ONLY_FLAG);
        let rank = cur.u32()? as usize;
        let d_in = cur.u32()? as usize;
        let d_out = cur.u32()? as usize;
        let a_mat = if b_only {
            Matrix::zeros((rank, d_in))
        } else {
            cur.matrix(rank, d_in)?
        };
        let b_mat = cur.matrix(d_out, rank)?;
        pairs.push(AdapterPair {
            layer_id,
            a_mat,
            b_mat,
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Wire(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    Ok((pairs, factors))
}

/// Scalar parameters carried by an encoded message of these pairs.
pub fn param_count<'a>(pairs: impl IntoIterator<Item = &'a AdapterPair>, factors: Factors) -> usize {
    pairs
        .into_iter()
        .map(|p| match factors {
            Factors::Both => p.param_count(),
            Factors::BOnly => p.b_mat.len(),
        })
        .sum()
}

pub fn encode_matrices<'a>(mats: impl IntoIterator<Item = &'a Matrix>) -> Vec<u8> {
    let mats: Vec<&Matrix> = mats.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(&(mats.len() as u32).to_le_bytes());
    for m in mats {
        out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
        put_entries(&mut out, m);
    }
    out
}

pub fn decode_matrices(bytes: &[u8]) -> Result<Vec<Matrix>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let n = cur.u32()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        out.push(cur.matrix(rows, cols)?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Wire(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    Ok(out)
}

fn put_entries(out: &mut Vec<u8>, m: &Matrix) {
    // `iter` walks in logical row-major order regardless of memory layout.
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Wire(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Wire("matrix size overflow".into()))?;
        let raw = self.take(count.checked_mul(8).ok_or_else(|| Error::Wire("size overflow".into()))?)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Matrix::from_shape_vec((rows, cols), data).map_err(|e| Error::Wire(e.to_string()))
    }
}
