//! Grouped affine quantization.
//!
//! The input (row) dimension of a `D_in × D_out` matrix is cut into `L`
//! contiguous blocks of equal height. Every (block, column) segment gets its
//! own scale `a = (max − min)/(2^N − 1)` and offset `b = min`; a weight is
//! stored as the code `q = round((w − b)/a)` and reconstructed as `a·q + b`.
//!
//! Codes are packed segment by segment, segments ordered column-major
//! (`c·L + g`). Within a segment, rows are consecutive; for `N ≤ 4` two
//! codes share a byte with the even row in the low nibble, otherwise each
//! code takes a byte. Each segment starts on a byte boundary.

use saap_autodiff::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantGroupedMatrix {
    rows: usize,
    cols: usize,
    blocks: usize,
    bits: u32,
    codes: Vec<u8>,
    /// `L × D_out`, row-major.
    scale: Vec<f64>,
    /// `L × D_out`, row-major.
    offset: Vec<f64>,
}

/// Largest divisor of `rows` not exceeding `requested`.
pub fn effective_blocks(rows: usize, requested: usize) -> usize {
    (1..=requested.min(rows).max(1))
        .rev()
        .find(|l| rows % l == 0)
        .unwrap_or(1)
}

fn packs_two(bits: u32) -> bool {
    bits <= 4
}

fn segment_bytes(block_rows: usize, bits: u32) -> usize {
    if packs_two(bits) {
        block_rows.div_ceil(2)
    } else {
        block_rows
    }
}

impl QuantGroupedMatrix {
    pub fn quantize<T: Scalar>(w: &Tensor<T>, blocks: usize, bits: u32) -> Result<Self> {
        if w.shape().len() != 2 {
            return Err(Error::InvalidArgument(format!("expected a matrix, got shape {:?}", w.shape())));
        }
        if !(2..=8).contains(&bits) {
            return Err(Error::InvalidArgument(format!("bit width {bits} outside 2..=8")));
        }
        let (rows, cols) = (w.rows(), w.cols());
        if blocks == 0 || rows % blocks != 0 {
            return Err(Error::BlockMismatch(format!("{blocks} blocks do not divide {rows} rows")));
        }
        if let Some(i) = w.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteWeight {
                row: i / cols,
                col: i % cols,
            });
        }
        let levels = ((1u32 << bits) - 1) as f64;
        let h = rows / blocks;
        let seg_bytes = segment_bytes(h, bits);
        let mut codes = vec![0u8; cols * blocks * seg_bytes];
        let mut scale = vec![0.0; blocks * cols];
        let mut offset = vec![0.0; blocks * cols];
        for c in 0..cols {
            for g in 0..blocks {
                let seg: Vec<f64> = (g * h..(g + 1) * h).map(|r| w.at(r, c).as_f64()).collect();
                let lo = seg.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = seg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let a = if hi > lo { (hi - lo) / levels } else { 1.0 };
                scale[g * cols + c] = a;
                offset[g * cols + c] = lo;
                let base = (c * blocks + g) * seg_bytes;
                for (k, v) in seg.iter().enumerate() {
                    let q = if hi > lo {
                        ((v - lo) / a).round().clamp(0.0, levels) as u8
                    } else {
                        0
                    };
                    if packs_two(bits) {
                        codes[base + k / 2] |= q << (4 * (k % 2));
                    } else {
                        codes[base + k] = q;
                    }
                }
            }
        }
        Ok(QuantGroupedMatrix {
            rows,
            cols,
            blocks,
            bits,
            codes,
            scale,
            offset,
        })
    }

    /// Reassembles a matrix from stored parts, validating sizes and codes.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        blocks: usize,
        bits: u32,
        codes: Vec<u8>,
        scale: Vec<f64>,
        offset: Vec<f64>,
    ) -> Result<Self> {
        if !(2..=8).contains(&bits) || blocks == 0 || rows % blocks != 0 {
            return Err(Error::BlockMismatch(format!(
                "{blocks} blocks of {bits}-bit codes for {rows} rows"
            )));
        }
        let seg_bytes = segment_bytes(rows / blocks, bits);
        if codes.len() != cols * blocks * seg_bytes || scale.len() != blocks * cols || offset.len() != blocks * cols {
            return Err(Error::BlockMismatch("stored buffer sizes do not match the shape".into()));
        }
        let q = QuantGroupedMatrix {
            rows,
            cols,
            blocks,
            bits,
            codes,
            scale,
            offset,
        };
        for c in 0..cols {
            for r in 0..rows {
                q.code(r, c)?;
            }
        }
        Ok(q)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn blocks(&self) -> usize {
        self.blocks
    }
    pub fn bits(&self) -> u32 {
        self.bits
    }
    pub fn block_rows(&self) -> usize {
        self.rows / self.blocks
    }
    pub fn codes(&self) -> &[u8] {
        &self.codes
    }
    pub fn scale(&self) -> &[f64] {
        &self.scale
    }
    pub fn offset(&self) -> &[f64] {
        &self.offset
    }
    pub(crate) fn offset_mut(&mut self) -> &mut [f64] {
        &mut self.offset
    }

    /// Block that row `r` belongs to.
    pub fn block_of(&self, r: usize) -> usize {
        r / self.block_rows()
    }

    pub fn code(&self, r: usize, c: usize) -> Result<u8> {
        let h = self.block_rows();
        let (g, k) = (r / h, r % h);
        let base = (c * self.blocks + g) * segment_bytes(h, self.bits);
        let q = if packs_two(self.bits) {
            (self.codes[base + k / 2] >> (4 * (k % 2))) & 0x0f
        } else {
            self.codes[base + k]
        };
        if u32::from(q) >= 1 << self.bits {
            return Err(Error::CodeOutOfRange { code: q, bits: self.bits });
        }
        Ok(q)
    }

    /// `a·q + b` for one element.
    pub fn value(&self, r: usize, c: usize) -> Result<f64> {
        let s = self.block_of(r) * self.cols + c;
        Ok(self.scale[s] * self.code(r, c)? as f64 + self.offset[s])
    }

    pub fn dequantize<T: Scalar>(&self) -> Result<Tensor<T>> {
        let mut data = vec![T::zero(); self.rows * self.cols];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[r * self.cols + c] = T::from_f64(self.value(r, c)?);
            }
        }
        Ok(Tensor::new(vec![self.rows, self.cols], data)?)
    }

    /// Storage in bytes: packed codes plus scale and offset tables.
    pub fn storage_bytes(&self) -> usize {
        self.codes.len() + 16 * self.scale.len()
    }
}

pub fn quantize_grouped<T: Scalar>(w: &Tensor<T>, blocks: usize, bits: u32) -> Result<QuantGroupedMatrix> {
    QuantGroupedMatrix::quantize(w, blocks, bits)
}

pub fn dequantize<T: Scalar>(q: &QuantGroupedMatrix) -> Result<Tensor<T>> {
    q.dequantize()
}
