//! Grouped low-rank adapters.
//!
//! An adapter adds `ΔW = s·E·A·B` to a `D_in × D_out` weight, where `A` is
//! `L × D_int`, `B` is `D_int × D_out` and `E` is the `D_in × L` indicator
//! of the contiguous row blocks. Every row of a block receives the same
//! update, so when the blocks coincide with the quantization blocks the
//! update folds exactly into the per-segment offsets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saap_autodiff::{kernels, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use super::quantize::QuantGroupedMatrix;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterPair<T> {
    /// `L × D_int`
    pub a: Tensor<T>,
    /// `D_int × D_out`
    pub b: Tensor<T>,
    pub scale: f64,
}

/// Default numerator of the adapter scale `s = α / D_int`.
pub const DEFAULT_ALPHA: f64 = 16.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterInit {
    pub rank: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for AdapterInit {
    fn default() -> Self {
        AdapterInit {
            rank: 8,
            alpha: DEFAULT_ALPHA,
            seed: 0,
        }
    }
}

impl<T: Scalar> AdapterPair<T> {
    pub fn new(a: Tensor<T>, b: Tensor<T>, scale: f64) -> Result<Self> {
        if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
            return Err(Error::InvalidArgument(format!(
                "adapter factors {:?} and {:?} do not chain",
                a.shape(),
                b.shape()
            )));
        }
        if !(scale >= 0.0) || !scale.is_finite() {
            return Err(Error::InvalidArgument(format!("adapter scale {scale} must be finite and non-negative")));
        }
        Ok(AdapterPair { a, b, scale })
    }

    /// `A = 0`, `B` uniform in `±1/sqrt(D_int)`: the initial update is zero.
    pub fn init(blocks: usize, d_out: usize, init: &AdapterInit, stream: &str) -> Self {
        let mut seed = [0u8; 32];
        seed[..8].copy_from_slice(&init.seed.to_le_bytes());
        for (i, byte) in stream.bytes().enumerate() {
            seed[8 + i % 24] ^= byte.rotate_left((i / 24) as u32);
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        let bound = 1.0 / (init.rank as f64).sqrt();
        AdapterPair {
            a: Tensor::zeros(&[blocks, init.rank]),
            b: Tensor::from_fn(&[init.rank, d_out], |_| T::from_f64(rng.gen_range(-bound..bound))),
            scale: init.alpha / init.rank as f64,
        }
    }

    pub fn blocks(&self) -> usize {
        self.a.rows()
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.cols()
    }

    /// `L·D_int + D_int·D_out`.
    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// `s·A·B`, one row per block.
    pub fn block_delta(&self) -> Vec<f64> {
        let ab = kernels::matmul(
            &self.a.cast::<f64>().into_data(),
            &self.b.cast::<f64>().into_data(),
            self.blocks(),
            self.rank(),
            self.d_out(),
        );
        ab.into_iter().map(|v| self.scale * v).collect()
    }
}

/// `D_in × L` block indicator.
pub fn block_indicator<T: Scalar>(rows: usize, blocks: usize) -> Result<Tensor<T>> {
    if blocks == 0 || rows % blocks != 0 {
        return Err(Error::BlockMismatch(format!("{blocks} blocks do not divide {rows} rows")));
    }
    let h = rows / blocks;
    Ok(Tensor::from_fn(&[rows, blocks], |i| {
        if (i / blocks) / h == i % blocks {
            T::one()
        } else {
            T::zero()
        }
    }))
}

/// The dense `D_in × D_out` update `s·E·A·B`.
pub fn adapter_delta<T: Scalar>(adapters: &AdapterPair<T>, rows: usize) -> Result<Tensor<T>> {
    let blocks = adapters.blocks();
    if blocks == 0 || rows % blocks != 0 {
        return Err(Error::BlockMismatch(format!("{blocks} adapter blocks do not divide {rows} rows")));
    }
    let h = rows / blocks;
    let cols = adapters.d_out();
    let delta = adapters.block_delta();
    Ok(Tensor::from_fn(&[rows, cols], |i| {
        let (r, c) = (i / cols, i % cols);
        T::from_f64(delta[(r / h) * cols + c])
    }))
}

fn check_adapter<T: Scalar>(q: &QuantGroupedMatrix, adapters: &AdapterPair<T>) -> Result<()> {
    if adapters.d_out() != q.cols() || q.rows() % adapters.blocks() != 0 {
        return Err(Error::BlockMismatch(format!(
            "adapter ({} blocks × {} outputs) vs quantized {}×{}",
            adapters.blocks(),
            adapters.d_out(),
            q.rows(),
            q.cols()
        )));
    }
    Ok(())
}

/// `y = x·(Ŵ + ΔW)` for a batch of rows `x` (`n × D_in`), computed from
/// the codes and tables directly:
/// `x·Ŵ = Σ_g Σ_{i∈g} x_i·a_g·q_i + (Σ_{i∈g} x_i)·b_g` per output column,
/// and `x·ΔW = s·((x·E)·A)·B`.
pub fn quantized_linear_forward<T: Scalar>(
    q: &QuantGroupedMatrix,
    adapters: Option<&AdapterPair<T>>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, d_in) = match x.shape() {
        [d] => (1, *d),
        [n, d] => (*n, *d),
        s => return Err(Error::InvalidArgument(format!("input of shape {s:?}"))),
    };
    if d_in != q.rows() {
        return Err(Error::InvalidArgument(format!("input width {d_in} vs {} rows", q.rows())));
    }
    if let Some(ad) = adapters {
        check_adapter(q, ad)?;
    }
    let (cols, blocks, h) = (q.cols(), q.blocks(), q.block_rows());
    let mut y = vec![0f64; n * cols];
    for s in 0..n {
        let xs = &x.data()[s * d_in..(s + 1) * d_in];
        let out = &mut y[s * cols..(s + 1) * cols];
        for g in 0..blocks {
            let xg = &xs[g * h..(g + 1) * h];
            let sum: f64 = xg.iter().map(|v| v.as_f64()).sum();
            for (c, o) in out.iter_mut().enumerate() {
                let mut dot = 0f64;
                for (k, xv) in xg.iter().enumerate() {
                    dot += xv.as_f64() * q.code(g * h + k, c)? as f64;
                }
                let seg = g * cols + c;
                *o += q.scale()[seg] * dot + q.offset()[seg] * sum;
            }
        }
        if let Some(ad) = adapters {
            let ah = d_in / ad.blocks();
            let xe: Vec<f64> = (0..ad.blocks())
                .map(|g| xs[g * ah..(g + 1) * ah].iter().map(|v| v.as_f64()).sum())
                .collect();
            let xa = kernels::matmul(&xe, &ad.a.cast::<f64>().into_data(), 1, ad.blocks(), ad.rank());
            let xab = kernels::matmul(&xa, &ad.b.cast::<f64>().into_data(), 1, ad.rank(), cols);
            for (o, v) in out.iter_mut().zip(xab) {
                *o += ad.scale * v;
            }
        }
    }
    let shape = if x.shape().len() == 1 { vec![cols] } else { vec![n, cols] };
    Ok(Tensor::new(shape, y.into_iter().map(T::from_f64).collect())?)
}

/// Folds an adapter whose blocks match the quantization blocks into the
/// offsets: `b'_{g,c} = b_{g,c} + s·(A·B)_{g,c}`. Codes and scales are
/// untouched.
pub fn merge_adapters<T: Scalar>(q: &QuantGroupedMatrix, adapters: &AdapterPair<T>) -> Result<QuantGroupedMatrix> {
    check_adapter(q, adapters)?;
    if adapters.blocks() != q.blocks() {
        return Err(Error::BlockMismatch(format!(
            "adapter has {} blocks, quantization has {}",
            adapters.blocks(),
            q.blocks()
        )));
    }
    let mut merged = q.clone();
    if adapters.scale == 0.0 {
        return Ok(merged);
    }
    for (b, d) in merged.offset_mut().iter_mut().zip(adapters.block_delta()) {
        *b += d;
    }
    Ok(merged)
}
