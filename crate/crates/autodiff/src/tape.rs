//! The recording tape and the forward half of every primitive.
//!
//! Each primitive evaluates eagerly and records what its adjoint needs. The
//! adjoint rules live in `backward.rs`, next to a restatement of the
//! forward definition.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{AutodiffError, Result};
use crate::kernels::{gemm, MatMut, MatRef};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearity applied inside the gated MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// `x·σ(x)`
    Silu,
    /// tanh approximation of GELU
    Gelu,
}

/// Row normalisation flavour. Both variants carry a learned gain and no bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Rms,
    Layer,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Silu => x / (T::one() + (-x).exp()),
            Activation::Gelu => {
                let x64 = x.as_f64();
                let u = GELU_C * (x64 + GELU_K * x64 * x64 * x64);
                T::from_f64(0.5 * x64 * (1.0 + u.tanh()))
            }
        }
    }

    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Silu => {
                let s = T::one() / (T::one() + (-x).exp());
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Gelu => {
                let x64 = x.as_f64();
                let u = GELU_C * (x64 + GELU_K * x64 * x64 * x64);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * GELU_K * x64 * x64);
                T::from_f64(0.5 * (1.0 + t) + 0.5 * x64 * (1.0 - t * t) * du)
            }
        }
    }
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        factor: T,
    },
    Activation {
        a: NodeId,
        kind: Activation,
    },
    Softmax {
        a: NodeId,
    },
    Norm {
        x: NodeId,
        gain: NodeId,
        kind: NormKind,
        inv_std: Vec<T>,
        normalized: Vec<T>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        seq_len: usize,
        probs: Vec<T>,
    },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) needs_grad: bool,
}

/// Single-threaded record of a forward computation.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) params: BTreeMap<String, NodeId>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn require_2d(op: &'static str, t: &[usize]) -> Result<(usize, usize)> {
    if t.len() != 2 {
        return Err(AutodiffError::InvalidArgument {
            op,
            reason: format!("expected a matrix, got shape {t:?}"),
        });
    }
    Ok((t[0], t[1]))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(AutodiffError::DanglingNode {
                id: id.0,
                len: self.nodes.len(),
            });
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn grad_any(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>> {
        self.check(id)?;
        Ok(&self.nodes[id.0].value)
    }

    /// Differentiable input that is not a named parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Named trainable parameter. Re-registering a name is an error.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<NodeId> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(AutodiffError::InvalidArgument {
                op: "param",
                reason: format!("parameter `{name}` registered twice"),
            });
        }
        let id = self.push(value, Op::Leaf, true);
        self.params.insert(name, id);
        Ok(id)
    }

    pub fn params(&self) -> &BTreeMap<String, NodeId> {
        &self.params
    }

    /// `a (m×k) · b (k×n)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// `a (m×k) · bᵀ` with `b` stored as `n×k`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = require_2d("matmul", av.shape())?;
        let (br, bc) = require_2d("matmul", bv.shape())?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        let bref = MatRef::dense(bv.data(), br, bc);
        gemm(
            T::one(),
            MatRef::dense(av.data(), m, k),
            if trans_b { bref.t() } else { bref },
            T::zero(),
            MatMut::dense(&mut out, m, n),
        );
        let needs = self.grad_any(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, trans_b },
            needs,
        ))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.grad_any(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.grad_any(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, needs))
    }

    /// Multiplication by a fixed scalar.
    pub fn scale(&mut self, a: NodeId, factor: T) -> Result<NodeId> {
        self.check(a)?;
        let value = self.nodes[a.0].value.map(|x| x * factor);
        let needs = self.grad_any(&[a]);
        Ok(self.push(value, Op::Scale { a, factor }, needs))
    }

    pub fn activation(&mut self, a: NodeId, kind: Activation) -> Result<NodeId> {
        self.check(a)?;
        let value = self.nodes[a.0].value.map(|x| kind.apply(x));
        let needs = self.grad_any(&[a]);
        Ok(self.push(value, Op::Activation { a, kind }, needs))
    }

    /// Row-wise softmax over the last axis, stabilised by max subtraction.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let av = &self.nodes[a.0].value;
        let cols = av.cols();
        let mut out = av.data().to_vec();
        if cols > 0 {
            for row in out.chunks_mut(cols) {
                softmax_in_place(row);
            }
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        let needs = self.grad_any(&[a]);
        Ok(self.push(value, Op::Softmax { a }, needs))
    }

    /// Per-row normalisation of `x (n×d)` followed by a gain `(d)`.
    pub fn norm(&mut self, x: NodeId, gain: NodeId, kind: NormKind, eps: f64) -> Result<NodeId> {
        self.check(x)?;
        self.check(gain)?;
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gain.0].value;
        let (n, d) = require_2d("norm", xv.shape())?;
        if gv.shape() != [d] {
            return Err(AutodiffError::ShapeMismatch {
                op: "norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let mut normalized = vec![T::zero(); n * d];
        let mut inv_std = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * d];
        for r in 0..n {
            let row = xv.row(r);
            let mean = match kind {
                NormKind::Rms => 0.0,
                NormKind::Layer => row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64,
            };
            let var = row
                .iter()
                .map(|v| {
                    let c = v.as_f64() - mean;
                    c * c
                })
                .sum::<f64>()
                / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = T::from_f64(inv);
            for c in 0..d {
                let xh = T::from_f64((row[c].as_f64() - mean) * inv);
                normalized[r * d + c] = xh;
                out[r * d + c] = xh * gv.data()[c];
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        let needs = self.grad_any(&[x, gain]);
        Ok(self.push(
            value,
            Op::Norm {
                x,
                gain,
                kind,
                inv_std,
                normalized,
            },
            needs,
        ))
    }

    /// Gathers rows of `table (v×d)`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.check(table)?;
        let tv = &self.nodes[table.0].value;
        let (v, d) = require_2d("embedding", tv.shape())?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(AutodiffError::InvalidArgument {
                    op: "embedding",
                    reason: format!("index {id} out of range for {v} rows"),
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let needs = self.grad_any(&[table]);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits (n×v)`. Rows whose target is `None` are ignored.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[Option<usize>]) -> Result<NodeId> {
        self.check(logits)?;
        let lv = &self.nodes[logits.0].value;
        let (n, v) = require_2d("cross_entropy", lv.shape())?;
        if targets.len() != n {
            return Err(AutodiffError::InvalidArgument {
                op: "cross_entropy",
                reason: format!("{} targets for {n} rows", targets.len()),
            });
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0f64;
        let mut count = 0usize;
        for r in 0..n {
            let row = &mut probs[r * v..(r + 1) * v];
            let Some(t) = targets[r] else { continue };
            if t >= v {
                return Err(AutodiffError::InvalidArgument {
                    op: "cross_entropy",
                    reason: format!("target {t} out of range for {v} classes"),
                });
            }
            let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
            let sum: f64 = row.iter().map(|x| (x.as_f64() - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t].as_f64();
            count += 1;
            for x in row.iter_mut() {
                *x = T::from_f64((x.as_f64() - lse).exp());
            }
        }
        if count == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "cross_entropy",
                reason: "no rows carry a target".into(),
            });
        }
        let value = Tensor::scalar(T::from_f64(total / count as f64));
        let needs = self.grad_any(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            needs,
        ))
    }

    /// Multi-head causal self-attention.
    ///
    /// `q`, `k`, `v` are `(batch·seq_len) × (heads·d_head)`; rows are grouped
    /// into independent sequences of `seq_len`. Head `h` reads columns
    /// `h·d_head..(h+1)·d_head`. Scores are scaled by `1/sqrt(d_head)` and
    /// position `i` attends to positions `≤ i` of its own sequence.
    pub fn causal_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        seq_len: usize,
    ) -> Result<NodeId> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (rows, width) = require_2d("attention", self.nodes[q.0].value.shape())?;
        if heads == 0 || width % heads != 0 || seq_len == 0 || rows % seq_len != 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "attention",
                reason: format!(
                    "{rows}×{width} input cannot be split into {heads} heads and sequences of {seq_len}"
                ),
            });
        }
        let dh = width / heads;
        let batch = rows / seq_len;
        let t = seq_len;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
        );
        let mut probs = vec![T::zero(); batch * heads * t * t];
        let mut out = vec![T::zero(); rows * width];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                let qb = MatRef::block(qd, width, b * t, t, h * dh, dh);
                let kb = MatRef::block(kd, width, b * t, t, h * dh, dh);
                gemm(scale, qb, kb.t(), T::zero(), MatMut::dense(p, t, t));
                for i in 0..t {
                    let row = &mut p[i * t..(i + 1) * t];
                    softmax_in_place(&mut row[..=i]);
                    for x in &mut row[i + 1..] {
                        *x = T::zero();
                    }
                }
                let vb = MatRef::block(vd, width, b * t, t, h * dh, dh);
                gemm(
                    T::one(),
                    MatRef::dense(p, t, t),
                    vb,
                    T::zero(),
                    MatMut::block(&mut out, width, b * t, t, h * dh, dh),
                );
            }
        }
        let value = Tensor::new(vec![rows, width], out)?;
        let needs = self.grad_any(&[q, k, v]);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            },
            needs,
        ))
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
    let mut sum = 0.0f64;
    for x in row.iter_mut() {
        let e = (x.as_f64() - max).exp();
        sum += e;
        *x = T::from_f64(e);
    }
    for x in row.iter_mut() {
        *x = T::from_f64(x.as_f64() / sum);
    }
}
