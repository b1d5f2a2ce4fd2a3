//! Reverse sweep and the adjoint rule of every primitive.
//!
//! Notation: `ḡ` is the incoming adjoint of a node's output.

use std::collections::BTreeMap;

use crate::error::{AutodiffError, Result};
use crate::kernels::{gemm, MatMut, MatRef};
use crate::scalar::Scalar;
use crate::tape::{NodeId, NormKind, Op, Tape};
use crate::tensor::Tensor;

/// Parameter name → gradient, shapes identical to the registered values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> GradientMap<T> {
    pub fn new() -> Self {
        GradientMap {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: String, grad: Tensor<T>) {
        self.entries.insert(name, grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn into_inner(self) -> BTreeMap<String, Tensor<T>> {
        self.entries
    }

    /// First entry containing a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, g)| !g.all_finite())
            .map(|(n, _)| n.as_str())
    }
}

/// Adjoints of every node reached from the loss.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of an arbitrary node; `None` if the node does not influence the loss.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Gradients of all registered parameters with respect to `loss`.
///
/// Parameters the loss does not depend on receive zero tensors.
pub fn backward<T: Scalar>(tape: &Tape<T>, loss: NodeId) -> Result<GradientMap<T>> {
    let grads = tape.gradients(loss)?;
    let mut map = GradientMap::new();
    for (name, &id) in &tape.params {
        let value = &tape.nodes[id.0].value;
        let g = grads
            .get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(value.shape()));
        map.insert(name.clone(), g);
    }
    Ok(map)
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, contribution: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&contribution),
        None => *slot = Some(contribution),
    }
}

impl<T: Scalar> Tape<T> {
    /// Reverse sweep from a scalar `loss`.
    pub fn gradients(&self, loss: NodeId) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(AutodiffError::DanglingNode {
                id: loss.0,
                len: self.nodes.len(),
            });
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn val(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            // C = A·B:   Ā = ḡ·Bᵀ,  B̄ = Aᵀ·ḡ
            // C = A·Bᵀ:  Ā = ḡ·B,   B̄ = ḡᵀ·A
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let (br, bc) = (bv.shape()[0], bv.shape()[1]);
                let n = g.shape()[1];
                let gref = MatRef::dense(g.data(), m, n);
                let bref = MatRef::dense(bv.data(), br, bc);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    let rhs = if *trans_b { bref } else { bref.t() };
                    gemm(T::one(), gref, rhs, T::zero(), MatMut::dense(&mut da, m, k));
                    accumulate(&mut grads[a.0], Tensor::new(vec![m, k], da).expect("shape"));
                }
                if self.wants(*b) {
                    let aref = MatRef::dense(av.data(), m, k);
                    let mut db = vec![T::zero(); br * bc];
                    if *trans_b {
                        gemm(T::one(), gref.t(), aref, T::zero(), MatMut::dense(&mut db, br, bc));
                    } else {
                        gemm(T::one(), aref.t(), gref, T::zero(), MatMut::dense(&mut db, br, bc));
                    }
                    accumulate(&mut grads[b.0], Tensor::new(vec![br, bc], db).expect("shape"));
                }
            }
            // c = a + b:  ā = ḡ,  b̄ = ḡ
            Op::Add { a, b } => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            // c = a ⊙ b:  ā = ḡ ⊙ b,  b̄ = ḡ ⊙ a
            Op::Mul { a, b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    accumulate(&mut grads[a.0], Tensor::new(g.shape().to_vec(), d).expect("shape"));
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    accumulate(&mut grads[b.0], Tensor::new(g.shape().to_vec(), d).expect("shape"));
                }
            }
            // c = s·a:  ā = s·ḡ
            Op::Scale { a, factor } => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.map(|x| x * *factor));
                }
            }
            // y = f(x):  x̄ = ḡ ⊙ f'(x)
            Op::Activation { a, kind } => {
                if self.wants(*a) {
                    let av = self.val(*a);
                    let d = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(&gy, &x)| gy * kind.derivative(x))
                        .collect();
                    accumulate(&mut grads[a.0], Tensor::new(g.shape().to_vec(), d).expect("shape"));
                }
            }
            // y = softmax(x) per row:  x̄ = y ⊙ (ḡ − Σ ḡ⊙y)
            Op::Softmax { a } => {
                if self.wants(*a) {
                    let y = &node.value;
                    let cols = y.cols();
                    let mut d = vec![T::zero(); y.numel()];
                    if cols > 0 {
                        for r in 0..y.numel() / cols {
                            let (yr, gr) = (y.row(r), g.row(r));
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                            for c in 0..cols {
                                d[r * cols + c] = yr[c] * (gr[c] - T::from_f64(dot));
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], Tensor::new(y.shape().to_vec(), d).expect("shape"));
                }
            }
            // x̂ = (x − μ)·r with r = 1/sqrt(var + ε) (μ = 0 for RMS), y = x̂ ⊙ γ:
            //   γ̄ = Σ_rows ḡ ⊙ x̂
            //   RMS:   x̄ = r·(ḡγ − x̂·mean(ḡγ ⊙ x̂))
            //   Layer: x̄ = r·(ḡγ − mean(ḡγ) − x̂·mean(ḡγ ⊙ x̂))
            Op::Norm {
                x,
                gain,
                kind,
                inv_std,
                normalized,
            } => {
                let (n, d) = (g.shape()[0], g.shape()[1]);
                let gv = self.val(*gain);
                if self.wants(*gain) {
                    let mut dg = vec![0.0f64; d];
                    for r in 0..n {
                        for c in 0..d {
                            dg[c] += g.data()[r * d + c].as_f64() * normalized[r * d + c].as_f64();
                        }
                    }
                    let dg = dg.into_iter().map(T::from_f64).collect();
                    accumulate(&mut grads[gain.0], Tensor::new(vec![d], dg).expect("shape"));
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); n * d];
                    let mut dxhat = vec![0.0f64; d];
                    for r in 0..n {
                        let mut mean_d = 0.0f64;
                        let mut mean_dx = 0.0f64;
                        for c in 0..d {
                            let v = g.data()[r * d + c].as_f64() * gv.data()[c].as_f64();
                            dxhat[c] = v;
                            mean_d += v;
                            mean_dx += v * normalized[r * d + c].as_f64();
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        if *kind == NormKind::Rms {
                            mean_d = 0.0;
                        }
                        let inv = inv_std[r].as_f64();
                        for c in 0..d {
                            let xh = normalized[r * d + c].as_f64();
                            dx[r * d + c] = T::from_f64(inv * (dxhat[c] - mean_d - xh * mean_dx));
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::new(vec![n, d], dx).expect("shape"));
                }
            }
            // y[r] = table[ids[r]]:  tablē[ids[r]] += ḡ[r]
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let tv = self.val(*table);
                    let d = tv.cols();
                    let mut dt = Tensor::zeros(tv.shape());
                    let buf = dt.data_mut();
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            buf[id * d + c] = buf[id * d + c] + g.data()[r * d + c];
                        }
                    }
                    accumulate(&mut grads[table.0], dt);
                }
            }
            // L = (1/n)·Σ_r [lse(x_r) − x_r,t]:  x̄_r = ḡ·(p_r − onehot(t))/n
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if self.wants(*logits) {
                    let lv = self.val(*logits);
                    let v = lv.cols();
                    let scale = g.item().as_f64() / *count as f64;
                    let mut d = vec![T::zero(); lv.numel()];
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for c in 0..v {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            d[r * v + c] = T::from_f64(scale * (probs[r * v + c].as_f64() - onehot));
                        }
                    }
                    accumulate(&mut grads[logits.0], Tensor::new(lv.shape().to_vec(), d).expect("shape"));
                }
            }
            // Per sequence b and head h, with S = s·Q Kᵀ (causally masked),
            // P = softmax(S), O = P V:
            //   V̄ = Pᵀ Ō,  P̄ = Ō Vᵀ,  S̄ = P ⊙ (P̄ − rowsum(P̄ ⊙ P)),
            //   Q̄ = s·S̄ K,  K̄ = s·S̄ᵀ Q
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq_len,
                probs,
            } => {
                let (rows, width) = (g.shape()[0], g.shape()[1]);
                let (heads, t) = (*heads, *seq_len);
                let dh = width / heads;
                let batch = rows / t;
                let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                let (qd, kd, vd) = (self.val(*q).data(), self.val(*k).data(), self.val(*v).data());
                let mut dq = vec![T::zero(); rows * width];
                let mut dk = vec![T::zero(); rows * width];
                let mut dv = vec![T::zero(); rows * width];
                let mut dp = vec![T::zero(); t * t];
                for b in 0..batch {
                    for h in 0..heads {
                        let p = &probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                        let pref = MatRef::dense(p, t, t);
                        let gb = MatRef::block(g.data(), width, b * t, t, h * dh, dh);
                        let vb = MatRef::block(vd, width, b * t, t, h * dh, dh);
                        gemm(T::one(), pref.t(), gb, T::one(), MatMut::block(&mut dv, width, b * t, t, h * dh, dh));
                        gemm(T::one(), gb, vb.t(), T::zero(), MatMut::dense(&mut dp, t, t));
                        for i in 0..t {
                            let prow = &p[i * t..(i + 1) * t];
                            let drow = &mut dp[i * t..(i + 1) * t];
                            let dot: f64 = (0..=i).map(|j| drow[j].as_f64() * prow[j].as_f64()).sum();
                            for j in 0..=i {
                                drow[j] = prow[j] * (drow[j] - T::from_f64(dot));
                            }
                            for x in &mut drow[i + 1..] {
                                *x = T::zero();
                            }
                        }
                        let ds = MatRef::dense(&dp, t, t);
                        let qb = MatRef::block(qd, width, b * t, t, h * dh, dh);
                        let kb = MatRef::block(kd, width, b * t, t, h * dh, dh);
                        gemm(scale, ds, kb, T::one(), MatMut::block(&mut dq, width, b * t, t, h * dh, dh));
                        gemm(scale, ds.t(), qb, T::one(), MatMut::block(&mut dk, width, b * t, t, h * dh, dh));
                    }
                }
                for (id, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.wants(id) {
                        accumulate(&mut grads[id.0], Tensor::new(vec![rows, width], d).expect("shape"));
                    }
                }
            }
        }
    }
}
