//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! The primitive set is deliberately small: it is exactly what a pre-norm
//! decoder-only transformer with a gated MLP needs to compute the gradient
//! of its next-token loss (see [`primitive_set`]).

mod backward;
mod error;
mod gradcheck;
pub mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use backward::{backward, GradientMap, Gradients};
pub use error::{AutodiffError, Result};
pub use gradcheck::{finite_diff_grad, relative_error};
pub use scalar::{DType, Scalar};
pub use tape::{Activation, NodeId, NormKind, Tape};
pub use tensor::Tensor;

/// One entry of the primitive catalogue.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Primitive {
    pub name: &'static str,
    pub forward: &'static str,
    pub adjoint: &'static str,
}

/// The primitives the engine provides, with their forward and adjoint rules.
pub fn primitive_set() -> &'static [Primitive] {
    &[
        Primitive {
            name: "matmul",
            forward: "C = A·B (or A·Bᵀ)",
            adjoint: "Ā = ḡ·Bᵀ, B̄ = Aᵀ·ḡ",
        },
        Primitive {
            name: "add",
            forward: "c = a + b (same shape)",
            adjoint: "ā = ḡ, b̄ = ḡ",
        },
        Primitive {
            name: "mul",
            forward: "c = a ⊙ b; scale: c = s·a",
            adjoint: "ā = ḡ ⊙ b, b̄ = ḡ ⊙ a",
        },
        Primitive {
            name: "activation",
            forward: "y = f(x), f ∈ {silu, gelu}",
            adjoint: "x̄ = ḡ ⊙ f'(x)",
        },
        Primitive {
            name: "softmax",
            forward: "y = exp(x − max) / Σ exp(x − max) per row",
            adjoint: "x̄ = y ⊙ (ḡ − Σ ḡ⊙y)",
        },
        Primitive {
            name: "norm",
            forward: "y = γ ⊙ (x − μ)/sqrt(var + ε), μ = 0 for rms",
            adjoint: "x̄ = r·(ḡγ − mean(ḡγ) − x̂·mean(ḡγ⊙x̂))",
        },
        Primitive {
            name: "embedding",
            forward: "y[r] = table[ids[r]]",
            adjoint: "tablē[ids[r]] += ḡ[r]",
        },
        Primitive {
            name: "cross_entropy",
            forward: "mean over rows of lse(x) − x[target]",
            adjoint: "x̄ = ḡ·(softmax(x) − onehot)/n",
        },
        Primitive {
            name: "causal_attention",
            forward: "O = softmax(mask(Q Kᵀ/sqrt(d))) V per head",
            adjoint: "composed from the matmul and softmax rules",
        },
    ]
}
