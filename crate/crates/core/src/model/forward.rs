//! Forward pass on a tape.
//!
//! Weights reach the graph through a [`WeightBinder`], which decides whether
//! a tensor is a trainable parameter, a constant, or (during recovery) a
//! frozen quantized base plus a low-rank adapter path.

use std::collections::HashMap;

use saap_autodiff::{NodeId, Scalar, Tape, Tensor};

use super::config::{ModelConfig, NORM_EPS};
use super::params::{names, Model};
use crate::error::{Error, Result};

pub trait WeightBinder<T: Scalar> {
    /// Tape node holding tensor `name`.
    fn tensor(&mut self, tape: &mut Tape<T>, name: &str) -> Result<NodeId>;

    /// `x · W[name]`.
    fn linear(&mut self, tape: &mut Tape<T>, x: NodeId, name: &str) -> Result<NodeId> {
        let w = self.tensor(tape, name)?;
        Ok(tape.matmul(x, w)?)
    }
}

/// Binds every weight as a named differentiable parameter.
pub struct Trainable<'a, T> {
    model: &'a Model<T>,
    bound: HashMap<String, NodeId>,
}

impl<'a, T: Scalar> Trainable<'a, T> {
    pub fn new(model: &'a Model<T>) -> Self {
        Trainable {
            model,
            bound: HashMap::new(),
        }
    }
}

impl<T: Scalar> WeightBinder<T> for Trainable<'_, T> {
    fn tensor(&mut self, tape: &mut Tape<T>, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let id = tape.param(name, self.model.param(name)?.clone())?;
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }
}

/// Binds every weight as a constant (inference).
pub struct Frozen<'a, T> {
    model: &'a Model<T>,
    bound: HashMap<String, NodeId>,
}

impl<'a, T: Scalar> Frozen<'a, T> {
    pub fn new(model: &'a Model<T>) -> Self {
        Frozen {
            model,
            bound: HashMap::new(),
        }
    }
}

impl<T: Scalar> WeightBinder<T> for Frozen<'_, T> {
    fn tensor(&mut self, tape: &mut Tape<T>, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let id = tape.constant(self.model.param(name)?.clone());
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }
}

/// Nodes of interest produced by one forward pass.
pub struct ForwardNodes {
    /// `(batch·seq) × vocab`
    pub logits: NodeId,
    /// Residual stream after each layer.
    pub layer_outputs: Vec<NodeId>,
    /// Concatenated per-head attention outputs of each layer, before `wo`.
    pub attention_outputs: Vec<NodeId>,
}

fn check_batch<S: AsRef<[u32]>>(config: &ModelConfig, batch: &[S]) -> Result<usize> {
    let first = batch.first().ok_or(Error::EmptyBatch)?.as_ref().len();
    if first == 0 {
        return Err(Error::InvalidArgument("empty sequence".into()));
    }
    for seq in batch {
        let seq = seq.as_ref();
        if seq.len() != first {
            return Err(Error::InvalidArgument(format!(
                "batched sequences must share a length ({} vs {first})",
                seq.len()
            )));
        }
        if seq.len() > config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: seq.len(),
                max: config.max_seq_len,
            });
        }
        if let Some(&t) = seq.iter().find(|&&t| t as usize >= config.vocab_size) {
            return Err(Error::OutOfVocab {
                token: t,
                vocab: config.vocab_size,
            });
        }
    }
    Ok(first)
}

/// Builds the forward graph for a batch of equal-length sequences.
pub fn forward_graph<T: Scalar, B: WeightBinder<T>, S: AsRef<[u32]>>(
    config: &ModelConfig,
    binder: &mut B,
    tape: &mut Tape<T>,
    batch: &[S],
) -> Result<ForwardNodes> {
    let seq_len = check_batch(config, batch)?;
    let ids: Vec<usize> = batch
        .iter()
        .flat_map(|s| s.as_ref().iter().map(|&t| t as usize))
        .collect();
    let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..seq_len).collect();

    let tok = binder.tensor(tape, names::TOK_EMB)?;
    let pos = binder.tensor(tape, names::POS_EMB)?;
    let te = tape.embedding(tok, &ids)?;
    let pe = tape.embedding(pos, &positions)?;
    let mut h = tape.add(te, pe)?;

    let mut layer_outputs = Vec::with_capacity(config.n_layers);
    let mut attention_outputs = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let widths = config.layer(l);
        let g = binder.tensor(tape, &names::attn_norm(l))?;
        let a = tape.norm(h, g, config.norm, NORM_EPS)?;
        let q = binder.linear(tape, a, &names::wq(l))?;
        let k = binder.linear(tape, a, &names::wk(l))?;
        let v = binder.linear(tape, a, &names::wv(l))?;
        let att = tape.causal_attention(q, k, v, widths.n_heads, seq_len)?;
        attention_outputs.push(att);
        let o = binder.linear(tape, att, &names::wo(l))?;
        h = tape.add(h, o)?;

        let g = binder.tensor(tape, &names::mlp_norm(l))?;
        let m = tape.norm(h, g, config.norm, NORM_EPS)?;
        let gate = binder.linear(tape, m, &names::gate(l))?;
        let gate = tape.activation(gate, config.activation)?;
        let up = binder.linear(tape, m, &names::up(l))?;
        let hidden = tape.mul(gate, up)?;
        let down = binder.linear(tape, hidden, &names::down(l))?;
        h = tape.add(h, down)?;
        layer_outputs.push(h);
    }
    let g = binder.tensor(tape, names::FINAL_NORM)?;
    let hf = tape.norm(h, g, config.norm, NORM_EPS)?;
    let logits = if config.tie_embeddings {
        tape.matmul_nt(hf, tok)?
    } else {
        binder.linear(tape, hf, names::LM_HEAD)?
    };
    Ok(ForwardNodes {
        logits,
        layer_outputs,
        attention_outputs,
    })
}

/// Next-token targets for a flattened batch: the last position of every
/// sequence has none.
pub fn next_token_targets<S: AsRef<[u32]>>(batch: &[S]) -> Vec<Option<usize>> {
    batch
        .iter()
        .flat_map(|s| {
            let s = s.as_ref();
            (0..s.len()).map(move |i| s.get(i + 1).map(|&t| t as usize))
        })
        .collect()
}

/// Mean next-token NLL of a batch of equal-length sequences, as a tape node.
pub fn loss_graph<T: Scalar, B: WeightBinder<T>, S: AsRef<[u32]>>(
    config: &ModelConfig,
    binder: &mut B,
    tape: &mut Tape<T>,
    batch: &[S],
) -> Result<NodeId> {
    if batch.iter().any(|s| s.as_ref().len() < 2) {
        return Err(Error::InvalidArgument(
            "next-token loss needs sequences of at least 2 tokens".into(),
        ));
    }
    let nodes = forward_graph(config, binder, tape, batch)?;
    Ok(tape.cross_entropy(nodes.logits, &next_token_targets(batch))?)
}

/// Logits `(seq × vocab)` for a single sequence.
pub fn forward_logits<T: Scalar>(model: &Model<T>, tokens: &[u32]) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let nodes = forward_graph(&model.config, &mut Frozen::new(model), &mut tape, &[tokens])?;
    Ok(tape.value(nodes.logits)?.clone())
}

/// Mean next-token negative log-likelihood over every predicted position
/// of every sequence. Sequences may differ in length.
pub fn nll_loss<T: Scalar, S: AsRef<[u32]>>(model: &Model<T>, batch: &[S]) -> Result<f64> {
    let (sum, count) = nll_sum(model, batch)?;
    Ok(sum / count as f64)
}

/// Summed NLL and number of predicted positions.
pub(crate) fn nll_sum<T: Scalar, S: AsRef<[u32]>>(model: &Model<T>, batch: &[S]) -> Result<(f64, usize)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut by_len: std::collections::BTreeMap<usize, Vec<&[u32]>> = Default::default();
    for s in batch {
        by_len.entry(s.as_ref().len()).or_default().push(s.as_ref());
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (len, group) in by_len {
        let mut tape = Tape::new();
        let loss = loss_graph(&model.config, &mut Frozen::new(model), &mut tape, &group)?;
        let n = group.len() * (len - 1);
        sum += tape.value(loss)?.item().as_f64() * n as f64;
        count += n;
    }
    Ok((sum, count))
}

/// Residual stream after every layer for one sequence.
pub fn layer_outputs<T: Scalar>(model: &Model<T>, tokens: &[u32]) -> Result<Vec<Tensor<T>>> {
    let mut tape = Tape::new();
    let nodes = forward_graph(&model.config, &mut Frozen::new(model), &mut tape, &[tokens])?;
    nodes
        .layer_outputs
        .iter()
        .map(|&id| Ok(tape.value(id)?.clone()))
        .collect()
}

/// What head `head` of layer `layer` adds to the residual stream:
/// its attention output block times its rows of `wo`.
pub fn head_contribution<T: Scalar>(
    model: &Model<T>,
    layer: usize,
    head: usize,
    tokens: &[u32],
) -> Result<Tensor<T>> {
    let cfg = &model.config;
    if layer >= cfg.n_layers || head >= cfg.layer(layer).n_heads {
        return Err(Error::InvalidArgument(format!("no head {head} in layer {layer}")));
    }
    let mut tape = Tape::new();
    let nodes = forward_graph(cfg, &mut Frozen::new(model), &mut tape, &[tokens])?;
    let att = tape.value(nodes.attention_outputs[layer])?;
    let wo = model.param(&names::wo(layer))?;
    let (dh, d) = (cfg.d_head, cfg.d_model);
    let width = att.cols();
    let rows = att.rows();
    let block: Vec<T> = (0..rows)
        .flat_map(|r| att.data()[r * width + head * dh..r * width + (head + 1) * dh].to_vec())
        .collect();
    let w_rows = &wo.data()[head * dh * d..(head + 1) * dh * d];
    let out = saap_autodiff::kernels::matmul(&block, w_rows, rows, dh, d);
    Ok(Tensor::new(vec![rows, d], out)?)
}
