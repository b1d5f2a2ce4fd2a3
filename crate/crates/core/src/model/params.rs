use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saap_autodiff::{Scalar, Tensor};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::error::{Error, Result};

/// Canonical tensor names.
pub mod names {
    pub const TOK_EMB: &str = "tok_emb";
    pub const POS_EMB: &str = "pos_emb";
    pub const FINAL_NORM: &str = "final_norm";
    pub const LM_HEAD: &str = "lm_head";

    pub fn attn_norm(l: usize) -> String {
        format!("layers.{l}.attn_norm")
    }
    pub fn mlp_norm(l: usize) -> String {
        format!("layers.{l}.mlp_norm")
    }
    pub fn wq(l: usize) -> String {
        format!("layers.{l}.attn.wq")
    }
    pub fn wk(l: usize) -> String {
        format!("layers.{l}.attn.wk")
    }
    pub fn wv(l: usize) -> String {
        format!("layers.{l}.attn.wv")
    }
    pub fn wo(l: usize) -> String {
        format!("layers.{l}.attn.wo")
    }
    pub fn up(l: usize) -> String {
        format!("layers.{l}.mlp.up")
    }
    pub fn gate(l: usize) -> String {
        format!("layers.{l}.mlp.gate")
    }
    pub fn down(l: usize) -> String {
        format!("layers.{l}.mlp.down")
    }

    /// The seven projection matrices of layer `l`.
    pub fn projections(l: usize) -> [String; 7] {
        [wq(l), wk(l), wv(l), wo(l), up(l), gate(l), down(l)]
    }

    /// Layer index encoded in a tensor name, if any.
    pub fn layer_of(name: &str) -> Option<usize> {
        name.strip_prefix("layers.")?.split('.').next()?.parse().ok()
    }
}

/// Expected shape of every tensor for `config`.
pub fn expected_shapes(config: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    let d = config.d_model;
    let mut shapes = BTreeMap::new();
    shapes.insert(names::TOK_EMB.to_string(), vec![config.vocab_size, d]);
    shapes.insert(names::POS_EMB.to_string(), vec![config.max_seq_len, d]);
    for l in 0..config.n_layers {
        let w = config.layer(l);
        let attn = w.n_heads * config.d_head;
        shapes.insert(names::attn_norm(l), vec![d]);
        shapes.insert(names::mlp_norm(l), vec![d]);
        shapes.insert(names::wq(l), vec![d, attn]);
        shapes.insert(names::wk(l), vec![d, attn]);
        shapes.insert(names::wv(l), vec![d, attn]);
        shapes.insert(names::wo(l), vec![attn, d]);
        shapes.insert(names::up(l), vec![d, w.d_mlp]);
        shapes.insert(names::gate(l), vec![d, w.d_mlp]);
        shapes.insert(names::down(l), vec![w.d_mlp, d]);
    }
    shapes.insert(names::FINAL_NORM.to_string(), vec![d]);
    if !config.tie_embeddings {
        shapes.insert(names::LM_HEAD.to_string(), vec![d, config.vocab_size]);
    }
    shapes
}

/// Model weights keyed by canonical name.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    params: BTreeMap<String, Tensor<T>>,
}

fn tensor_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialisation: uniform `±1/sqrt(fan_in)` for
    /// projections (residual outputs further scaled by `1/sqrt(2·n_layers)`),
    /// uniform with std 0.02 for embeddings, ones for norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let residual = 1.0 / ((2 * config.n_layers) as f64).sqrt();
        let mut params = BTreeMap::new();
        for (name, shape) in expected_shapes(&config) {
            let mut rng = tensor_rng(seed, &name);
            let t = if shape.len() == 1 {
                Tensor::full(&shape, T::one())
            } else {
                let bound = if name == names::TOK_EMB || name == names::POS_EMB {
                    0.02 * 3f64.sqrt()
                } else {
                    let base = 1.0 / (shape[0] as f64).sqrt();
                    if name.ends_with("attn.wo") || name.ends_with("mlp.down") {
                        base * residual
                    } else {
                        base
                    }
                };
                Tensor::from_fn(&shape, |_| T::from_f64(rng.gen_range(-bound..bound)))
            };
            params.insert(name, t);
        }
        Ok(Model { config, params })
    }

    /// Assembles a model, checking every tensor against the config.
    pub fn from_parts(config: ModelConfig, params: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.check_head_dims()?;
        let expected = expected_shapes(&config);
        for (name, shape) in &expected {
            match params.get(name) {
                None => return Err(Error::InvalidConfig(format!("missing tensor `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::InvalidConfig(format!(
                        "tensor `{name}` has shape {:?}, config implies {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = params.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::InvalidConfig(format!("unexpected tensor `{extra}`")));
        }
        Ok(Model { config, params })
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no tensor named `{name}`")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no tensor named `{name}`")))
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelConfig, BTreeMap<String, Tensor<T>>) {
        (self.config, self.params)
    }

    pub fn count_params(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn tensor_hash(&self, name: &str) -> Result<String> {
        let t = self.param(name)?;
        Ok(crate::hash::sha256_hex(&t.to_le_bytes()))
    }

    /// Digest over names, shapes and raw bytes of all tensors.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}
