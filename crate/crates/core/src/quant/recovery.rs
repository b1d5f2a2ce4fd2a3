//! Recovery fine-tuning: projections frozen in grouped low-bit form, only
//! the adapters train.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use saap_autodiff::{backward, NodeId, Scalar, Tape, Tensor};
use serde::{Deserialize, Serialize};

use super::adapter::{adapter_delta, block_indicator, merge_adapters, AdapterInit, AdapterPair};
use super::quantize::{effective_blocks, QuantGroupedMatrix};
use crate::error::{Error, Result};
use crate::model::checkpoint::{decode_container, encode_container, RawEntry};
use crate::model::train::{check_corpus, WindowSampler};
use crate::model::{loss_graph, names, Model, ModelConfig, WeightBinder};
use crate::optim::{lr_at, AdamW, AdamWConfig};

pub const QUANTIZED_FORMAT: &str = "saap-quantized";
pub const QUANTIZED_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantConfig {
    /// Requested row blocks per matrix; the largest divisor of the row
    /// count not above this is used.
    pub blocks: usize,
    pub bits: u32,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig { blocks: 32, bits: 4 }
    }
}

/// Which recovery variant to run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecoveryMode {
    /// Quantized base, adapters sharing the quantization blocks.
    #[default]
    Grouped,
    /// Full-precision base, one adapter row per input row.
    DenseLora,
    /// Quantized base, one adapter row per input row.
    QloraUngrouped,
}

impl RecoveryMode {
    pub fn quantizes(self) -> bool {
        self != RecoveryMode::DenseLora
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConfig {
    pub mode: RecoveryMode,
    pub steps: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub adapter: AdapterInit,
    pub optimizer: AdamWConfig,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            mode: RecoveryMode::Grouped,
            steps: 2000,
            lr: 1e-4,
            warmup_steps: 1000,
            batch_size: 128,
            seq_len: 128,
            seed: 0,
            adapter: AdapterInit::default(),
            optimizer: AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
        }
    }
}

impl RecoveryConfig {
    /// Short schedule for the desk model.
    pub fn desk() -> Self {
        RecoveryConfig {
            steps: 300,
            lr: 2e-3,
            warmup_steps: 30,
            batch_size: 8,
            ..RecoveryConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.seq_len < 2 || self.adapter.rank == 0 {
            return Err(Error::Validation(
                "recovery needs a positive learning rate, batch size, rank and seq_len ≥ 2".into(),
            ));
        }
        if !(self.adapter.alpha > 0.0) {
            return Err(Error::Validation("adapter alpha must be positive".into()));
        }
        Ok(())
    }
}

/// A model whose projections may be held in grouped quantized form.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel<T> {
    pub config: ModelConfig,
    /// Tensors kept in full precision.
    pub dense: BTreeMap<String, Tensor<T>>,
    pub quantized: BTreeMap<String, QuantGroupedMatrix>,
}

fn is_projection(config: &ModelConfig, name: &str) -> bool {
    names::layer_of(name).is_some_and(|l| l < config.n_layers && names::projections(l).iter().any(|p| p == name))
}

/// Quantizes every projection matrix; embeddings, norms and the output head
/// stay in full precision.
pub fn quantize_model<T: Scalar>(model: &Model<T>, qc: &QuantConfig) -> Result<QuantizedModel<T>> {
    let mut dense = BTreeMap::new();
    let mut quantized = BTreeMap::new();
    for (name, t) in model.params() {
        if is_projection(&model.config, name) {
            let blocks = effective_blocks(t.rows(), qc.blocks);
            quantized.insert(name.clone(), QuantGroupedMatrix::quantize(t, blocks, qc.bits)?);
        } else {
            dense.insert(name.clone(), t.clone());
        }
    }
    Ok(QuantizedModel {
        config: model.config.clone(),
        dense,
        quantized,
    })
}

impl<T: Scalar> QuantizedModel<T> {
    /// Keeps every tensor in full precision.
    pub fn unquantized(model: &Model<T>) -> Self {
        QuantizedModel {
            config: model.config.clone(),
            dense: model.params().clone(),
            quantized: BTreeMap::new(),
        }
    }

    /// Full-precision model with every quantized matrix reconstructed.
    pub fn dequantized(&self) -> Result<Model<T>> {
        let mut params = self.dense.clone();
        for (name, q) in &self.quantized {
            params.insert(name.clone(), q.dequantize()?);
        }
        Model::from_parts(self.config.clone(), params)
    }

    /// Rows of projection `name`.
    fn rows_of(&self, name: &str) -> Result<(usize, usize)> {
        if let Some(q) = self.quantized.get(name) {
            return Ok((q.rows(), q.cols()));
        }
        let t = self
            .dense
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no tensor named `{name}`")))?;
        Ok((t.rows(), t.cols()))
    }
}

/// One adapter per projection.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet<T> {
    pub pairs: BTreeMap<String, AdapterPair<T>>,
}

impl<T: Scalar> AdapterSet<T> {
    pub fn param_count(&self) -> usize {
        self.pairs.values().map(|p| p.param_count()).sum()
    }

    fn flatten(&self) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        for (name, p) in &self.pairs {
            out.insert(format!("{name}.adapter.a"), p.a.clone());
            out.insert(format!("{name}.adapter.b"), p.b.clone());
        }
        out
    }

    fn absorb(&mut self, flat: &mut BTreeMap<String, Tensor<T>>) {
        for (name, p) in self.pairs.iter_mut() {
            if let Some(a) = flat.remove(&format!("{name}.adapter.a")) {
                p.a = a;
            }
            if let Some(b) = flat.remove(&format!("{name}.adapter.b")) {
                p.b = b;
            }
        }
    }
}

/// Fresh adapters (zero initial update) for every projection of `base`.
pub fn init_adapters<T: Scalar>(base: &QuantizedModel<T>, mode: RecoveryMode, init: &AdapterInit) -> Result<AdapterSet<T>> {
    let mut pairs = BTreeMap::new();
    for l in 0..base.config.n_layers {
        for name in names::projections(l) {
            let (rows, cols) = base.rows_of(&name)?;
            let blocks = match (mode, base.quantized.get(&name)) {
                (RecoveryMode::Grouped, Some(q)) => q.blocks(),
                _ => rows,
            };
            pairs.insert(name.clone(), AdapterPair::init(blocks, cols, init, &name));
        }
    }
    Ok(AdapterSet { pairs })
}

/// Binds the frozen base as constants and routes every projection through
/// its adapter path `x·Ŵ + s·((x·E)·A)·B`.
struct RecoveryBinder<'a, T> {
    base: &'a Model<T>,
    adapters: &'a BTreeMap<String, Tensor<T>>,
    scales: &'a BTreeMap<String, f64>,
    constants: HashMap<String, NodeId>,
}

impl<T: Scalar> WeightBinder<T> for RecoveryBinder<'_, T> {
    fn tensor(&mut self, tape: &mut Tape<T>, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.constants.get(name) {
            return Ok(id);
        }
        let id = tape.constant(self.base.param(name)?.clone());
        self.constants.insert(name.to_string(), id);
        Ok(id)
    }

    fn linear(&mut self, tape: &mut Tape<T>, x: NodeId, name: &str) -> Result<NodeId> {
        let w = self.tensor(tape, name)?;
        let base = tape.matmul(x, w)?;
        let Some(&s) = self.scales.get(name) else {
            return Ok(base);
        };
        let a_name = format!("{name}.adapter.a");
        let b_name = format!("{name}.adapter.b");
        let a_val = self.adapters[&a_name].clone();
        let rows = self.base.param(name)?.rows();
        let xe = if a_val.rows() == rows {
            x
        } else {
            let e = tape.constant(block_indicator(rows, a_val.rows())?);
            tape.matmul(x, e)?
        };
        let a = tape.param(a_name, a_val)?;
        let b_val = self.adapters[&b_name].clone();
        let b = tape.param(b_name, b_val)?;
        let xa = tape.matmul(xe, a)?;
        let xab = tape.matmul(xa, b)?;
        let delta = tape.scale(xab, T::from_f64(s))?;
        Ok(tape.add(base, delta)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub mode: RecoveryMode,
    pub steps: usize,
    pub losses: Vec<f64>,
    pub final_loss: Option<f64>,
    pub adapter_params: usize,
}

/// Trains the adapters on random windows of `data`; the base never changes.
pub fn finetune_recovery<T: Scalar>(
    base: &QuantizedModel<T>,
    adapters: AdapterSet<T>,
    data: &[u32],
    rc: &RecoveryConfig,
) -> Result<(AdapterSet<T>, RecoveryReport)> {
    rc.validate()?;
    check_corpus(data.len(), rc.seq_len)?;
    if rc.seq_len > base.config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: rc.seq_len,
            max: base.config.max_seq_len,
        });
    }
    let frozen = base.dequantized()?;
    let scales: BTreeMap<String, f64> = adapters.pairs.iter().map(|(k, p)| (k.clone(), p.scale)).collect();
    let mut flat = adapters.flatten();
    let mut opt = AdamW::new(rc.optimizer.clone());
    let mut sampler = WindowSampler::new(data, rc.seed);
    let mut losses = Vec::with_capacity(rc.steps);
    for step in 0..rc.steps {
        let batch = sampler.batch(rc.batch_size, rc.seq_len);
        let mut tape = Tape::new();
        let mut binder = RecoveryBinder {
            base: &frozen,
            adapters: &flat,
            scales: &scales,
            constants: HashMap::new(),
        };
        let loss = loss_graph(&frozen.config, &mut binder, &mut tape, &batch)?;
        let value = tape.value(loss)?.item().as_f64();
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        let grads = backward(&tape, loss)?;
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::NonFiniteGradient {
                tensor: name.to_string(),
            });
        }
        drop(tape);
        opt.step(&mut flat, &grads, lr_at(step, rc.lr, rc.warmup_steps, rc.steps));
        losses.push(value);
    }
    let mut trained = adapters;
    trained.absorb(&mut flat);
    let report = RecoveryReport {
        mode: rc.mode,
        steps: rc.steps,
        final_loss: losses.last().copied(),
        losses,
        adapter_params: trained.param_count(),
    };
    Ok((trained, report))
}

/// Folds trained adapters into the base. Quantized matrices whose adapter
/// shares their blocks stay quantized with shifted offsets; everything else
/// is merged in full precision.
pub fn merge_recovered<T: Scalar>(base: &QuantizedModel<T>, adapters: &AdapterSet<T>) -> Result<QuantizedModel<T>> {
    let mut out = base.clone();
    for (name, pair) in &adapters.pairs {
        match base.quantized.get(name) {
            Some(q) if q.blocks() == pair.blocks() => {
                out.quantized.insert(name.clone(), merge_adapters(q, pair)?);
            }
            Some(q) => {
                let mut w = q.dequantize::<T>()?;
                w.add_assign(&adapter_delta(pair, q.rows())?);
                out.quantized.remove(name);
                out.dense.insert(name.clone(), w);
            }
            None => {
                let w = out
                    .dense
                    .get_mut(name)
                    .ok_or_else(|| Error::InvalidArgument(format!("no tensor named `{name}`")))?;
                let delta = adapter_delta(pair, w.rows())?;
                w.add_assign(&delta);
            }
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct QuantMeta {
    blocks: usize,
    bits: u32,
    block_map: String,
}

#[derive(Serialize, Deserialize)]
struct QuantizedMetadata {
    format: String,
    version: u32,
    dtype: saap_autodiff::DType,
    config: ModelConfig,
    quantized: BTreeMap<String, QuantMeta>,
    adapter_scales: BTreeMap<String, f64>,
}

fn f64_entry(values: &[f64], shape: Vec<usize>) -> RawEntry {
    RawEntry {
        dtype: "f64".into(),
        shape,
        bytes: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
    }
}

fn f64_values(e: &RawEntry) -> Result<Vec<f64>> {
    if e.dtype != "f64" {
        return Err(Error::Checkpoint(format!("expected f64 table, found {}", e.dtype)));
    }
    Ok(e.bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Writes a quantized model, and optionally its adapters, as one container.
pub fn save_quantized<T: Scalar>(
    model: &QuantizedModel<T>,
    adapters: Option<&AdapterSet<T>>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut entries = BTreeMap::new();
    for (name, t) in &model.dense {
        entries.insert(
            name.clone(),
            RawEntry {
                dtype: T::DTYPE.name().into(),
                shape: t.shape().to_vec(),
                bytes: t.to_le_bytes(),
            },
        );
    }
    let mut quantized = BTreeMap::new();
    for (name, q) in &model.quantized {
        entries.insert(
            name.clone(),
            RawEntry {
                dtype: format!("u{}-grouped", q.bits()),
                shape: vec![q.rows(), q.cols()],
                bytes: q.codes().to_vec(),
            },
        );
        entries.insert(format!("{name}.scale"), f64_entry(q.scale(), vec![q.blocks(), q.cols()]));
        entries.insert(format!("{name}.offset"), f64_entry(q.offset(), vec![q.blocks(), q.cols()]));
        quantized.insert(
            name.clone(),
            QuantMeta {
                blocks: q.blocks(),
                bits: q.bits(),
                block_map: "contiguous".into(),
            },
        );
    }
    let mut adapter_scales = BTreeMap::new();
    if let Some(set) = adapters {
        for (name, t) in set.flatten() {
            entries.insert(
                name,
                RawEntry {
                    dtype: T::DTYPE.name().into(),
                    shape: t.shape().to_vec(),
                    bytes: t.to_le_bytes(),
                },
            );
        }
        adapter_scales = set.pairs.iter().map(|(k, p)| (k.clone(), p.scale)).collect();
    }
    let meta = QuantizedMetadata {
        format: QUANTIZED_FORMAT.into(),
        version: QUANTIZED_VERSION,
        dtype: T::DTYPE,
        config: model.config.clone(),
        quantized,
        adapter_scales,
    };
    std::fs::write(path, encode_container(&serde_json::to_value(meta)?, &entries)?)?;
    Ok(())
}

pub fn load_quantized<T: Scalar>(path: impl AsRef<Path>) -> Result<(QuantizedModel<T>, Option<AdapterSet<T>>)> {
    let (meta, mut entries) = decode_container(&std::fs::read(path)?)?;
    let meta: QuantizedMetadata = serde_json::from_value(meta)
        .map_err(|e| Error::Checkpoint(format!("missing or invalid quantized metadata: {e}")))?;
    if meta.format != QUANTIZED_FORMAT || meta.version != QUANTIZED_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format {} v{}", meta.format, meta.version)));
    }
    let mut take = |name: &str| {
        entries
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))
    };
    let mut quantized = BTreeMap::new();
    for (name, qm) in &meta.quantized {
        if qm.block_map != "contiguous" {
            return Err(Error::Checkpoint(format!("unsupported block map `{}`", qm.block_map)));
        }
        let codes = take(name)?;
        if codes.dtype != format!("u{}-grouped", qm.bits) || codes.shape.len() != 2 {
            return Err(Error::Checkpoint(format!("`{name}` is not a {}-bit grouped matrix", qm.bits)));
        }
        let scale = f64_values(&take(&format!("{name}.scale"))?)?;
        let offset = f64_values(&take(&format!("{name}.offset"))?)?;
        let q = QuantGroupedMatrix::from_parts(
            codes.shape[0],
            codes.shape[1],
            qm.blocks,
            qm.bits,
            codes.bytes,
            scale,
            offset,
        )?;
        quantized.insert(name.clone(), q);
    }
    let mut pairs = BTreeMap::new();
    for (name, &scale) in &meta.adapter_scales {
        let a = take(&format!("{name}.adapter.a"))?;
        let b = take(&format!("{name}.adapter.b"))?;
        let a = Tensor::from_le_bytes(a.shape, &a.bytes)?;
        let b = Tensor::from_le_bytes(b.shape, &b.bytes)?;
        pairs.insert(name.clone(), AdapterPair::new(a, b, scale)?);
    }
    let mut dense = BTreeMap::new();
    for (name, e) in entries {
        if e.dtype != T::DTYPE.name() {
            return Err(Error::Checkpoint(format!("`{name}` has dtype {}", e.dtype)));
        }
        dense.insert(name, Tensor::from_le_bytes(e.shape, &e.bytes)?);
    }
    let model = QuantizedModel {
        config: meta.config,
        dense,
        quantized,
    };
    model.dequantized()?;
    let adapters = (!pairs.is_empty()).then_some(AdapterSet { pairs });
    Ok((model, adapters))
}
