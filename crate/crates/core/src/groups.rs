//! Coupled structures of the decoder: attention heads and MLP channels,
//! each with the exact weight slices it owns.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use saap_autodiff::Scalar;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_logits, names, Model, ModelConfig};
use crate::prune::remove_groups;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupKind {
    AttnHead,
    MlpChannel,
}

impl fmt::Display for GroupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroupKind::AttnHead => "attn-head",
            GroupKind::MlpChannel => "mlp-channel",
        })
    }
}

/// Rows (`axis = 0`) or columns (`axis = 1`) `start..end` of a matrix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slice {
    pub tensor: String,
    pub axis: usize,
    pub start: usize,
    pub end: usize,
}

impl Slice {
    fn new(tensor: String, axis: usize, start: usize, end: usize) -> Self {
        Slice {
            tensor,
            axis,
            start,
            end,
        }
    }

    fn check(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 2 || self.axis > 1 || self.start >= self.end || self.end > shape[self.axis] {
            return Err(Error::SliceOutOfBounds {
                tensor: self.tensor.clone(),
                axis: self.axis,
                start: self.start,
                end: self.end,
                shape: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Flat indices of the slice's elements in a row-major matrix.
    pub fn indices(&self, shape: &[usize]) -> Result<Vec<usize>> {
        self.check(shape)?;
        let (rows, cols) = (shape[0], shape[1]);
        Ok(if self.axis == 0 {
            (self.start * cols..self.end * cols).collect()
        } else {
            (0..rows)
                .flat_map(|r| (self.start..self.end).map(move |c| r * cols + c))
                .collect()
        })
    }

    pub fn numel(&self, shape: &[usize]) -> usize {
        let other = shape[1 - self.axis];
        (self.end - self.start) * other
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoupledGroup {
    pub id: usize,
    pub layer: usize,
    pub kind: GroupKind,
    /// Head or channel index within its layer.
    pub index: usize,
    pub slices: Vec<Slice>,
    pub param_count: usize,
}

/// Group ids of one layer, split by kind.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerGroups {
    pub heads: Vec<usize>,
    pub channels: Vec<usize>,
}

impl LayerGroups {
    pub fn of_kind(&self, kind: GroupKind) -> &[usize] {
        match kind {
            GroupKind::AttnHead => &self.heads,
            GroupKind::MlpChannel => &self.channels,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupGraph {
    pub config_hash: String,
    pub groups: Vec<CoupledGroup>,
    pub layers: Vec<LayerGroups>,
    /// Elements owned by some group.
    pub prunable_params: usize,
    /// All parameters of the model, grouped or not.
    pub total_params: usize,
}

impl GroupGraph {
    pub fn group(&self, id: usize) -> Result<&CoupledGroup> {
        self.groups
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("no group with id {id}")))
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Prunable parameters of layer `l`.
    pub fn layer_params(&self, l: usize) -> usize {
        let lg = &self.layers[l];
        lg.heads
            .iter()
            .chain(&lg.channels)
            .map(|&id| self.groups[id].param_count)
            .sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn total_params(config: &ModelConfig) -> usize {
    crate::model::expected_shapes(config)
        .values()
        .map(|s| s.iter().product::<usize>())
        .sum()
}

/// Enumerates every head and channel, ordered by (layer, kind, index).
pub fn discover_groups(config: &ModelConfig) -> Result<GroupGraph> {
    config.check_head_dims()?;
    let (d, dh) = (config.d_model, config.d_head);
    let mut groups = Vec::new();
    let mut layers = Vec::with_capacity(config.n_layers);
    let mut prunable = 0;
    for l in 0..config.n_layers {
        let w = config.layer(l);
        let mut lg = LayerGroups::default();
        for h in 0..w.n_heads {
            let (s, e) = (h * dh, (h + 1) * dh);
            let slices = vec![
                Slice::new(names::wq(l), 1, s, e),
                Slice::new(names::wk(l), 1, s, e),
                Slice::new(names::wv(l), 1, s, e),
                Slice::new(names::wo(l), 0, s, e),
            ];
            let id = groups.len();
            lg.heads.push(id);
            groups.push(CoupledGroup {
                id,
                layer: l,
                kind: GroupKind::AttnHead,
                index: h,
                slices,
                param_count: 4 * d * dh,
            });
        }
        for c in 0..w.d_mlp {
            let slices = vec![
                Slice::new(names::up(l), 1, c, c + 1),
                Slice::new(names::gate(l), 1, c, c + 1),
                Slice::new(names::down(l), 0, c, c + 1),
            ];
            let id = groups.len();
            lg.channels.push(id);
            groups.push(CoupledGroup {
                id,
                layer: l,
                kind: GroupKind::MlpChannel,
                index: c,
                slices,
                param_count: 3 * d,
            });
        }
        prunable += w.n_heads * 4 * d * dh + w.d_mlp * 3 * d;
        layers.push(lg);
    }
    Ok(GroupGraph {
        config_hash: config.hash(),
        groups,
        layers,
        prunable_params: prunable,
        total_params: total_params(config),
    })
}

/// Values of every slice of `group`, in slice order.
pub fn read_group<T: Scalar>(model: &Model<T>, group: &CoupledGroup) -> Result<Vec<Vec<T>>> {
    group
        .slices
        .iter()
        .map(|s| {
            let t = model.param(&s.tensor)?;
            Ok(s.indices(t.shape())?.into_iter().map(|i| t.data()[i]).collect())
        })
        .collect()
}

/// Writes back values previously obtained from [`read_group`].
pub fn write_group<T: Scalar>(model: &mut Model<T>, group: &CoupledGroup, values: &[Vec<T>]) -> Result<()> {
    if values.len() != group.slices.len() {
        return Err(Error::InvalidArgument("slice count mismatch".into()));
    }
    for (s, vals) in group.slices.iter().zip(values) {
        let t = model.param_mut(&s.tensor)?;
        let idx = s.indices(t.shape())?;
        if idx.len() != vals.len() {
            return Err(Error::InvalidArgument(format!("value count mismatch for {}", s.tensor)));
        }
        let data = t.data_mut();
        for (i, v) in idx.into_iter().zip(vals) {
            data[i] = *v;
        }
    }
    Ok(())
}

/// Copy of `model` with every slice of `group` set to zero.
pub fn mask_group<T: Scalar>(model: &Model<T>, group: &CoupledGroup) -> Result<Model<T>> {
    mask_groups(model, std::slice::from_ref(group))
}

pub fn mask_groups<T: Scalar>(model: &Model<T>, groups: &[CoupledGroup]) -> Result<Model<T>> {
    if let Some(g) = groups.iter().find(|g| g.slices.is_empty()) {
        return Err(Error::EmptyGroup { group: g.id });
    }
    let mut out = model.clone();
    for g in groups {
        let zeros: Vec<Vec<T>> = g
            .slices
            .iter()
            .map(|s| {
                let shape = model.param(&s.tensor)?.shape().to_vec();
                s.check(&shape)?;
                Ok(vec![T::zero(); s.numel(&shape)])
            })
            .collect::<Result<_>>()?;
        write_group(&mut out, g, &zeros)?;
    }
    Ok(out)
}

/// Squared L2 norm over all of a group's slices.
pub fn group_sq_norm<T: Scalar>(model: &Model<T>, group: &CoupledGroup) -> Result<f64> {
    Ok(read_group(model, group)?
        .iter()
        .flatten()
        .map(|v| v.as_f64() * v.as_f64())
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: usize,
    pub layer: usize,
    pub kind: GroupKind,
    pub max_diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndependenceReport {
    pub checks: Vec<GroupCheck>,
    pub max_diff: f64,
    pub tolerance: f64,
}

pub const EQUIVALENCE_TOL: f64 = 1e-5;

/// Largest logit difference between two models over the probe sequences.
pub fn logit_gap<T: Scalar>(a: &Model<T>, b: &Model<T>, probes: &[Vec<u32>]) -> Result<f64> {
    let mut worst = 0f64;
    for p in probes {
        let d = forward_logits(a, p)?.max_abs_diff(&forward_logits(b, p)?);
        worst = worst.max(if d.is_nan() { f64::INFINITY } else { d });
    }
    Ok(worst)
}

/// For `k` sampled groups, checks that zeroing a group and physically
/// removing it give the same logits on the probe sequences. Groups that
/// are the last of their kind in a layer cannot be removed and are skipped.
pub fn verify_group_independence<T: Scalar>(
    model: &Model<T>,
    graph: &GroupGraph,
    probes: &[Vec<u32>],
    k: usize,
    seed: u64,
) -> Result<IndependenceReport> {
    let mut candidates: Vec<&CoupledGroup> = graph
        .groups
        .iter()
        .filter(|g| graph.layers[g.layer].of_kind(g.kind).len() > 1)
        .collect();
    candidates.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    candidates.truncate(k);
    candidates.sort_by_key(|g| g.id);

    let mut checks = Vec::with_capacity(candidates.len());
    let mut max_diff = 0f64;
    for g in candidates {
        let masked = mask_group(model, g)?;
        let removed = remove_groups(model, graph, &[g.id])?;
        let diff = logit_gap(&masked, &removed, probes)?;
        if diff > EQUIVALENCE_TOL {
            return Err(Error::EquivalenceViolation {
                group: g.id,
                layer: g.layer,
                kind: g.kind,
                max_diff: diff,
            });
        }
        max_diff = max_diff.max(diff);
        checks.push(GroupCheck {
            group: g.id,
            layer: g.layer,
            kind: g.kind,
            max_diff: diff,
        });
    }
    Ok(IndependenceReport {
        checks,
        max_diff,
        tolerance: EQUIVALENCE_TOL,
    })
}
