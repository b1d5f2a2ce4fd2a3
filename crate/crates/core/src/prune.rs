//! Physical removal of heads and channels, and parameter accounting.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use saap_autodiff::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groups::{GroupGraph, GroupKind};
use crate::model::{names, LayerWidths, Model};
use crate::plan::{BudgetMode, Protection, PruningPlan};

/// Fewest heads and MLP channels the planner leaves in a layer.
pub const MIN_HEADS: usize = 1;
pub const MIN_CHANNELS: usize = 4;

/// Survivor minimum for a layer that started with `width` groups of `kind`.
pub fn survivor_minimum(kind: GroupKind, width: usize) -> usize {
    match kind {
        GroupKind::AttnHead => MIN_HEADS.min(width),
        GroupKind::MlpChannel => MIN_CHANNELS.min(width),
    }
}

pub fn count_params<T: Scalar>(model: &Model<T>) -> usize {
    model.count_params()
}

fn gather_cols<T: Scalar>(t: &Tensor<T>, keep: &[usize]) -> Result<Tensor<T>> {
    let (rows, cols) = (t.rows(), t.cols());
    let mut out = Vec::with_capacity(rows * keep.len());
    for r in 0..rows {
        let row = &t.data()[r * cols..(r + 1) * cols];
        out.extend(keep.iter().map(|&c| row[c]));
    }
    Ok(Tensor::new(vec![rows, keep.len()], out)?)
}

fn gather_rows<T: Scalar>(t: &Tensor<T>, keep: &[usize]) -> Result<Tensor<T>> {
    let cols = t.cols();
    let mut out = Vec::with_capacity(keep.len() * cols);
    for &r in keep {
        out.extend_from_slice(t.row(r));
    }
    Ok(Tensor::new(vec![keep.len(), cols], out)?)
}

/// Removes the given groups, compacting every affected tensor and updating
/// the per-layer widths. Each layer must keep at least one head and one
/// channel.
pub fn remove_groups<T: Scalar>(model: &Model<T>, graph: &GroupGraph, ids: &[usize]) -> Result<Model<T>> {
    if graph.config_hash != model.config.hash() {
        return Err(Error::PlanMismatch("group graph was discovered on a different config".into()));
    }
    let mut removed: Vec<(BTreeSet<usize>, BTreeSet<usize>)> =
        vec![Default::default(); model.config.n_layers];
    for &id in ids {
        let g = graph.group(id)?;
        let slot = &mut removed[g.layer];
        match g.kind {
            GroupKind::AttnHead => slot.0.insert(g.index),
            GroupKind::MlpChannel => slot.1.insert(g.index),
        };
    }
    let (mut config, mut params) = model.clone().into_parts();
    let dh = config.d_head;
    for (l, (heads, channels)) in removed.iter().enumerate() {
        if heads.is_empty() && channels.is_empty() {
            continue;
        }
        let w = config.layer(l);
        let keep_heads: Vec<usize> = (0..w.n_heads).filter(|h| !heads.contains(h)).collect();
        let keep_channels: Vec<usize> = (0..w.d_mlp).filter(|c| !channels.contains(c)).collect();
        for (kind, kept) in [
            (GroupKind::AttnHead, keep_heads.len()),
            (GroupKind::MlpChannel, keep_channels.len()),
        ] {
            if kept == 0 {
                return Err(Error::SurvivorMinimum {
                    layer: l,
                    kind,
                    kept,
                    minimum: 1,
                });
            }
        }
        if !heads.is_empty() {
            let cols: Vec<usize> = keep_heads
                .iter()
                .flat_map(|&h| h * dh..(h + 1) * dh)
                .collect();
            for name in [names::wq(l), names::wk(l), names::wv(l)] {
                let t = gather_cols(&params[&name], &cols)?;
                params.insert(name, t);
            }
            let t = gather_rows(&params[&names::wo(l)], &cols)?;
            params.insert(names::wo(l), t);
        }
        if !channels.is_empty() {
            for name in [names::up(l), names::gate(l)] {
                let t = gather_cols(&params[&name], &keep_channels)?;
                params.insert(name, t);
            }
            let t = gather_rows(&params[&names::down(l)], &keep_channels)?;
            params.insert(names::down(l), t);
        }
        config.layers[l] = LayerWidths {
            n_heads: keep_heads.len(),
            d_mlp: keep_channels.len(),
        };
    }
    Model::from_parts(config, params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRemoval {
    pub layer: usize,
    pub heads: Vec<usize>,
    pub channels: Vec<usize>,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeDiff {
    pub tensor: String,
    pub before: Vec<usize>,
    pub after: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub params_before: usize,
    pub params_after: usize,
    pub removed_params: usize,
    pub layers: Vec<LayerRemoval>,
    /// Removed parameters over the prunable parameters of the graph.
    pub achieved_ratio: f64,
    pub shape_diffs: Vec<ShapeDiff>,
    pub wall_time_ms: f64,
}

/// Checks a plan against the graph and model it is about to be applied to.
pub fn validate_plan(graph: &GroupGraph, plan: &PruningPlan) -> Result<()> {
    if plan.config_hash != graph.config_hash {
        return Err(Error::PlanMismatch("plan was made for a different config".into()));
    }
    let protected: BTreeSet<usize> = plan.protected_layers.iter().copied().collect();
    let mut seen = BTreeSet::new();
    let mut per_kind: BTreeMap<(usize, GroupKind), usize> = BTreeMap::new();
    for s in &plan.selected {
        let g = graph.group(s.id)?;
        if g.layer != s.layer || g.kind != s.kind || g.param_count != s.param_count {
            return Err(Error::PlanMismatch(format!("group {} does not match the graph", s.id)));
        }
        if !seen.insert(s.id) {
            return Err(Error::PlanMismatch(format!("group {} selected twice", s.id)));
        }
        if protected.contains(&g.layer) {
            return Err(Error::PlanMismatch(format!(
                "group {} lies in protected layer {}",
                s.id, g.layer
            )));
        }
        *per_kind.entry((g.layer, g.kind)).or_default() += 1;
    }
    for ((layer, kind), n) in per_kind {
        let width = graph.layers[layer].of_kind(kind).len();
        let minimum = survivor_minimum(kind, width);
        if width - n < minimum {
            return Err(Error::SurvivorMinimum {
                layer,
                kind,
                kept: width - n,
                minimum,
            });
        }
    }
    Ok(())
}

/// Applies a validated plan.
pub fn apply_plan<T: Scalar>(
    model: &Model<T>,
    graph: &GroupGraph,
    plan: &PruningPlan,
) -> Result<(Model<T>, PruneReport)> {
    let start = Instant::now();
    validate_plan(graph, plan)?;
    let ids: Vec<usize> = plan.selected.iter().map(|s| s.id).collect();
    let pruned = remove_groups(model, graph, &ids)?;

    let mut layers: BTreeMap<usize, LayerRemoval> = BTreeMap::new();
    for &id in &ids {
        let g = &graph.groups[id];
        let e = layers.entry(g.layer).or_insert_with(|| LayerRemoval {
            layer: g.layer,
            heads: vec![],
            channels: vec![],
            params: 0,
        });
        match g.kind {
            GroupKind::AttnHead => e.heads.push(g.index),
            GroupKind::MlpChannel => e.channels.push(g.index),
        }
        e.params += g.param_count;
    }
    for e in layers.values_mut() {
        e.heads.sort_unstable();
        e.channels.sort_unstable();
    }
    let shape_diffs = model
        .params()
        .iter()
        .filter_map(|(name, t)| {
            let after = pruned.params()[name].shape();
            (after != t.shape()).then(|| ShapeDiff {
                tensor: name.clone(),
                before: t.shape().to_vec(),
                after: after.to_vec(),
            })
        })
        .collect();
    let removed_params: usize = ids.iter().map(|&id| graph.groups[id].param_count).sum();
    let report = PruneReport {
        params_before: model.count_params(),
        params_after: pruned.count_params(),
        removed_params,
        layers: layers.into_values().collect(),
        achieved_ratio: removed_params as f64 / graph.prunable_params as f64,
        shape_diffs,
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    debug_assert_eq!(report.params_after, report.params_before - removed_params);
    Ok((pruned, report))
}

/// Architecture metadata sufficient for parameter accounting without weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutMeta {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub tie_embeddings: bool,
    /// Learned position table rows; zero for rotary models.
    pub pos_embeddings: usize,
}

impl LayoutMeta {
    pub fn llama_7b() -> Self {
        LayoutMeta {
            d_model: 4096,
            n_layers: 32,
            n_heads: 32,
            d_mlp: 11008,
            vocab_size: 32000,
            tie_embeddings: false,
            pos_embeddings: 0,
        }
    }

    pub fn from_config(config: &crate::model::ModelConfig) -> Self {
        LayoutMeta {
            d_model: config.d_model,
            n_layers: config.n_layers,
            n_heads: config.n_heads,
            d_mlp: config.d_mlp,
            vocab_size: config.vocab_size,
            tie_embeddings: config.tie_embeddings,
            pos_embeddings: config.max_seq_len,
        }
    }

    /// Projection parameters of one layer.
    pub fn layer_prunable(&self) -> usize {
        4 * self.d_model * self.d_model + 3 * self.d_model * self.d_mlp
    }

    pub fn embedding_params(&self) -> usize {
        let head = if self.tie_embeddings { 0 } else { self.vocab_size * self.d_model };
        (self.vocab_size + self.pos_embeddings) * self.d_model + head
    }

    pub fn norm_params(&self) -> usize {
        (2 * self.n_layers + 1) * self.d_model
    }

    pub fn total_params(&self) -> usize {
        self.n_layers * self.layer_prunable() + self.embedding_params() + self.norm_params()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccountingOptions {
    pub ratio: f64,
    pub protection: Protection,
    pub mode: BudgetMode,
    pub include_embeddings: bool,
    pub include_norms: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub base_params: usize,
    pub ratio_base: usize,
    pub per_layer_ratio: f64,
    pub removed_params: usize,
    pub projected_params: usize,
}

/// Projected parameter counts after pruning, assuming each unprotected
/// layer loses exactly its budget.
pub fn ratio_accounting(layout: &LayoutMeta, opts: &AccountingOptions) -> Result<Projection> {
    let protected = opts.protection.layers(layout.n_layers);
    let open = layout.n_layers - protected.len();
    if open == 0 && opts.ratio > 0.0 {
        return Err(Error::InfeasibleRatio("every layer is protected".into()));
    }
    let layer = layout.layer_prunable();
    let mut ratio_base = layout.n_layers * layer;
    if opts.include_embeddings {
        ratio_base += layout.embedding_params();
    }
    if opts.include_norms {
        ratio_base += layout.norm_params();
    }
    let per_layer_ratio = if opts.ratio == 0.0 {
        0.0
    } else {
        match opts.mode {
            BudgetMode::Proportional => opts.ratio * ratio_base as f64 / (open * layer) as f64,
            BudgetMode::Fixed { layer_ratio } => layer_ratio,
        }
    };
    if per_layer_ratio >= 1.0 {
        return Err(Error::InfeasibleRatio(format!(
            "unprotected layers would lose {:.1}% of their parameters",
            per_layer_ratio * 100.0
        )));
    }
    let removed = (per_layer_ratio * (open * layer) as f64).round() as usize;
    let base = layout.total_params();
    Ok(Projection {
        base_params: base,
        ratio_base,
        per_layer_ratio,
        removed_params: removed,
        projected_params: base - removed,
    })
}
