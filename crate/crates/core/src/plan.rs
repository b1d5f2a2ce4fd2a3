//! Volatility-based structure search: fluctuation, stability indicator,
//! and budgeted selection of the groups to remove.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saap_autodiff::Scalar;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusedScores;
use crate::groups::{group_sq_norm, GroupGraph, GroupKind};
use crate::importance::SampleScores;
use crate::model::Model;
use crate::prune::survivor_minimum;

pub const PLAN_VERSION: u32 = 1;

/// Sample variance (`n − 1` denominator) times the squared weight norm.
pub fn fluctuation_of(samples: &[f64], sq_norm: f64) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let ss: f64 = samples.iter().map(|x| (x - mean) * (x - mean)).sum();
    Ok(ss / (n - 1.0) * sq_norm)
}

/// Fluctuation of every fused-score column.
pub fn fluctuation<T: Scalar>(fused: &FusedScores, model: &Model<T>, graph: &GroupGraph) -> Result<Vec<f64>> {
    fluctuation_of_matrix(&fused.values, &fused.group_ids, model, graph)
}

fn fluctuation_of_matrix<T: Scalar>(
    matrix: &[Vec<f64>],
    group_ids: &[usize],
    model: &Model<T>,
    graph: &GroupGraph,
) -> Result<Vec<f64>> {
    group_ids
        .iter()
        .enumerate()
        .map(|(j, &id)| {
            let col = SampleScores::column(matrix, j);
            fluctuation_of(&col, group_sq_norm(model, graph.group(id)?)?)
        })
        .collect()
}

/// Z-score with the population standard deviation. A population with zero
/// spread maps to all zeros.
pub fn standardize(values: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 0.0) || std <= mean.abs() * 1e-15 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / std).collect()
}

/// Which groups are standardized together.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Population {
    Global,
    PerLayer,
    #[default]
    PerLayerKind,
}

impl FromStr for Population {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Population::Global),
            "per-layer" => Ok(Population::PerLayer),
            "per-layer-kind" => Ok(Population::PerLayerKind),
            other => Err(Error::InvalidArgument(format!("unknown population `{other}`"))),
        }
    }
}

/// Standardizes `values[j]` (belonging to group `group_ids[j]`) within
/// each population.
pub fn standardize_by(values: &[f64], group_ids: &[usize], graph: &GroupGraph, population: Population) -> Result<Vec<f64>> {
    let mut buckets: BTreeMap<(usize, Option<GroupKind>), Vec<usize>> = BTreeMap::new();
    for (j, &id) in group_ids.iter().enumerate() {
        let g = graph.group(id)?;
        let key = match population {
            Population::Global => (0, None),
            Population::PerLayer => (g.layer, None),
            Population::PerLayerKind => (g.layer, Some(g.kind)),
        };
        buckets.entry(key).or_default().push(j);
    }
    let mut out = vec![0.0; values.len()];
    for cols in buckets.values() {
        let z = standardize(&cols.iter().map(|&j| values[j]).collect::<Vec<_>>());
        for (&j, v) in cols.iter().zip(z) {
            out[j] = v;
        }
    }
    Ok(out)
}

/// What orders groups for removal. Higher stability indicator goes first.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Ranking {
    /// Standardized fluctuation of the fused scores.
    #[default]
    Asi,
    /// Mean of the standardized fluctuations of each score family, no fusion.
    SeparateCal,
    /// Lowest mean fused importance first.
    NoAsi,
    /// Uniformly random order.
    Random { seed: u64 },
}

/// Per-group quantities that drive selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityRecord {
    pub group_ids: Vec<usize>,
    pub fluctuation: Vec<f64>,
    pub asi: Vec<f64>,
    pub mean_fused: Vec<f64>,
    pub population: Population,
    pub ranking: Ranking,
}

fn column_means(matrix: &[Vec<f64>], n: usize) -> Vec<f64> {
    (0..n)
        .map(|j| matrix.iter().map(|r| r[j]).sum::<f64>() / matrix.len() as f64)
        .collect()
}

pub fn stability<T: Scalar>(
    scores: &SampleScores,
    fused: &FusedScores,
    model: &Model<T>,
    graph: &GroupGraph,
    population: Population,
    ranking: Ranking,
) -> Result<StabilityRecord> {
    let ids = &fused.group_ids;
    let mean_fused = column_means(&fused.values, ids.len());
    let (fluct, asi) = match ranking {
        Ranking::Asi => {
            let m = fluctuation(fused, model, graph)?;
            let asi = standardize_by(&m, ids, graph, population)?;
            (m, asi)
        }
        Ranking::SeparateCal => {
            let mv = fluctuation_of_matrix(&scores.vector, ids, model, graph)?;
            let me = fluctuation_of_matrix(&scores.element, ids, model, graph)?;
            let zv = standardize_by(&mv, ids, graph, population)?;
            let ze = standardize_by(&me, ids, graph, population)?;
            let m = mv.iter().zip(&me).map(|(a, b)| 0.5 * (a + b)).collect();
            let asi = zv.iter().zip(&ze).map(|(a, b)| 0.5 * (a + b)).collect();
            (m, asi)
        }
        Ranking::NoAsi => {
            let neg: Vec<f64> = mean_fused.iter().map(|v| -v).collect();
            let asi = standardize_by(&neg, ids, graph, population)?;
            (vec![0.0; ids.len()], asi)
        }
        Ranking::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r: Vec<f64> = ids.iter().map(|_| rng.gen::<f64>()).collect();
            (vec![0.0; ids.len()], r)
        }
    };
    Ok(StabilityRecord {
        group_ids: ids.clone(),
        fluctuation: fluct,
        asi,
        mean_fused,
        population,
        ranking,
    })
}

/// Layers exempt from pruning: the first `first` and the last `last`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protection {
    pub first: usize,
    pub last: usize,
}

impl Protection {
    pub const NONE: Protection = Protection { first: 0, last: 0 };

    pub fn new(first: usize, last: usize) -> Self {
        Protection { first, last }
    }

    pub fn layers(&self, n_layers: usize) -> BTreeSet<usize> {
        (0..self.first.min(n_layers))
            .chain(n_layers.saturating_sub(self.last)..n_layers)
            .collect()
    }
}

impl Default for Protection {
    fn default() -> Self {
        Protection { first: 3, last: 1 }
    }
}

impl fmt::Display for Protection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.first, self.last)
    }
}

impl FromStr for Protection {
    type Err = Error;
    /// `"first,last"`, e.g. `"3,1"`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("protection `{s}` is not `first,last`"));
        let (a, b) = s.split_once(',').ok_or_else(bad)?;
        Ok(Protection {
            first: a.trim().parse().map_err(|_| bad())?,
            last: b.trim().parse().map_err(|_| bad())?,
        })
    }
}

/// How the global budget reaches individual layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum BudgetMode {
    /// Global budget spread over unprotected layers in proportion to their
    /// prunable parameters.
    #[default]
    Proportional,
    /// Every unprotected layer loses the same fixed fraction.
    Fixed { layer_ratio: f64 },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanOptions {
    pub budget: BudgetMode,
    /// Seeds recorded for provenance (name → value).
    pub seeds: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerBudget {
    pub layer: usize,
    pub budget: f64,
    pub selected_params: usize,
    pub heads: usize,
    pub channels: usize,
    pub shortfall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedGroup {
    pub id: usize,
    pub layer: usize,
    pub kind: GroupKind,
    pub asi: f64,
    pub param_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seeds: BTreeMap<String, u64>,
    pub population: Population,
    pub ranking: Ranking,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub version: u32,
    pub config_hash: String,
    pub ratio: f64,
    pub budget_mode: BudgetMode,
    pub protected_layers: Vec<usize>,
    pub layer_budgets: Vec<LayerBudget>,
    /// Ordered by stability indicator, highest first.
    pub selected: Vec<SelectedGroup>,
    pub prunable_params: usize,
    pub removed_params: usize,
    pub achieved_ratio: f64,
    pub provenance: Provenance,
}

impl PruningPlan {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let plan: PruningPlan = serde_json::from_str(s)?;
        if plan.version != PLAN_VERSION {
            return Err(Error::Validation(format!(
                "plan schema version {} (expected {PLAN_VERSION})",
                plan.version
            )));
        }
        Ok(plan)
    }

    pub fn selected_ids(&self) -> Vec<usize> {
        self.selected.iter().map(|s| s.id).collect()
    }
}

/// Removal order: higher stability indicator first, then lower mean fused
/// importance, then lower id.
pub fn removal_order(asi_a: f64, fused_a: f64, id_a: usize, asi_b: f64, fused_b: f64, id_b: usize) -> Ordering {
    asi_b
        .total_cmp(&asi_a)
        .then(fused_a.total_cmp(&fused_b))
        .then(id_a.cmp(&id_b))
}

/// Picks the groups to remove.
///
/// Each unprotected layer receives a parameter budget, split between heads
/// and channels in proportion to their parameter share. Heads are chosen
/// first; whatever the head budget could not use passes to the channels of
/// the same layer. A budget is never exceeded, and every layer keeps its
/// survivor minimums.
pub fn plan_pruning(
    record: &StabilityRecord,
    graph: &GroupGraph,
    ratio: f64,
    protection: Protection,
    options: &PlanOptions,
) -> Result<PruningPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InfeasibleRatio(format!("ratio {ratio} outside [0, 1)")));
    }
    let n_layers = graph.layers.len();
    let protected = protection.layers(n_layers);
    let open: Vec<usize> = (0..n_layers).filter(|l| !protected.contains(l)).collect();
    if open.is_empty() {
        return Err(Error::InfeasibleRatio("protection leaves no prunable layer".into()));
    }
    let column: BTreeMap<usize, usize> = record.group_ids.iter().enumerate().map(|(j, &id)| (id, j)).collect();
    if graph.groups.iter().any(|g| !column.contains_key(&g.id)) {
        return Err(Error::PlanMismatch("stability record misses some groups".into()));
    }

    let open_params: usize = open.iter().map(|&l| graph.layer_params(l)).sum();
    let budget_of = |l: usize| -> f64 {
        if ratio == 0.0 {
            return 0.0;
        }
        let lp = graph.layer_params(l) as f64;
        match options.budget {
            BudgetMode::Proportional => ratio * graph.prunable_params as f64 * lp / open_params as f64,
            BudgetMode::Fixed { layer_ratio } => layer_ratio * lp,
        }
    };

    let capacity = |l: usize, kind: GroupKind| -> usize {
        let ids = graph.layers[l].of_kind(kind);
        let keep = survivor_minimum(kind, ids.len());
        ids.iter()
            .take(ids.len() - keep)
            .map(|&id| graph.groups[id].param_count)
            .sum()
    };
    for &l in &open {
        let cap = capacity(l, GroupKind::AttnHead) + capacity(l, GroupKind::MlpChannel);
        let b = budget_of(l);
        if b > cap as f64 + 0.5 {
            return Err(Error::InfeasibleRatio(format!(
                "layer {l} budget {b:.0} exceeds the {cap} parameters removable under survivor minimums"
            )));
        }
    }

    let ranked = |ids: &[usize]| -> Vec<usize> {
        let mut v = ids.to_vec();
        v.sort_by(|&a, &b| {
            let (ja, jb) = (column[&a], column[&b]);
            removal_order(
                record.asi[ja],
                record.mean_fused[ja],
                a,
                record.asi[jb],
                record.mean_fused[jb],
                b,
            )
        });
        v
    };

    let mut layer_budgets = Vec::with_capacity(open.len());
    let mut selected = Vec::new();
    for &l in &open {
        let budget = budget_of(l);
        let lg = &graph.layers[l];
        let attn_params: usize = lg.heads.iter().map(|&id| graph.groups[id].param_count).sum();
        let layer_params = graph.layer_params(l);
        let mut remaining = budget;
        let mut counts = [0usize; 2];
        let mut used = 0usize;
        let attn_share = budget * attn_params as f64 / layer_params as f64;
        for (k, (kind, share)) in [(GroupKind::AttnHead, attn_share), (GroupKind::MlpChannel, f64::INFINITY)]
            .into_iter()
            .enumerate()
        {
            let ids = lg.of_kind(kind);
            if ids.is_empty() {
                continue;
            }
            let size = graph.groups[ids[0]].param_count;
            let allowance = share.min(remaining);
            let max_take = ids.len() - survivor_minimum(kind, ids.len());
            let take = ((allowance / size as f64 + 1e-9).floor() as usize).min(max_take);
            for id in ranked(ids).into_iter().take(take) {
                let j = column[&id];
                selected.push(SelectedGroup {
                    id,
                    layer: l,
                    kind,
                    asi: record.asi[j],
                    param_count: size,
                });
            }
            counts[k] = take;
            used += take * size;
            remaining = budget - used as f64;
        }
        layer_budgets.push(LayerBudget {
            layer: l,
            budget,
            selected_params: used,
            heads: counts[0],
            channels: counts[1],
            shortfall: (budget - used as f64).max(0.0),
        });
    }
    selected.sort_by(|a, b| {
        let (ja, jb) = (column[&a.id], column[&b.id]);
        removal_order(a.asi, record.mean_fused[ja], a.id, b.asi, record.mean_fused[jb], b.id)
    });
    let removed: usize = selected.iter().map(|s| s.param_count).sum();
    Ok(PruningPlan {
        version: PLAN_VERSION,
        config_hash: graph.config_hash.clone(),
        ratio,
        budget_mode: options.budget,
        protected_layers: protected.into_iter().collect(),
        layer_budgets,
        selected,
        prunable_params: graph.prunable_params,
        removed_params: removed,
        achieved_ratio: removed as f64 / graph.prunable_params as f64,
        provenance: Provenance {
            seeds: options.seeds.clone(),
            population: record.population,
            ranking: record.ranking,
        },
    })
}
