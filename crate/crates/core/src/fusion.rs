//! Uncertainty-weighted fusion of the vector and element scores.
//!
//! Each score family is treated as a Gaussian observation with its own
//! noise scale λ. The fused score of one group under one sample is
//! `I_V/(2λ_V²) + I_E/(2λ_E²) + ln(λ_V·λ_E)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groups::GroupGraph;
use crate::importance::SampleScores;

pub const VARIANCE_FLOOR: f64 = 1e-12;

/// How the noise scales are obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum LambdaMode {
    /// One λ pair per layer: `λ_k² = mean` of score family `k` over all of
    /// that layer's samples and groups.
    #[default]
    LayerMle,
    /// One λ pair for the whole model.
    GlobalMle,
    /// One λ pair per group, from its own samples.
    PerGroupMle,
    /// Fixed noise scales (not squared).
    Fixed { vector: f64, element: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionPolicy {
    pub mode: LambdaMode,
    pub floor: f64,
}

impl Default for FusionPolicy {
    fn default() -> Self {
        FusionPolicy {
            mode: LambdaMode::LayerMle,
            floor: VARIANCE_FLOOR,
        }
    }
}

impl FusionPolicy {
    pub fn new(mode: LambdaMode) -> Self {
        FusionPolicy {
            mode,
            ..Default::default()
        }
    }
}

/// Squared noise scales of one population.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaPair {
    pub vector_sq: f64,
    pub element_sq: f64,
}

impl LambdaPair {
    pub fn fuse(&self, vector: f64, element: f64) -> f64 {
        vector / (2.0 * self.vector_sq)
            + element / (2.0 * self.element_sq)
            + 0.5 * (self.vector_sq * self.element_sq).ln()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub mode: LambdaMode,
    /// Distinct populations, each with a descriptive label.
    pub populations: Vec<(String, LambdaPair)>,
    /// Population index of every score column.
    pub column_population: Vec<usize>,
}

impl Lambdas {
    pub fn for_column(&self, j: usize) -> LambdaPair {
        self.populations[self.column_population[j]].1
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn mean_of_columns(matrix: &[Vec<f64>], cols: &[usize]) -> Option<f64> {
    mean(matrix.iter().flat_map(|row| cols.iter().map(move |&j| row[j])))
}

/// Fits the noise scales of every population.
pub fn fit_lambdas(scores: &SampleScores, graph: &GroupGraph, policy: &FusionPolicy) -> Result<Lambdas> {
    if scores.n_samples() == 0 || scores.n_groups() == 0 {
        return Err(Error::EmptyPopulation("no scores to fit".into()));
    }
    let floor = policy.floor;
    let fit = |cols: &[usize], label: String| -> Result<(String, LambdaPair)> {
        let v = mean_of_columns(&scores.vector, cols);
        let e = mean_of_columns(&scores.element, cols);
        match (v, e) {
            (Some(v), Some(e)) => Ok((
                label,
                LambdaPair {
                    vector_sq: v.max(floor),
                    element_sq: e.max(floor),
                },
            )),
            _ => Err(Error::EmptyPopulation(label)),
        }
    };
    let n = scores.n_groups();
    let (populations, column_population) = match policy.mode {
        LambdaMode::Fixed { vector, element } => {
            let pair = LambdaPair {
                vector_sq: (vector * vector).max(floor),
                element_sq: (element * element).max(floor),
            };
            (vec![("fixed".to_string(), pair)], vec![0; n])
        }
        LambdaMode::GlobalMle => {
            let all: Vec<usize> = (0..n).collect();
            (vec![fit(&all, "global".into())?], vec![0; n])
        }
        LambdaMode::PerGroupMle => {
            let pops = (0..n)
                .map(|j| fit(&[j], format!("group {}", scores.group_ids[j])))
                .collect::<Result<Vec<_>>>()?;
            (pops, (0..n).collect())
        }
        LambdaMode::LayerMle => {
            let mut cols_of_layer: Vec<Vec<usize>> = vec![Vec::new(); graph.layers.len()];
            for (j, &id) in scores.group_ids.iter().enumerate() {
                cols_of_layer[graph.group(id)?.layer].push(j);
            }
            let mut pops = Vec::new();
            let mut column_population = vec![0; n];
            for (l, cols) in cols_of_layer.iter().enumerate() {
                if cols.is_empty() {
                    continue;
                }
                for &j in cols {
                    column_population[j] = pops.len();
                }
                pops.push(fit(cols, format!("layer {l}"))?);
            }
            (pops, column_population)
        }
    };
    Ok(Lambdas {
        mode: policy.mode,
        populations,
        column_population,
    })
}

/// Fused D×G scores together with the λs used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedScores {
    pub group_ids: Vec<usize>,
    pub values: Vec<Vec<f64>>,
    pub lambdas: Lambdas,
}

pub fn fuse(scores: &SampleScores, lambdas: &Lambdas) -> Result<FusedScores> {
    if lambdas.column_population.len() != scores.n_groups() {
        return Err(Error::InvalidArgument("λ assignment does not cover every group".into()));
    }
    let values = scores
        .vector
        .iter()
        .zip(&scores.element)
        .map(|(v_row, e_row)| {
            v_row
                .iter()
                .zip(e_row)
                .enumerate()
                .map(|(j, (&v, &e))| lambdas.for_column(j).fuse(v, e))
                .collect()
        })
        .collect();
    Ok(FusedScores {
        group_ids: scores.group_ids.clone(),
        values,
        lambdas: lambdas.clone(),
    })
}
