//! Per-calibration-sample importance of every group.
//!
//! For a group with weights `w` and single-sample gradient `g`:
//! the vector score is `|Σ g·w|`, the first-order Taylor estimate of the
//! loss change when the whole group is zeroed; the element score is
//! `Σ_e |g_e·w_e − ½(g_e·w_e)²|`, the per-element Taylor estimate with an
//! empirical-Fisher curvature term.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use saap_autodiff::{backward, GradientMap, Scalar, Tape};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groups::{CoupledGroup, GroupGraph};
use crate::model::{loss_graph, Model, Trainable};

/// Calibration sequences used only to probe gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub samples: Vec<Vec<u32>>,
    pub seq_len: usize,
    pub source: String,
    pub seed: u64,
}

impl CalibrationSet {
    /// At least two samples of one common length are required: the
    /// fluctuation statistic uses the `D − 1` sample variance.
    pub fn new(samples: Vec<Vec<u32>>, source: impl Into<String>, seed: u64) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::TooFewSamples {
                needed: 2,
                got: samples.len(),
            });
        }
        let seq_len = samples[0].len();
        if seq_len < 2 || samples.iter().any(|s| s.len() != seq_len) {
            return Err(Error::InvalidArgument(
                "calibration samples must share one length of at least 2".into(),
            ));
        }
        Ok(CalibrationSet {
            samples,
            seq_len,
            source: source.into(),
            seed,
        })
    }

    /// `count` random windows of `seq_len` tokens from `corpus`.
    pub fn sample(
        corpus: &[u32],
        count: usize,
        seq_len: usize,
        seed: u64,
        source: impl Into<String>,
    ) -> Result<Self> {
        if corpus.len() < seq_len {
            return Err(Error::CorpusTooSmall {
                tokens: corpus.len(),
                needed: seq_len,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let span = corpus.len() - seq_len + 1;
        let samples = (0..count)
            .map(|_| {
                let s = rng.gen_range(0..span);
                corpus[s..s + seq_len].to_vec()
            })
            .collect();
        Self::new(samples, source, seed)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Gradient of one sample's mean next-token NLL with respect to every weight.
pub fn per_sample_gradients<T: Scalar>(model: &Model<T>, sample: &[u32]) -> Result<GradientMap<T>> {
    let mut tape = Tape::new();
    let loss = loss_graph(&model.config, &mut Trainable::new(model), &mut tape, &[sample])?;
    let grads = backward(&tape, loss)?;
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient {
            tensor: name.to_string(),
        });
    }
    Ok(grads)
}

/// How the vector score treats the second-order term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VectorTerm {
    /// `|Σ g·w|`
    #[default]
    FirstOrder,
    /// `|Σ g·w − ½ Σ (g·w)²|`, a diagonal-Fisher stand-in for the Hessian.
    DiagonalFisher,
}

/// Source of the Fisher term in the element score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FisherMode {
    /// Curvature from the scored sample alone.
    #[default]
    PerSample,
    /// Curvature summed over the whole calibration set, shared by all rows.
    Pooled,
}

/// Reduction of per-element magnitudes to one group score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    Sum,
    Max,
    Prod,
}

impl Aggregation {
    fn reduce(self, values: impl Iterator<Item = f64>) -> f64 {
        match self {
            Aggregation::Sum => values.sum(),
            Aggregation::Max => values.fold(0.0, f64::max),
            Aggregation::Prod => values.product(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreOptions {
    pub vector: VectorTerm,
    pub fisher: FisherMode,
    pub aggregation: Aggregation,
}

/// `g_e·w_e` for every element of the group, slice by slice.
fn taylor_terms<T: Scalar>(grads: &GradientMap<T>, model: &Model<T>, group: &CoupledGroup) -> Result<Vec<f64>> {
    if group.slices.is_empty() {
        return Err(Error::EmptyGroup { group: group.id });
    }
    let mut out = Vec::with_capacity(group.param_count);
    for s in &group.slices {
        let w = model.param(&s.tensor)?;
        let g = grads
            .get(&s.tensor)
            .ok_or_else(|| Error::InvalidArgument(format!("no gradient for `{}`", s.tensor)))?;
        if g.shape() != w.shape() {
            return Err(Error::InvalidArgument(format!(
                "gradient and weight shapes differ for `{}`",
                s.tensor
            )));
        }
        for i in s.indices(w.shape())? {
            out.push(g.data()[i].as_f64() * w.data()[i].as_f64());
        }
    }
    Ok(out)
}

pub fn vector_score<T: Scalar>(grads: &GradientMap<T>, model: &Model<T>, group: &CoupledGroup) -> Result<f64> {
    vector_score_with(grads, model, group, VectorTerm::FirstOrder)
}

pub fn vector_score_with<T: Scalar>(
    grads: &GradientMap<T>,
    model: &Model<T>,
    group: &CoupledGroup,
    term: VectorTerm,
) -> Result<f64> {
    let gw = taylor_terms(grads, model, group)?;
    let first: f64 = gw.iter().sum();
    Ok(match term {
        VectorTerm::FirstOrder => first.abs(),
        VectorTerm::DiagonalFisher => (first - 0.5 * gw.iter().map(|t| t * t).sum::<f64>()).abs(),
    })
}

pub fn element_score<T: Scalar>(grads: &GradientMap<T>, model: &Model<T>, group: &CoupledGroup) -> Result<f64> {
    let gw = taylor_terms(grads, model, group)?;
    Ok(Aggregation::Sum.reduce(gw.iter().map(|t| (t - 0.5 * t * t).abs())))
}

/// D×G score matrices; row `d` is calibration sample `sample_ids[d]`,
/// column `j` is group `group_ids[j]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub group_ids: Vec<usize>,
    pub sample_ids: Vec<usize>,
    pub vector: Vec<Vec<f64>>,
    pub element: Vec<Vec<f64>>,
    pub options: ScoreOptions,
}

impl SampleScores {
    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn n_groups(&self) -> usize {
        self.group_ids.len()
    }

    /// Column `j` of a score matrix.
    pub fn column(matrix: &[Vec<f64>], j: usize) -> Vec<f64> {
        matrix.iter().map(|row| row[j]).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Long-form CSV: `metric,sample,<group ids...>`, one row per sample
    /// and metric.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["metric".to_string(), "sample".to_string()];
        header.extend(self.group_ids.iter().map(|g| g.to_string()));
        w.write_record(&header)?;
        for (metric, matrix) in [("vector", &self.vector), ("element", &self.element)] {
            for (d, row) in matrix.iter().enumerate() {
                let mut rec = vec![metric.to_string(), self.sample_ids[d].to_string()];
                rec.extend(row.iter().map(|v| format!("{v:e}")));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-sample Taylor terms for every group.
fn group_terms<T: Scalar>(grads: &GradientMap<T>, model: &Model<T>, graph: &GroupGraph) -> Result<Vec<Vec<f64>>> {
    graph
        .groups
        .iter()
        .map(|g| taylor_terms(grads, model, g))
        .collect()
}

/// Scores every group under every calibration sample. Samples are
/// processed in parallel; rows are assembled in sample order.
pub fn estimate<T: Scalar>(
    model: &Model<T>,
    graph: &GroupGraph,
    calib: &CalibrationSet,
    opts: ScoreOptions,
) -> Result<SampleScores> {
    if calib.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: calib.len(),
        });
    }
    if graph.config_hash != model.config.hash() {
        return Err(Error::PlanMismatch("group graph was discovered on a different config".into()));
    }
    let terms: Vec<Vec<Vec<f64>>> = calib
        .samples
        .par_iter()
        .map(|s| {
            let grads = per_sample_gradients(model, s)?;
            group_terms(&grads, model, graph)
        })
        .collect::<Result<_>>()?;

    let pooled: Option<Vec<Vec<f64>>> = (opts.fisher == FisherMode::Pooled).then(|| {
        (0..graph.len())
            .map(|j| {
                let n = terms[0][j].len();
                (0..n)
                    .map(|e| terms.iter().map(|t| t[j][e] * t[j][e]).sum())
                    .collect()
            })
            .collect()
    });

    let mut vector = Vec::with_capacity(calib.len());
    let mut element = Vec::with_capacity(calib.len());
    for sample in &terms {
        let mut v_row = Vec::with_capacity(graph.len());
        let mut e_row = Vec::with_capacity(graph.len());
        for (j, gw) in sample.iter().enumerate() {
            let first: f64 = gw.iter().sum();
            let v = match opts.vector {
                VectorTerm::FirstOrder => first.abs(),
                VectorTerm::DiagonalFisher => (first - 0.5 * gw.iter().map(|t| t * t).sum::<f64>()).abs(),
            };
            let e = match &pooled {
                None => opts.aggregation.reduce(gw.iter().map(|t| (t - 0.5 * t * t).abs())),
                Some(p) => opts
                    .aggregation
                    .reduce(gw.iter().zip(&p[j]).map(|(t, sq)| (t - 0.5 * sq).abs())),
            };
            v_row.push(v);
            e_row.push(e);
        }
        vector.push(v_row);
        element.push(e_row);
    }
    Ok(SampleScores {
        group_ids: graph.groups.iter().map(|g| g.id).collect(),
        sample_ids: (0..calib.len()).collect(),
        vector,
        element,
        options: opts,
    })
}
