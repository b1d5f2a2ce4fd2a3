//! Perplexity, generation throughput and stage comparisons.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use saap_autodiff::Scalar;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::forward::nll_sum;
use crate::model::{forward_logits, Model};

pub const REPORT_VERSION: u32 = 1;

/// Windows scored together in one forward pass.
const WINDOW_BATCH: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perplexity {
    pub perplexity: f64,
    pub nll: f64,
    /// Predicted positions.
    pub tokens: usize,
    pub windows: usize,
}

/// Splits `corpus` into consecutive non-overlapping windows of `window`
/// tokens, dropping a trailing window shorter than two tokens.
pub fn eval_windows(corpus: &[u32], window: usize, max_windows: Option<usize>) -> Vec<&[u32]> {
    corpus
        .chunks(window.max(2))
        .filter(|w| w.len() >= 2)
        .take(max_windows.unwrap_or(usize::MAX))
        .collect()
}

/// `exp` of the mean next-token NLL over non-overlapping windows of
/// `max_seq_len` tokens. Windows are scored in parallel and summed in order.
pub fn perplexity<T: Scalar>(model: &Model<T>, corpus: &[u32]) -> Result<Perplexity> {
    perplexity_limited(model, corpus, None)
}

pub fn perplexity_limited<T: Scalar>(model: &Model<T>, corpus: &[u32], max_windows: Option<usize>) -> Result<Perplexity> {
    if corpus.len() < 2 {
        return Err(Error::InvalidArgument("perplexity needs at least 2 tokens".into()));
    }
    let windows = eval_windows(corpus, model.config.max_seq_len, max_windows);
    let parts: Vec<(f64, usize)> = windows
        .par_chunks(WINDOW_BATCH)
        .map(|chunk| nll_sum(model, chunk))
        .collect::<Result<_>>()?;
    let (sum, tokens) = parts.iter().fold((0.0, 0), |(s, n), (ps, pn)| (s + ps, n + pn));
    let nll = sum / tokens as f64;
    Ok(Perplexity {
        perplexity: nll.exp(),
        nll,
        tokens,
        windows: windows.len(),
    })
}

/// Greedy continuation of `prompt` by `gen_len` tokens. The context is
/// truncated to the most recent `max_seq_len` tokens.
pub fn generate_greedy<T: Scalar>(model: &Model<T>, prompt: &[u32], gen_len: usize) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("empty prompt".into()));
    }
    let mut tokens = prompt.to_vec();
    let max = model.config.max_seq_len;
    for _ in 0..gen_len {
        let ctx = &tokens[tokens.len().saturating_sub(max)..];
        let logits = forward_logits(model, ctx)?;
        let last = logits.row(logits.rows() - 1);
        let next = last
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.as_f64().total_cmp(&b.1.as_f64()).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i as u32)
            .expect("non-empty vocabulary");
        tokens.push(next);
    }
    Ok(tokens[prompt.len()..].to_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub gen_len: usize,
    /// Tokens per second of each timed run.
    pub runs: Vec<f64>,
    pub median: f64,
    /// `(max − min) / median` over the timed runs.
    pub spread: f64,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times `runs` greedy generations of `gen_len` tokens after one untimed
/// warmup run. Generation is single-threaded.
pub fn throughput<T: Scalar>(model: &Model<T>, prompt: &[u32], gen_len: usize, runs: usize) -> Result<Throughput> {
    if gen_len == 0 {
        return Err(Error::InvalidArgument("generation length must be positive".into()));
    }
    if runs < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 timed runs, got {runs}")));
    }
    generate_greedy(model, prompt, gen_len)?;
    let mut rates = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        generate_greedy(model, prompt, gen_len)?;
        rates.push(gen_len as f64 / start.elapsed().as_secs_f64());
    }
    let med = median(&rates);
    let (lo, hi) = rates
        .iter()
        .fold((f64::INFINITY, 0f64), |(lo, hi), &r| (lo.min(r), hi.max(r)));
    Ok(Throughput {
        gen_len,
        median: med,
        spread: (hi - lo) / med,
        runs: rates,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Base,
    Pruned,
    Recovered,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Base => "base",
            Stage::Pruned => "pruned",
            Stage::Recovered => "recovered",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Stage::Base),
            "pruned" => Ok(Stage::Pruned),
            "recovered" => Ok(Stage::Recovered),
            other => Err(Error::Validation(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub stage: Option<Stage>,
    pub perplexity: f64,
    pub nll: f64,
    pub tokens: usize,
    pub params: usize,
    pub tokens_per_s: Option<f64>,
    pub tokens_per_s_spread: Option<f64>,
    pub config_hash: String,
    pub d_model: usize,
    pub vocab_size: usize,
}

impl EvalReport {
    pub fn new<T: Scalar>(model: &Model<T>, stage: Stage, ppl: &Perplexity, tp: Option<&Throughput>) -> Self {
        EvalReport {
            version: REPORT_VERSION,
            stage: Some(stage),
            perplexity: ppl.perplexity,
            nll: ppl.nll,
            tokens: ppl.tokens,
            params: model.count_params(),
            tokens_per_s: tp.map(|t| t.median),
            tokens_per_s_spread: tp.map(|t| t.spread),
            config_hash: model.config.hash(),
            d_model: model.config.d_model,
            vocab_size: model.config.vocab_size,
        }
    }
}

/// Perplexity (and optionally throughput) of one model as a report.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    stage: Stage,
    corpus: &[u32],
    max_windows: Option<usize>,
    bench: Option<(&[u32], usize, usize)>,
) -> Result<EvalReport> {
    let ppl = perplexity_limited(model, corpus, max_windows)?;
    let tp = match bench {
        Some((prompt, gen_len, runs)) => Some(throughput(model, prompt, gen_len, runs)?),
        None => None,
    };
    Ok(EvalReport::new(model, stage, &ppl, tp.as_ref()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub stage: Stage,
    pub perplexity: f64,
    pub params: usize,
    pub tokens_per_s: Option<f64>,
    /// Relative to the first report.
    pub ppl_delta: f64,
    pub params_delta: i64,
    pub tokens_per_s_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub version: u32,
    pub rows: Vec<ComparisonRow>,
    /// Observations about the set of reports, e.g. incompatibilities.
    pub flags: Vec<String>,
}

pub fn compare(reports: &[EvalReport]) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(Error::Validation(format!("need at least 2 reports, got {}", reports.len())));
    }
    let mut stages = Vec::with_capacity(reports.len());
    for (i, r) in reports.iter().enumerate() {
        if r.version != REPORT_VERSION {
            return Err(Error::Validation(format!("report {i} has schema version {}", r.version)));
        }
        stages.push(r.stage.ok_or_else(|| Error::Validation(format!("report {i} has no stage tag")))?);
    }
    let first = &reports[0];
    let rows: Vec<ComparisonRow> = reports
        .iter()
        .zip(&stages)
        .map(|(r, &stage)| ComparisonRow {
            stage,
            perplexity: r.perplexity,
            params: r.params,
            tokens_per_s: r.tokens_per_s,
            ppl_delta: r.perplexity - first.perplexity,
            params_delta: r.params as i64 - first.params as i64,
            tokens_per_s_ratio: r.tokens_per_s.zip(first.tokens_per_s).map(|(a, b)| a / b),
        })
        .collect();
    let mut flags = Vec::new();
    if reports
        .iter()
        .any(|r| r.d_model != first.d_model || r.vocab_size != first.vocab_size)
    {
        flags.push("incompatible-configs".to_string());
    }
    if rows.windows(2).all(|w| w[1].params <= w[0].params) {
        flags.push("params-monotone".to_string());
    } else {
        flags.push("params-not-monotone".to_string());
    }
    let find = |s: Stage| rows.iter().find(|r| r.stage == s);
    if let (Some(p), Some(r)) = (find(Stage::Pruned), find(Stage::Recovered)) {
        flags.push(if r.perplexity < p.perplexity {
            "recovery-improves-ppl".to_string()
        } else {
            "recovery-does-not-improve-ppl".to_string()
        });
    }
    Ok(Comparison {
        version: REPORT_VERSION,
        rows,
        flags,
    })
}

impl Comparison {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "stage",
            "perplexity",
            "params",
            "tokens_per_s",
            "ppl_delta",
            "params_delta",
            "tokens_per_s_ratio",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.stage.to_string(),
                format!("{:.6}", r.perplexity),
                r.params.to_string(),
                opt(r.tokens_per_s),
                format!("{:.6}", r.ppl_delta),
                r.params_delta.to_string(),
                opt(r.tokens_per_s_ratio),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
