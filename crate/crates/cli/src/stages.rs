//! The pipeline stages and the commands that run them against an output
//! directory.
//!
//! Every command reads its inputs from the output directory, writes its
//! artifacts there and refreshes `manifest.json`. A command whose inputs
//! are missing fails with the name of the file and the command that
//! produces it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use saap_core::eval::{compare, evaluate, throughput, EvalReport, Stage, Throughput};
use saap_core::fusion::{fit_lambdas, fuse, Lambdas};
use saap_core::groups::{discover_groups, GroupGraph};
use saap_core::hash::sha256_hex;
use saap_core::importance::{estimate, CalibrationSet, SampleScores, ScoreOptions};
use saap_core::model::{byte_tokenize, load_checkpoint, save_checkpoint, train_steps, Model, TrainReport};
use saap_core::plan::{plan_pruning, stability, PlanOptions, PruningPlan, StabilityRecord};
use saap_core::prune::{apply_plan, LayerRemoval, ShapeDiff};
use saap_core::quant::{
    finetune_recovery, init_adapters, load_quantized, merge_recovered, quantize_model, save_quantized,
    QuantizedModel, RecoveryReport,
};
use serde::{Deserialize, Serialize};

use crate::artifacts::*;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Tokenized input texts with their content hashes.
pub struct Corpora {
    pub train: Vec<u32>,
    pub eval: Vec<u32>,
    pub calib: Vec<u32>,
    pub hashes: BTreeMap<String, String>,
}

fn read_text(key: &str, path: &Path) -> CliResult<(Vec<u32>, String)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::MissingInput {
        what: key.into(),
        path: path.to_path_buf(),
        hint: e.to_string(),
    })?;
    Ok((byte_tokenize(&bytes), sha256_hex(&bytes)))
}

impl Corpora {
    pub fn load(cfg: &RunConfig) -> CliResult<Corpora> {
        let (train, th) = read_text("data.train", &cfg.data.train)?;
        let (eval, eh) = read_text("data.eval", &cfg.data.eval)?;
        let mut hashes = BTreeMap::from([("train".to_string(), th), ("eval".to_string(), eh)]);
        let calib = match &cfg.data.calib {
            Some(p) => {
                let (c, ch) = read_text("data.calib", p)?;
                hashes.insert("calib".into(), ch);
                c
            }
            None => train.clone(),
        };
        Ok(Corpora {
            train,
            eval,
            calib,
            hashes,
        })
    }
}

pub fn train_base(cfg: &RunConfig, corpora: &Corpora) -> CliResult<(Model<f32>, TrainReport)> {
    let init = Model::init(cfg.model_config(), cfg.seed).map_err(|e| CliError::stage("train", e))?;
    train_steps(&init, &corpora.train, &cfg.train_config()).map_err(|e| CliError::stage("train", e))
}

pub fn calibrate(cfg: &RunConfig, corpora: &Corpora) -> CliResult<CalibrationSet> {
    let source = if cfg.data.calib.is_some() { "calib" } else { "train" };
    CalibrationSet::sample(
        &corpora.calib,
        cfg.calibration.count,
        cfg.calibration.seq_len,
        cfg.calibration_seed(),
        source,
    )
    .map_err(|e| CliError::stage("estimate", e))
}

pub fn score(model: &Model<f32>, graph: &GroupGraph, calib: &CalibrationSet) -> CliResult<SampleScores> {
    estimate(model, graph, calib, ScoreOptions::default()).map_err(|e| CliError::stage("estimate", e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub lambdas: Lambdas,
    pub record: StabilityRecord,
    pub plan: PruningPlan,
}

/// Fusion, stability indicator and budgeted selection.
pub fn search(cfg: &RunConfig, model: &Model<f32>, graph: &GroupGraph, scores: &SampleScores) -> CliResult<SearchOutcome> {
    let err = |e| CliError::stage("prune", e);
    let lambdas = fit_lambdas(scores, graph, &cfg.fusion.policy()).map_err(err)?;
    let fused = fuse(scores, &lambdas).map_err(err)?;
    let record = stability(scores, &fused, model, graph, cfg.search.population, cfg.ranking()).map_err(err)?;
    let options = PlanOptions {
        budget: cfg.search.budget(),
        seeds: cfg.seeds(),
    };
    let plan = plan_pruning(&record, graph, cfg.search.ratio, cfg.search.protection()?, &options).map_err(err)?;
    Ok(SearchOutcome { lambdas, record, plan })
}

/// Quantizes the pruned model (unless the mode keeps it dense), trains the
/// adapters and folds them back in.
pub fn recover(
    cfg: &RunConfig,
    pruned: &Model<f32>,
    corpora: &Corpora,
) -> CliResult<(QuantizedModel<f32>, RecoveryReport)> {
    let err = |e| CliError::stage("finetune", e);
    let rc = cfg.recovery_config();
    let base = if rc.mode.quantizes() {
        quantize_model(pruned, &cfg.quant_config()).map_err(err)?
    } else {
        QuantizedModel::unquantized(pruned)
    };
    let adapters = init_adapters(&base, rc.mode, &rc.adapter).map_err(err)?;
    let (trained, report) = finetune_recovery(&base, adapters, &corpora.train, &rc).map_err(err)?;
    let merged = merge_recovered(&base, &trained).map_err(err)?;
    Ok((merged, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainArtifact {
    /// `"trained"` or the checkpoint the base was copied from.
    pub source: String,
    pub params: usize,
    pub model_hash: String,
    pub report: Option<TrainReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneArtifact {
    pub params_before: usize,
    pub params_after: usize,
    pub removed_params: usize,
    pub achieved_ratio: f64,
    pub model_hash: String,
    pub layers: Vec<LayerRemoval>,
    pub shape_diffs: Vec<ShapeDiff>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub stage: Stage,
    pub params: usize,
    pub throughput: Throughput,
    /// Median tokens/s relative to the base model.
    pub speedup: Option<f64>,
}

/// One run: a validated config bound to its output directory.
pub struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
    config_hash: String,
}

impl Run {
    pub fn new(cfg: RunConfig) -> CliResult<Run> {
        cfg.validate()?;
        let out = cfg.out.clone();
        std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
        Ok(Run {
            config_hash: cfg.hash(),
            cfg,
            out,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn envelope<T>(&self, schema: &str, data: T) -> Envelope<T> {
        Envelope {
            schema: schema.into(),
            version: ARTIFACT_VERSION,
            config_hash: self.config_hash.clone(),
            seeds: self.cfg.seeds(),
            data,
        }
    }

    fn write<T: Serialize>(&self, name: &str, schema: &str, data: T) -> CliResult<()> {
        write_json(&self.path(name), &self.envelope(schema, data))
    }

    fn record_time(&self, stage: &str, start: Instant) -> CliResult<()> {
        let path = self.path(TIMINGS);
        let mut t: BTreeMap<String, f64> = std::fs::read_to_string(&path)
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok())
            .unwrap_or_default();
        t.insert(stage.into(), start.elapsed().as_secs_f64());
        write_json(&path, &t)
    }

    fn load_model(&self, name: &str, producer: &str) -> CliResult<Model<f32>> {
        let path = self.path(name);
        if !path.is_file() {
            return Err(CliError::MissingInput {
                what: "checkpoint".into(),
                path,
                hint: format!("run `saap {producer}` first"),
            });
        }
        load_checkpoint(&path).map_err(|e| CliError::Artifact {
            path,
            message: e.to_string(),
        })
    }

    fn load_recovered(&self) -> CliResult<Model<f32>> {
        let path = self.path(RECOVERED_CKPT);
        if !path.is_file() {
            return Err(CliError::MissingInput {
                what: "checkpoint".into(),
                path,
                hint: "run `saap finetune` first".into(),
            });
        }
        let bad = |e: saap_core::Error| CliError::Artifact {
            path: path.clone(),
            message: e.to_string(),
        };
        let (q, _) = load_quantized::<f32>(&path).map_err(bad)?;
        q.dequantized().map_err(bad)
    }

    fn stage_model(&self, stage: Stage) -> CliResult<Model<f32>> {
        match stage {
            Stage::Base => self.load_model(BASE_CKPT, "train"),
            Stage::Pruned => self.load_model(PRUNED_CKPT, "prune"),
            Stage::Recovered => self.load_recovered(),
        }
    }

    fn stage_present(&self, stage: Stage) -> bool {
        self.path(match stage {
            Stage::Base => BASE_CKPT,
            Stage::Pruned => PRUNED_CKPT,
            Stage::Recovered => RECOVERED_CKPT,
        })
        .is_file()
    }

    fn corpora(&self) -> CliResult<Corpora> {
        Corpora::load(&self.cfg)
    }

    /// Trains the base model, or copies the configured checkpoint.
    pub fn train(&self) -> CliResult<()> {
        let start = Instant::now();
        let (model, source, report) = match &self.cfg.model.checkpoint {
            Some(path) => {
                let m: Model<f32> = load_checkpoint(path).map_err(|e| CliError::Artifact {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
                eprintln!("[train] using checkpoint {}", path.display());
                (m, path.display().to_string(), None)
            }
            None => {
                eprintln!(
                    "[train] {} steps, batch {}×{}",
                    self.cfg.train.steps, self.cfg.train.batch_size, self.cfg.train.seq_len
                );
                let (m, r) = train_base(&self.cfg, &self.corpora()?)?;
                if let Some(l) = r.final_loss {
                    eprintln!("[train] final loss {l:.4}");
                }
                (m, "trained".to_string(), Some(r))
            }
        };
        save_checkpoint(&model, self.path(BASE_CKPT)).map_err(|e| CliError::stage("train", e))?;
        self.write(
            TRAIN_REPORT,
            "train",
            TrainArtifact {
                source,
                params: model.count_params(),
                model_hash: model.hash(),
                report,
            },
        )?;
        self.record_time("train", start)?;
        self.write_manifest()?;
        Ok(())
    }

    fn graph_for(&self, model: &Model<f32>) -> CliResult<GroupGraph> {
        discover_groups(&model.config).map_err(|e| CliError::stage("discover", e))
    }

    /// Writes the coupled-group graph of the base model (or of the
    /// configured architecture when no base exists yet).
    pub fn discover(&self) -> CliResult<GroupGraph> {
        let config = if self.stage_present(Stage::Base) {
            self.stage_model(Stage::Base)?.config
        } else {
            self.cfg.model_config()
        };
        let graph = discover_groups(&config).map_err(|e| CliError::stage("discover", e))?;
        eprintln!(
            "[discover] {} groups, {} prunable of {} parameters",
            graph.len(),
            graph.prunable_params,
            graph.total_params
        );
        self.write(GROUPS, "groups", &graph)?;
        self.write_manifest()?;
        Ok(graph)
    }

    pub fn estimate(&self) -> CliResult<()> {
        let start = Instant::now();
        let model = self.stage_model(Stage::Base)?;
        let graph = self.graph_for(&model)?;
        let calib = calibrate(&self.cfg, &self.corpora()?)?;
        eprintln!("[estimate] {} samples × {} tokens", calib.len(), calib.seq_len);
        let scores = score(&model, &graph, &calib)?;
        self.write(CALIBRATION, "calibration", &calib)?;
        self.write(SCORES_JSON, "scores", &scores)?;
        let mut csv = Vec::new();
        scores.write_csv(&mut csv).map_err(|e| CliError::stage("estimate", e))?;
        write_bytes(&self.path(SCORES_CSV), &csv)?;
        self.record_time("estimate", start)?;
        self.write_manifest()?;
        Ok(())
    }

    pub fn prune(&self) -> CliResult<PruningPlan> {
        let start = Instant::now();
        let model = self.stage_model(Stage::Base)?;
        let graph = self.graph_for(&model)?;
        let scores: SampleScores = read_envelope(&self.path(SCORES_JSON), "scores", "estimate")?.data;
        if scores.group_ids.len() != graph.len() {
            return Err(CliError::Artifact {
                path: self.path(SCORES_JSON),
                message: format!("{} score columns for {} groups", scores.group_ids.len(), graph.len()),
            });
        }
        let outcome = search(&self.cfg, &model, &graph, &scores)?;
        let (pruned, report) = apply_plan(&model, &graph, &outcome.plan).map_err(|e| CliError::stage("prune", e))?;
        eprintln!(
            "[prune] removed {} groups, {} parameters ({:.2}% of prunable)",
            outcome.plan.selected.len(),
            report.removed_params,
            100.0 * report.achieved_ratio
        );
        save_checkpoint(&pruned, self.path(PRUNED_CKPT)).map_err(|e| CliError::stage("prune", e))?;
        self.write(PLAN, "plan", &outcome.plan)?;
        self.write(
            STABILITY,
            "stability",
            serde_json::json!({ "lambdas": outcome.lambdas, "record": outcome.record }),
        )?;
        self.write(
            PRUNE_REPORT,
            "prune",
            PruneArtifact {
                params_before: report.params_before,
                params_after: report.params_after,
                removed_params: report.removed_params,
                achieved_ratio: report.achieved_ratio,
                model_hash: pruned.hash(),
                layers: report.layers,
                shape_diffs: report.shape_diffs,
            },
        )?;
        self.record_time("prune", start)?;
        self.write_manifest()?;
        Ok(outcome.plan)
    }

    pub fn finetune(&self) -> CliResult<RecoveryReport> {
        let start = Instant::now();
        let pruned = self.stage_model(Stage::Pruned)?;
        let rc = self.cfg.recovery_config();
        let mode = serde_json::to_value(rc.mode).ok().and_then(|v| v.as_str().map(str::to_owned));
        eprintln!("[finetune] {} recovery, {} steps", mode.unwrap_or_default(), rc.steps);
        let (merged, report) = recover(&self.cfg, &pruned, &self.corpora()?)?;
        if let Some(l) = report.final_loss {
            eprintln!("[finetune] final loss {l:.4}");
        }
        save_quantized(&merged, None, self.path(RECOVERED_CKPT)).map_err(|e| CliError::stage("finetune", e))?;
        self.write(RECOVERY_REPORT, "recovery", &report)?;
        self.record_time("finetune", start)?;
        self.write_manifest()?;
        Ok(report)
    }

    /// Evaluates the requested stages (all present ones when `None`) and,
    /// when at least two reports exist, writes the comparison table.
    pub fn eval(&self, stages: Option<&[Stage]>) -> CliResult<Vec<EvalReport>> {
        let start = Instant::now();
        let wanted: Vec<Stage> = match stages {
            Some(s) => s.to_vec(),
            None => [Stage::Base, Stage::Pruned, Stage::Recovered]
                .into_iter()
                .filter(|&s| self.stage_present(s))
                .collect(),
        };
        if wanted.is_empty() {
            return Err(CliError::MissingInput {
                what: "checkpoint".into(),
                path: self.path(BASE_CKPT),
                hint: "nothing to evaluate; run `saap train` first".into(),
            });
        }
        let corpora = self.corpora()?;
        for &stage in &wanted {
            let model = self.stage_model(stage)?;
            let report = evaluate(&model, stage, &corpora.eval, self.cfg.data.eval_windows, None)
                .map_err(|e| CliError::stage("eval", e))?;
            eprintln!("[eval] {stage}: perplexity {:.4} ({} params)", report.perplexity, report.params);
            self.write(&eval_report_name(stage), "eval", &report)?;
        }
        let mut all = Vec::new();
        for stage in [Stage::Base, Stage::Pruned, Stage::Recovered] {
            let path = self.path(&eval_report_name(stage));
            if path.is_file() {
                all.push(read_envelope::<EvalReport>(&path, "eval", "eval")?.data);
            }
        }
        if all.len() >= 2 {
            let cmp = compare(&all).map_err(|e| CliError::stage("eval", e))?;
            eprintln!("[eval] flags: {}", cmp.flags.join(", "));
            let mut csv = Vec::new();
            cmp.write_csv(&mut csv).map_err(|e| CliError::stage("eval", e))?;
            write_bytes(&self.path(COMPARISON_CSV), &csv)?;
            self.write(COMPARISON_JSON, "comparison", &cmp)?;
        }
        self.record_time("eval", start)?;
        self.write_manifest()?;
        Ok(all)
    }

    /// Greedy-generation throughput of every present stage.
    pub fn bench(&self) -> CliResult<Vec<BenchEntry>> {
        let start = Instant::now();
        let prompt = byte_tokenize(self.cfg.bench.prompt.as_bytes());
        let b = &self.cfg.bench;
        let mut entries: Vec<BenchEntry> = Vec::new();
        for stage in [Stage::Base, Stage::Pruned, Stage::Recovered] {
            if !self.stage_present(stage) {
                continue;
            }
            let model = self.stage_model(stage)?;
            let tp = throughput(&model, &prompt, b.gen_len, b.runs).map_err(|e| CliError::stage("bench", e))?;
            let speedup = entries
                .iter()
                .find(|e| e.stage == Stage::Base)
                .map(|base| tp.median / base.throughput.median);
            eprintln!("[bench] {stage}: {:.1} tokens/s", tp.median);
            entries.push(BenchEntry {
                stage,
                params: model.count_params(),
                throughput: tp,
                speedup,
            });
        }
        if entries.is_empty() {
            return Err(CliError::MissingInput {
                what: "checkpoint".into(),
                path: self.path(BASE_CKPT),
                hint: "nothing to benchmark; run `saap train` first".into(),
            });
        }
        self.write(BENCH, "bench", &entries)?;
        self.record_time("bench", start)?;
        self.write_manifest()?;
        Ok(entries)
    }

    /// Every stage in order.
    pub fn pipeline(&self, with_bench: bool) -> CliResult<Manifest> {
        self.train()?;
        self.discover()?;
        self.estimate()?;
        self.prune()?;
        self.finetune()?;
        self.eval(None)?;
        if with_bench {
            self.bench()?;
        }
        self.write_manifest()
    }

    pub fn write_manifest(&self) -> CliResult<Manifest> {
        let inputs = self.corpora()?.hashes;
        let manifest = Manifest::scan(&self.out, self.config_hash.clone(), self.cfg.seeds(), inputs)?;
        write_json(&self.path(MANIFEST), &manifest)?;
        Ok(manifest)
    }
}
