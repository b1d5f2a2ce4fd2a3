//! The declarative run configuration.
//!
//! A run is described by one TOML file. Every key has a default, so an
//! empty file (or no file at all) describes the desk-scale run. Values are
//! layered in this order: built-in defaults, the file, the ablation preset
//! named in the file or on the command line, then command-line overrides.
//! Relative paths written in the file are resolved against the file's
//! directory; paths given on the command line are used as given.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use saap_core::fusion::{FusionPolicy, LambdaMode};
use saap_core::hash::json_hash;
use saap_core::model::{ModelConfig, TrainConfig};
use saap_core::optim::AdamWConfig;
use saap_core::plan::{BudgetMode, Population, Protection, Ranking};
use saap_core::quant::{AdapterInit, QuantConfig, RecoveryConfig, RecoveryMode};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for initialization, training, calibration sampling and recovery
    /// unless a section sets its own.
    pub seed: u64,
    pub out: PathBuf,
    pub preset: Option<Preset>,
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub calibration: CalibrationSection,
    pub fusion: FusionSection,
    pub search: SearchSection,
    pub quant: QuantSection,
    pub recovery: RecoverySection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/desk"),
            preset: None,
            model: ModelSection::default(),
            data: DataSection::default(),
            train: TrainSection::default(),
            calibration: CalibrationSection::default(),
            fusion: FusionSection::default(),
            search: SearchSection::default(),
            quant: QuantSection::default(),
            recovery: RecoverySection::default(),
            bench: BenchSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Start from this checkpoint instead of training a base model.
    pub checkpoint: Option<PathBuf>,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub max_seq_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::desk();
        ModelSection {
            checkpoint: None,
            d_model: d.d_model,
            n_layers: d.n_layers,
            n_heads: d.n_heads,
            d_mlp: d.d_mlp,
            max_seq_len: d.max_seq_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train: PathBuf,
    pub eval: PathBuf,
    /// Calibration text; the training text when absent.
    pub calib: Option<PathBuf>,
    /// Score at most this many evaluation windows.
    pub eval_windows: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train: PathBuf::from("data/moby_dick_train.txt"),
            eval: PathBuf::from("data/moby_dick_eval.txt"),
            calib: None,
            eval_windows: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub warmup_steps: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 1200,
            batch_size: 8,
            seq_len: 128,
            lr: 3e-3,
            warmup_steps: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub count: usize,
    pub seq_len: usize,
    pub seed: Option<u64>,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        CalibrationSection {
            count: 50,
            seq_len: 128,
            seed: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionKind {
    #[default]
    LayerMle,
    GlobalMle,
    PerGroupMle,
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub mode: FusionKind,
    /// Noise scales used by `mode = "fixed"`.
    pub vector: f64,
    pub element: f64,
}

impl Default for FusionSection {
    fn default() -> Self {
        FusionSection {
            mode: FusionKind::LayerMle,
            vector: 1.0,
            element: 1.0,
        }
    }
}

impl FusionSection {
    pub fn policy(&self) -> FusionPolicy {
        FusionPolicy::new(match self.mode {
            FusionKind::LayerMle => LambdaMode::LayerMle,
            FusionKind::GlobalMle => LambdaMode::GlobalMle,
            FusionKind::PerGroupMle => LambdaMode::PerGroupMle,
            FusionKind::Fixed => LambdaMode::Fixed {
                vector: self.vector,
                element: self.element,
            },
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankingKind {
    #[default]
    Asi,
    SeparateCal,
    NoAsi,
    Random,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpliftMode {
    #[default]
    Proportional,
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub ratio: f64,
    /// `"first,last"` layers kept intact.
    pub protect: String,
    pub population: Population,
    pub ranking: RankingKind,
    pub uplift: UpliftMode,
    /// Per-layer ratio used by `uplift = "fixed"`.
    pub uplift_ratio: f64,
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection {
            ratio: 0.2,
            protect: "1,1".into(),
            population: Population::PerLayerKind,
            ranking: RankingKind::Asi,
            uplift: UpliftMode::Proportional,
            uplift_ratio: 0.25,
        }
    }
}

impl SearchSection {
    pub fn protection(&self) -> CliResult<Protection> {
        self.protect
            .parse()
            .map_err(|_| CliError::config("search.protect", format!("`{}` is not `first,last`", self.protect)))
    }

    pub fn budget(&self) -> BudgetMode {
        match self.uplift {
            UpliftMode::Proportional => BudgetMode::Proportional,
            UpliftMode::Fixed => BudgetMode::Fixed {
                layer_ratio: self.uplift_ratio,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantSection {
    pub blocks: usize,
    pub bits: u32,
}

impl Default for QuantSection {
    fn default() -> Self {
        let q = QuantConfig::default();
        QuantSection {
            blocks: q.blocks,
            bits: q.bits,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoverySection {
    pub mode: RecoveryMode,
    pub steps: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub rank: usize,
    pub alpha: f64,
    pub seed: Option<u64>,
}

impl Default for RecoverySection {
    fn default() -> Self {
        let r = RecoveryConfig::desk();
        RecoverySection {
            mode: r.mode,
            steps: r.steps,
            lr: r.lr,
            warmup_steps: r.warmup_steps,
            batch_size: r.batch_size,
            seq_len: r.seq_len,
            rank: r.adapter.rank,
            alpha: r.adapter.alpha,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub prompt: String,
    pub gen_len: usize,
    pub runs: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            prompt: "Call me Ishmael. Some years ago".into(),
            gen_len: 64,
            runs: 5,
        }
    }
}

/// Named ablations. Each one rewrites a handful of keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Rank by the volatility of each score family separately, no fusion.
    SeparateCal,
    /// Fuse with fixed unit weights instead of fitted noise scales.
    WeightedFusion,
    /// Rank by mean fused importance, lowest first.
    NoAsi,
    /// Recover with dense low-rank adapters on an unquantized model.
    DenseLora,
    /// Quantize, but give every input row its own adapter row.
    QloraUngrouped,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::SeparateCal,
        Preset::WeightedFusion,
        Preset::NoAsi,
        Preset::DenseLora,
        Preset::QloraUngrouped,
    ];

    fn overrides(self) -> &'static [(&'static str, &'static str)] {
        match self {
            Preset::SeparateCal => &[("search.ranking", "separate-cal")],
            Preset::WeightedFusion => &[("fusion.mode", "fixed"), ("fusion.vector", "1.0"), ("fusion.element", "1.0")],
            Preset::NoAsi => &[("search.ranking", "no-asi")],
            Preset::DenseLora => &[("recovery.mode", "dense-lora")],
            Preset::QloraUngrouped => &[("recovery.mode", "qlora-ungrouped")],
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = serde_json::to_value(self).expect("unit variant");
        f.write_str(v.as_str().expect("string"))
    }
}

impl FromStr for Preset {
    type Err = CliError;
    fn from_str(s: &str) -> CliResult<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.to_string() == s)
            .ok_or_else(|| {
                let names: Vec<String> = Preset::ALL.iter().map(|p| p.to_string()).collect();
                CliError::config("preset", format!("unknown preset `{s}` (one of {})", names.join(", ")))
            })
    }
}

/// Parses a command-line value as a TOML literal, falling back to a bare
/// string so that `--set search.protect=3,1` needs no quoting.
fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

fn set_key(table: &mut Table, key: &str, value: Value) -> CliResult<()> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if part.is_empty() {
            return Err(CliError::config(key, "empty key segment"));
        }
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        let entry = cur.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(key, format!("`{part}` is not a section")))?;
    }
    Ok(())
}

const FILE_PATHS: [&str; 5] = ["out", "model.checkpoint", "data.train", "data.eval", "data.calib"];

fn resolve_file_paths(table: &mut Table, base: &Path) {
    for key in FILE_PATHS {
        let slot = match key.split_once('.') {
            Some((section, field)) => table
                .get_mut(section)
                .and_then(Value::as_table_mut)
                .and_then(|t| t.get_mut(field)),
            None => table.get_mut(key),
        };
        if let Some(Value::String(p)) = slot {
            if Path::new(p).is_relative() {
                *p = base.join(&*p).to_string_lossy().into_owned();
            }
        }
    }
}

/// Command-line layer on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    /// `(dotted key, raw value)` in application order.
    pub values: Vec<(String, String)>,
}

impl Overrides {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.push((key.to_string(), value.to_string()));
    }

    /// Parses `key=value`.
    pub fn push_assignment(&mut self, assignment: &str) -> CliResult<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::config(assignment, "override must look like `key=value`"))?;
        self.set(k.trim(), v.trim());
        Ok(())
    }
}

impl RunConfig {
    /// Loads `path` (or the defaults when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> CliResult<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::MissingInput {
                    what: "config file".into(),
                    path: p.to_path_buf(),
                    hint: e.to_string(),
                })?;
                let mut t: Table = text
                    .parse()
                    .map_err(|e: toml::de::Error| CliError::config(&p.display().to_string(), e.to_string()))?;
                let base = p.parent().filter(|b| !b.as_os_str().is_empty()).unwrap_or(Path::new("."));
                resolve_file_paths(&mut t, base);
                t
            }
            None => Table::new(),
        };
        let preset = match overrides.preset {
            Some(p) => Some(p),
            None => match table.get("preset") {
                Some(Value::String(s)) => Some(s.parse()?),
                Some(_) => return Err(CliError::config("preset", "must be a string")),
                None => None,
            },
        };
        if let Some(p) = preset {
            table.insert("preset".into(), Value::String(p.to_string()));
            for (k, v) in p.overrides() {
                set_key(&mut table, k, parse_value(v))?;
            }
        }
        for (k, v) in &overrides.values {
            set_key(&mut table, k, parse_value(v))?;
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config("config", e.message().to_string()))?;
        Ok(cfg)
    }

    /// Checks every invariant the stages rely on, naming the offending key.
    pub fn validate(&self) -> CliResult<()> {
        let m = &self.model;
        if m.n_layers < 2 || m.n_heads == 0 || m.d_mlp == 0 || m.max_seq_len < 2 {
            return Err(CliError::config(
                "model",
                "need n_layers ≥ 2, n_heads ≥ 1, d_mlp ≥ 1 and max_seq_len ≥ 2",
            ));
        }
        if m.d_model % m.n_heads != 0 {
            return Err(CliError::config(
                "model.n_heads",
                format!("{} heads do not divide d_model {}", m.n_heads, m.d_model),
            ));
        }
        if self.calibration.count < 2 {
            return Err(CliError::config(
                "calibration.count",
                format!(
                    "{} sample(s): the fluctuation indicator is a Bessel-corrected (D − 1) sample variance, so at least 2 calibration samples are required",
                    self.calibration.count
                ),
            ));
        }
        let seq_checks = [
            ("calibration.seq_len", self.calibration.seq_len),
            ("train.seq_len", self.train.seq_len),
            ("recovery.seq_len", self.recovery.seq_len),
        ];
        for (key, len) in seq_checks {
            if len < 2 || len > m.max_seq_len {
                return Err(CliError::config(key, format!("{len} must lie in 2..={}", m.max_seq_len)));
            }
        }
        if !(0.0..1.0).contains(&self.search.ratio) {
            return Err(CliError::config("search.ratio", format!("{} must lie in [0, 1)", self.search.ratio)));
        }
        if !(0.0..1.0).contains(&self.search.uplift_ratio) {
            return Err(CliError::config(
                "search.uplift_ratio",
                format!("{} must lie in [0, 1)", self.search.uplift_ratio),
            ));
        }
        let protection = self.search.protection()?;
        if protection.first + protection.last >= m.n_layers && self.search.ratio > 0.0 {
            return Err(CliError::config(
                "search.protect",
                format!("protecting {protection} of {} layers leaves nothing to prune", m.n_layers),
            ));
        }
        if self.fusion.mode == FusionKind::Fixed && !(self.fusion.vector > 0.0 && self.fusion.element > 0.0) {
            return Err(CliError::config("fusion", "fixed noise scales must be positive"));
        }
        if !(2..=8).contains(&self.quant.bits) {
            return Err(CliError::config("quant.bits", format!("{} outside 2..=8", self.quant.bits)));
        }
        if self.quant.blocks == 0 {
            return Err(CliError::config("quant.blocks", "must be positive"));
        }
        if self.train.batch_size == 0 || !(self.train.lr > 0.0) {
            return Err(CliError::config("train", "batch_size and lr must be positive"));
        }
        self.recovery_config()
            .validate()
            .map_err(|e| CliError::config("recovery", e.to_string()))?;
        if self.bench.gen_len == 0 || self.bench.runs < 3 || self.bench.prompt.is_empty() {
            return Err(CliError::config(
                "bench",
                "gen_len must be positive, runs at least 3 and the prompt non-empty",
            ));
        }
        let mut inputs = vec![("data.train", &self.data.train), ("data.eval", &self.data.eval)];
        if let Some(p) = &self.data.calib {
            inputs.push(("data.calib", p));
        }
        if let Some(p) = &self.model.checkpoint {
            inputs.push(("model.checkpoint", p));
        }
        for (key, path) in inputs {
            if !path.is_file() {
                return Err(CliError::MissingInput {
                    what: key.into(),
                    path: path.clone(),
                    hint: "file does not exist".into(),
                });
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig::new(m.d_model, m.n_layers, m.n_heads, m.d_mlp).with_max_seq_len(m.max_seq_len)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            seq_len: self.train.seq_len,
            lr: self.train.lr,
            warmup_steps: self.train.warmup_steps,
            seed: self.seed,
            optimizer: AdamWConfig::default(),
        }
    }

    pub fn calibration_seed(&self) -> u64 {
        self.calibration.seed.unwrap_or(self.seed)
    }

    pub fn ranking(&self) -> Ranking {
        match self.search.ranking {
            RankingKind::Asi => Ranking::Asi,
            RankingKind::SeparateCal => Ranking::SeparateCal,
            RankingKind::NoAsi => Ranking::NoAsi,
            RankingKind::Random => Ranking::Random { seed: self.seed },
        }
    }

    pub fn quant_config(&self) -> QuantConfig {
        QuantConfig {
            blocks: self.quant.blocks,
            bits: self.quant.bits,
        }
    }

    pub fn recovery_config(&self) -> RecoveryConfig {
        let r = &self.recovery;
        let seed = r.seed.unwrap_or(self.seed);
        RecoveryConfig {
            mode: r.mode,
            steps: r.steps,
            lr: r.lr,
            warmup_steps: r.warmup_steps,
            batch_size: r.batch_size,
            seq_len: r.seq_len,
            seed,
            adapter: AdapterInit {
                rank: r.rank,
                alpha: r.alpha,
                seed,
            },
            optimizer: RecoveryConfig::desk().optimizer,
        }
    }

    /// Every seed in effect, by role.
    pub fn seeds(&self) -> std::collections::BTreeMap<String, u64> {
        let rc = self.recovery_config();
        [
            ("init", self.seed),
            ("train", self.seed),
            ("calibration", self.calibration_seed()),
            ("recovery", rc.seed),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Hash of everything that determines the artifacts. The output
    /// directory is excluded so that two runs into different directories
    /// can be compared.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        json_hash(&c)
    }
}
