use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use saap_cli::config::{FusionKind, UpliftMode};
use saap_cli::{CliError, CliResult, Overrides, Preset, Run, RunConfig};
use saap_core::eval::Stage;
use saap_core::plan::Population;

/// Structured pruning of a small decoder-only transformer: importance
/// estimation, volatility-ranked search, structural removal and quantized
/// low-rank recovery.
#[derive(Parser)]
#[command(name = "saap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration. Relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for all artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Target fraction of prunable parameters to remove.
    #[arg(long, global = true)]
    ratio: Option<f64>,
    /// Layers kept intact, as `first,last`.
    #[arg(long, global = true)]
    protect: Option<String>,
    #[arg(long, global = true, value_parser = parse_uplift)]
    uplift_mode: Option<UpliftMode>,
    #[arg(long, global = true, value_parser = parse_fusion)]
    fusion: Option<FusionKind>,
    #[arg(long, global = true, value_parser = parse_population)]
    population: Option<Population>,
    /// Row blocks per quantized matrix.
    #[arg(long = "groups-L", global = true)]
    groups: Option<usize>,
    /// Quantization bit width.
    #[arg(long = "bits-N", global = true)]
    bits: Option<u32>,
    /// Training steps for `train`, recovery steps for `finetune` and `pipeline`.
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true, value_parser = parse_preset)]
    preset: Option<Preset>,
    /// Any config key, as `section.key=value`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base model, or adopt `model.checkpoint`.
    Train,
    /// Write the coupled-group graph.
    Discover,
    /// Sample calibration windows and score every group per sample.
    Estimate,
    /// Fuse scores, rank by volatility, plan and remove groups.
    Prune,
    /// Quantize the pruned model and train the recovery adapters.
    Finetune,
    /// Perplexity of each stage and the comparison table.
    Eval {
        /// Stages to evaluate; every present checkpoint when omitted.
        #[arg(long = "stage", value_parser = parse_stage)]
        stages: Vec<Stage>,
    },
    /// Greedy-generation throughput of each stage.
    Bench,
    /// Every stage in order.
    Pipeline {
        /// Also measure throughput.
        #[arg(long)]
        bench: bool,
    },
}

fn parse_with<T>(s: &str, f: impl Fn(&str) -> Option<T>, choices: &str) -> Result<T, String> {
    f(s).ok_or_else(|| format!("expected one of {choices}"))
}

fn parse_uplift(s: &str) -> Result<UpliftMode, String> {
    parse_with(
        s,
        |s| match s {
            "proportional" => Some(UpliftMode::Proportional),
            "fixed" => Some(UpliftMode::Fixed),
            _ => None,
        },
        "proportional, fixed",
    )
}

fn parse_fusion(s: &str) -> Result<FusionKind, String> {
    parse_with(
        s,
        |s| match s {
            "layer-mle" => Some(FusionKind::LayerMle),
            "global-mle" => Some(FusionKind::GlobalMle),
            "per-group-mle" => Some(FusionKind::PerGroupMle),
            "fixed" => Some(FusionKind::Fixed),
            _ => None,
        },
        "layer-mle, global-mle, per-group-mle, fixed",
    )
}

fn parse_population(s: &str) -> Result<Population, String> {
    s.parse().map_err(|e: saap_core::Error| e.to_string())
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse().map_err(|e: saap_core::Error| e.to_string())
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: CliError| e.to_string())
}

fn kebab<T: serde::Serialize>(v: T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

fn overrides(common: &Common, command: &Command) -> CliResult<Overrides> {
    let mut o = Overrides {
        preset: common.preset,
        values: vec![],
    };
    if let Some(v) = &common.out {
        o.set("out", v.display());
    }
    if let Some(v) = common.seed {
        o.set("seed", v);
    }
    if let Some(v) = common.ratio {
        o.set("search.ratio", v);
    }
    if let Some(v) = &common.protect {
        o.set("search.protect", v);
    }
    if let Some(v) = common.uplift_mode {
        o.set("search.uplift", kebab(v));
    }
    if let Some(v) = common.fusion {
        o.set("fusion.mode", kebab(v));
    }
    if let Some(v) = common.population {
        o.set("search.population", kebab(v));
    }
    if let Some(v) = common.groups {
        o.set("quant.blocks", v);
    }
    if let Some(v) = common.bits {
        o.set("quant.bits", v);
    }
    if let Some(v) = common.steps {
        let key = match command {
            Command::Train => "train.steps",
            _ => "recovery.steps",
        };
        o.set(key, v);
    }
    for a in &common.set {
        o.push_assignment(a)?;
    }
    Ok(o)
}

fn run(cli: Cli) -> CliResult<()> {
    let o = overrides(&cli.common, &cli.command)?;
    let cfg = RunConfig::load(cli.common.config.as_deref(), &o)?;
    let run = Run::new(cfg)?;
    match cli.command {
        Command::Train => run.train(),
        Command::Discover => run.discover().map(drop),
        Command::Estimate => run.estimate(),
        Command::Prune => run.prune().map(drop),
        Command::Finetune => run.finetune().map(drop),
        Command::Eval { stages } => run
            .eval(if stages.is_empty() { None } else { Some(&stages) })
            .map(drop),
        Command::Bench => run.bench().map(drop),
        Command::Pipeline { bench } => {
            let m = run.pipeline(bench)?;
            println!("{}", m.digest);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
