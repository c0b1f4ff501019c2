//! prunekit: train, prune, compress, report, eval — one pipeline stage per
//! invocation, driven by a TOML run config with flag overrides.

mod commands;
mod config;
mod data;
mod run;

use clap::{Args, Parser, Subcommand};
use config::{apply_overrides, load_config, Overrides, RunConfig};
use prunekit_core::dataset::SplitTag;
use prunekit_core::importance::IndexKind;
use prunekit_core::pruner::FineTuneMode;
use prunekit_core::ErrorCategory;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "prunekit", version, about = "Structural CNN compression toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override eval_split: validation | test.
    #[arg(long, value_parser = parse_eval_split)]
    eval_split: Option<SplitTag>,
}

#[derive(Args)]
struct PruneArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Override prune.index: car | incoming | outgoing | random.
    #[arg(long, value_parser = parse_index)]
    index: Option<IndexKind>,
    /// Override prune.fine_tune: each-iter | final | off.
    #[arg(long, value_parser = parse_fine_tune)]
    fine_tune: Option<FineTuneMode>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network from an architecture preset or file.
    Train(CommonArgs),
    /// Greedy structural pruning of one conv layer.
    Prune(PruneArgs),
    /// Magnitude-prune and codebook-quantize weights into a PKC1 container.
    Compress(CommonArgs),
    /// Curves, baselines, patches, and per-class tables from saved artifacts.
    Report(CommonArgs),
    /// Print a model's accuracy on the configured evaluation split.
    Eval(CommonArgs),
}

fn parse_eval_split(s: &str) -> Result<SplitTag, String> {
    match s {
        "validation" => Ok(SplitTag::Validation),
        "test" => Ok(SplitTag::Test),
        _ => Err(format!("'{s}' is not one of: validation, test")),
    }
}

fn parse_index(s: &str) -> Result<IndexKind, String> {
    s.parse().map_err(|e: prunekit_core::Error| e.to_string())
}

fn parse_fine_tune(s: &str) -> Result<FineTuneMode, String> {
    s.parse().map_err(|e: prunekit_core::Error| e.to_string())
}

fn resolved_config(common: &CommonArgs, extra: Overrides) -> prunekit_core::Result<RunConfig> {
    let mut cfg = load_config(&common.config)?;
    let ov = Overrides {
        seed: common.seed,
        out: common.out.clone(),
        eval_split: common.eval_split,
        ..extra
    };
    apply_overrides(&mut cfg, &ov)?;
    Ok(cfg)
}

fn dispatch(cli: Cli) -> prunekit_core::Result<()> {
    match &cli.command {
        Command::Train(common) => commands::cmd_train(&resolved_config(common, Overrides::default())?),
        Command::Prune(args) => {
            let extra = Overrides {
                index: args.index,
                fine_tune: args.fine_tune,
                ..Overrides::default()
            };
            commands::cmd_prune(&resolved_config(&args.common, extra)?)
        }
        Command::Compress(common) => {
            commands::cmd_compress(&resolved_config(common, Overrides::default())?)
        }
        Command::Report(common) => {
            commands::cmd_report(&resolved_config(common, Overrides::default())?)
        }
        Command::Eval(common) => commands::cmd_eval(&resolved_config(common, Overrides::default())?),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        let (name, code) = match e.category() {
            ErrorCategory::Config => ("config", 2),
            ErrorCategory::Io => ("io", 3),
            ErrorCategory::Numeric => ("numeric", 4),
            ErrorCategory::Usage => ("usage", 2),
        };
        // single line, category first, whitespace-normalized message
        let msg: String = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
        eprintln!("error: {name}: {msg}");
        std::process::exit(code);
    }
}
