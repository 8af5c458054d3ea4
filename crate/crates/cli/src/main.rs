//! `hanme`: generate datasets, extract metapath instances, train, evaluate
//! and self-check.
//!
//! Exit status is 0 on success, 1 for invalid input (bad flags, malformed
//! files, inconsistent configuration) and 2 when a run itself fails.

mod run_config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use hanme_core::graph::{gen_synthetic, load_graph, Split, SyntheticConfig};
use hanme_core::metapath::MetapathSchema;
use hanme_core::model::{build_tables, default_metapaths};
use hanme_core::trainer::{
    evaluate, metrics_text, prepare_graph, save_outcome, train_graph_with,
    CHECKPOINT_FILE, HISTORY_HEADER,
};
use hanme_core::verify::{run_suite, VerifyOptions};
use hanme_core::{Error, Result};
use run_config::RunFlags;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "hanme", version, about = "Heterogeneous graph attention over full metapath instances")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a planted-community dataset directory.
    GenSynth(GenSynthArgs),
    /// Enumerate metapath instances and report per-metapath counts.
    Extract(ExtractArgs),
    /// Train a model and write checkpoint, history and metrics.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a dataset.
    Eval(EvalArgs),
    /// Run the built-in correctness suite.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct GenSynthArgs {
    /// JSON generator configuration; omitted keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Also write the counts as JSON to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Run directory for checkpoint.bin, history.csv and metrics.txt.
    #[arg(long)]
    out: Option<PathBuf>,
    /// No per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint file, or a run directory containing checkpoint.bin.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test", value_parser = PossibleValuesParser::new(["train", "val", "test"])
        .map(|s| Split::parse(&s).expect("listed value")))]
    split: Split,
    /// Also write the metrics to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 483)]
    seed: u64,
    /// Skip the two training checks.
    #[arg(long)]
    quick: bool,
}

/// A failed subcommand: either an error or a completed run whose outcome
/// is a failure.
enum Failure {
    Error(Error),
    Checks(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn gen_synth(args: &GenSynthArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Format {
                file: path.display().to_string(),
                msg: e.to_string(),
            })?;
            serde_json::from_str::<SyntheticConfig>(&text).map_err(|e| Error::Format {
                file: path.display().to_string(),
                msg: e.to_string(),
            })?
        }
        None => SyntheticConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let ds = gen_synthetic(&cfg, &args.out)?;
    let g = &ds.graph;
    println!("out={}", args.out.display());
    for t in 0..g.num_types() {
        println!("nodes.{}={}", g.type_name(t), g.node_count(t));
    }
    println!("directed_edges={}", g.num_directed_edges());
    for split in [Split::Train, Split::Val, Split::Test] {
        println!("split.{split}={}", g.splits().get(split).len());
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ExtractStats {
    metapath: String,
    sources: usize,
    instances: usize,
    sources_without_instances: usize,
    max_per_source: usize,
}

fn extract(args: &ExtractArgs) -> Result<()> {
    let rc = args.run.resolve(None)?;
    let g = prepare_graph(load_graph(rc.data_dir()?)?)?;
    let cfg = &rc.train;
    let metapaths = if cfg.model.metapaths.is_empty() {
        default_metapaths(&g)
    } else {
        cfg.model.metapaths.clone()
    };
    let tables = build_tables(&g, &metapaths, &cfg.enumerate_options())?;
    let mut stats = Vec::with_capacity(tables.len());
    for (types, table) in metapaths.iter().zip(&tables) {
        let name = MetapathSchema::from_types(&g, types)?.name;
        let counts: Vec<usize> = (0..table.num_sources()).map(|v| table.count(v)).collect();
        stats.push(ExtractStats {
            metapath: name,
            sources: counts.len(),
            instances: table.total(),
            sources_without_instances: counts.iter().filter(|&&c| c == 0).count(),
            max_per_source: counts.iter().copied().max().unwrap_or(0),
        });
    }
    for s in &stats {
        println!(
            "{} sources={} instances={} sources_without_instances={} max_per_source={}",
            s.metapath, s.sources, s.instances, s.sources_without_instances, s.max_per_source
        );
    }
    if let Some(out) = &args.out {
        let json = serde_json::to_string_pretty(&stats).expect("plain data serializes");
        write_text(out, &(json + "\n"))?;
    }
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let rc = args.run.resolve(args.out.as_deref())?;
    let out_dir = rc.out_dir()?;
    let g = prepare_graph(load_graph(rc.data_dir()?)?)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    if !args.quiet {
        eprintln!("{HISTORY_HEADER}");
    }
    let outcome = train_graph_with(&g, &rc.train, |rec| {
        if !args.quiet {
            eprintln!("{}", rec.csv_line());
        }
    })?;
    save_outcome(&outcome, out_dir)?;
    print!("{}", metrics_text(&outcome));
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let checkpoint = if args.checkpoint.is_dir() {
        args.checkpoint.join(CHECKPOINT_FILE)
    } else {
        args.checkpoint.clone()
    };
    let metrics = evaluate(&checkpoint, &args.data, args.split)?;
    let text = metrics.to_text();
    print!("{text}");
    if let Some(out) = &args.out {
        write_text(out, &text)?;
    }
    Ok(())
}

fn verify(args: &VerifyArgs) -> std::result::Result<(), Failure> {
    let outcomes = run_suite(&VerifyOptions {
        seed: args.seed,
        quick: args.quick,
    });
    for o in &outcomes {
        println!("{}", o.line());
    }
    match outcomes.iter().filter(|o| !o.passed).count() {
        0 => Ok(()),
        n => Err(Failure::Checks(n)),
    }
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    match &cli.command {
        Command::GenSynth(a) => gen_synth(a)?,
        Command::Extract(a) => extract(a)?,
        Command::Train(a) => train(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Verify(a) => verify(a)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
        Err(Failure::Checks(n)) => {
            eprintln!("error: {n} check(s) failed");
            ExitCode::from(2)
        }
    }
}
