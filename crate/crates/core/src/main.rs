use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use protoneck::activations::NormKind;
use protoneck::commands;
use protoneck::config::RunConfig;
use protoneck::data::Split;
use protoneck::explain::{ExplainRequest, MapKind};
use protoneck::{Error, Result};

#[derive(Parser)]
#[command(name = "protoneck", version, about = "Prototype-neck detection transformer on synthetic shapes")]
struct Cli {
    /// `key = value` config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Softmax,
    Sparsemax,
    Argmax,
}

impl From<ModeArg> for NormKind {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Softmax => NormKind::Softmax,
            ModeArg::Sparsemax => NormKind::Sparsemax,
            ModeArg::Argmax => NormKind::Argmax,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MapArg {
    Single,
    Multi,
    Product,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed.
    Train {
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Evaluate checkpoints on a split.
    Eval {
        /// Checkpoint manifest; defaults to each seed's final checkpoint under --out.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        /// Normalization at evaluation time; defaults to the configured one.
        #[arg(long, value_enum)]
        eval_mode: Option<ModeArg>,
    },
    /// Render explanation maps for one image.
    Explain {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        index: usize,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        #[arg(long, value_enum, default_value = "multi")]
        mode: MapArg,
        /// Prototypes for single maps (default: all).
        #[arg(long = "proto", value_delimiter = ',')]
        protos: Vec<usize>,
        /// Queries for product maps (default: every matched query).
        #[arg(long = "query", value_delimiter = ',')]
        queries: Vec<usize>,
        #[arg(long)]
        topk: Option<usize>,
        #[arg(long, value_enum)]
        eval_mode: Option<ModeArg>,
    },
    /// Train and evaluate the configured alignment / quantization matrix.
    Sweep {
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Write generated samples in the binary export format.
    ExportData {
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[arg(long)]
        count: Option<usize>,
    },
}

fn seeds_or(cfg: &RunConfig, given: Vec<u64>, explicit: Option<u64>) -> Vec<u64> {
    if !given.is_empty() {
        given
    } else if let Some(s) = explicit {
        vec![s]
    } else {
        vec![cfg.seed]
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    let mode_of = |m: Option<ModeArg>| m.map_or(cfg.norm_mode(), |m| cfg.norm_mode().with_kind(m.into()));
    match cli.command {
        Command::Train { seeds } => {
            for r in commands::train_seeds(&cfg, &seeds_or(&cfg, seeds, cli.seed), &out)? {
                println!("seed {} best epoch {} config {}", r.seed, r.best_epoch, r.config_hash);
            }
        }
        Command::Eval {
            checkpoint,
            seeds,
            split,
            eval_mode,
        } => {
            let cks = match checkpoint {
                Some(c) => vec![c],
                None => seeds_or(&cfg, seeds, cli.seed)
                    .into_iter()
                    .map(|s| commands::default_checkpoint(&out, s))
                    .collect(),
            };
            let reports = commands::eval_checkpoints(&cfg, &cks, split.into(), mode_of(eval_mode), &out)?;
            println!("{}", protoneck::metrics::METRICS_HEADER);
            for r in reports {
                println!("{}", r.csv_row());
            }
        }
        Command::Explain {
            checkpoint,
            index,
            split,
            mode,
            protos,
            queries,
            topk,
            eval_mode,
        } => {
            let kind = match mode {
                MapArg::Single if protos.is_empty() => MapKind::Single((0..cfg.prototypes).collect()),
                MapArg::Single => MapKind::Single(protos),
                MapArg::Multi => MapKind::Multi,
                MapArg::Product => MapKind::Product(queries),
            };
            let req = ExplainRequest {
                split: split.into(),
                index,
                kind,
                mode: mode_of(eval_mode),
                top_k: topk.unwrap_or(cfg.topk),
            };
            let ck = checkpoint.unwrap_or_else(|| commands::default_checkpoint(&out, cfg.seed));
            for p in commands::explain_checkpoint(&cfg, &ck, &req, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Sweep { seeds } => {
            let seeds = if seeds.is_empty() { cfg.seeds.clone() } else { seeds };
            commands::sweep(&cfg, &seeds, &out)?;
            println!("{}", out.join("sweep.csv").display());
        }
        Command::ExportData { split, count } => {
            println!("{}", commands::export_data(&cfg, split.into(), count, &out)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code: i32 = Error::exit_code(&e);
            ExitCode::from(code as u8)
        }
    }
}
