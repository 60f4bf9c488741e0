use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use ticket_cli::{
    cmd_ablate, cmd_analyze, cmd_cluster, cmd_export_masks, cmd_imp, cmd_synth, cmd_train, AnalyzeOptions,
    ImpOptions, Observable, RunConfig,
};
use ticket_core::observables::{ChannelMode, Direction};

/// Train masked MLPs, run iterative magnitude pruning and analyse the masks.
#[derive(Parser)]
#[command(name = "ticket", version)]
struct Cli {
    /// Worker threads. Every computation is single-threaded, so only 1 is
    /// accepted; the flag exists for sweep wrappers that always pass it.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..=1))]
    threads: u32,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Channel {
    Same,
    Diff,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dir {
    In,
    Out,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dense network.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides output.run_dir.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Iterative magnitude pruning; continues an unfinished run.
    Imp {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Stop after writing this iteration (the run stays resumable).
        #[arg(long)]
        stop_after: Option<usize>,
        #[arg(long)]
        quiet: bool,
    },
    /// Compute an observable of one iteration.
    Analyze {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        iteration: usize,
        #[arg(value_enum)]
        observable: Observable,
        #[arg(long, default_value_t = 1)]
        layer: usize,
        #[arg(long, value_enum, default_value = "same")]
        channel: Channel,
        #[arg(long, value_enum, default_value = "in")]
        direction: Dir,
        #[arg(long, default_value_t = 1)]
        bin_width: usize,
        /// Lower C^in bin edges for locality-binned, e.g. 0,10,50.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        bins: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy after removing layer-1 nodes by C^in, both orders.
    Ablate {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        iteration: usize,
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
    },
    /// Mask images of the most connected nodes.
    ExportMasks {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        iteration: usize,
        #[arg(long)]
        top: usize,
        #[arg(long)]
        weighted: bool,
        #[arg(long, default_value_t = 1)]
        layer: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the configured synthetic dataset to disk.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Output prefix.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the configured dataset with rewritten labels.
    Cluster {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(config: &PathBuf, run_dir: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(dir) = run_dir {
        cfg.output.run_dir = dir;
    }
    Ok(cfg)
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, run_dir } => {
            let run = cmd_train(&load(&config, run_dir)?)?;
            println!("{}", run.root().display());
        }
        Command::Imp {
            config,
            run_dir,
            stop_after,
            quiet,
        } => {
            let run = cmd_imp(&load(&config, run_dir)?, ImpOptions { stop_after, quiet })?;
            println!("{}", run.root().display());
        }
        Command::Analyze {
            run_dir,
            iteration,
            observable,
            layer,
            channel,
            direction,
            bin_width,
            bins,
            out,
        } => {
            let opts = AnalyzeOptions {
                layer,
                channel: match channel {
                    Channel::Same => ChannelMode::Same,
                    Channel::Diff => ChannelMode::Different,
                },
                direction: match direction {
                    Dir::In => Direction::In,
                    Dir::Out => Direction::Out,
                },
                bin_width,
                bins,
                out,
            };
            print_paths(&cmd_analyze(&run_dir, iteration, observable, &opts)?);
        }
        Command::Ablate {
            run_dir,
            iteration,
            counts,
        } => println!("{}", cmd_ablate(&run_dir, iteration, counts)?.display()),
        Command::ExportMasks {
            run_dir,
            iteration,
            top,
            weighted,
            layer,
            out,
        } => print_paths(&cmd_export_masks(&run_dir, iteration, top, weighted, layer, out)?),
        Command::Synth { config, out } => print_paths(&cmd_synth(&load(&config, None)?, &out)?),
        Command::Cluster { config, out } => print_paths(&cmd_cluster(&load(&config, None)?, &out)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
