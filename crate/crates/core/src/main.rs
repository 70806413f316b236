use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tsgzsl::gzsl_model::RunMode;
use tsgzsl::pipeline::{
    cmd_eval, cmd_pipeline, cmd_search, cmd_split, cmd_train, resolve_config, Overrides,
    SearchSpace,
};
use tsgzsl::{synthetic, Result};

#[derive(Parser)]
#[command(name = "tsgzsl", version, about = "Generalized zero-shot time-series classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON); defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// full, no_embedder or no_attributes.
    #[arg(long)]
    mode: Option<RunMode>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    /// Search space (JSON); the built-in space is used when omitted.
    #[arg(long)]
    space: Option<PathBuf>,
    /// Overrides the space's trial budget.
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the class-wise split manifest.
    Split(Common),
    /// Two-stage training; needs the split manifest.
    Train(Common),
    /// Evaluate saved artifacts on the test sets.
    Eval(Common),
    /// Random hyperparameter search on the validation classes.
    Search {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        search: SearchArgs,
    },
    /// split, search, train and eval in sequence.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        search: SearchArgs,
    },
    /// Write the four-class synthetic waveform dataset as TSV.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        series: usize,
        #[arg(long, default_value_t = 64)]
        length: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn config(c: &Common) -> Result<tsgzsl::pipeline::RunConfig> {
    let ov = Overrides {
        seed: c.seed,
        mode: c.mode,
        out: c.out.clone(),
    };
    resolve_config(c.config.as_deref(), &ov)
}

fn space(s: &SearchArgs) -> Result<SearchSpace> {
    let mut space = match &s.space {
        Some(p) => SearchSpace::load(p)?,
        None => SearchSpace::default(),
    };
    if let Some(t) = s.trials {
        space.trials = t;
    }
    Ok(space)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Split(c) => {
            let split = cmd_split(&config(&c)?)?;
            println!(
                "seen classes {:?}, unseen classes {:?}, train {} / seen test {} / unseen test {}",
                split.seen_classes,
                split.unseen_classes,
                split.train_idx.len(),
                split.seen_test_idx.len(),
                split.unseen_test_idx.len()
            );
        }
        Command::Train(c) => print_json(&cmd_train(&config(&c)?)?)?,
        Command::Eval(c) => print_json(&cmd_eval(&config(&c)?)?.0)?,
        Command::Search { common, search } => {
            let (best, _) = cmd_search(&config(&common)?, &space(&search)?)?;
            print_json(&best)?;
        }
        Command::Pipeline { common, search } => {
            print_json(&cmd_pipeline(&config(&common)?, &space(&search)?)?)?
        }
        Command::Synth {
            out,
            series,
            length,
            seed,
        } => {
            let ds = synthetic::waveforms(series, length, seed)?;
            synthetic::write_tsv(&ds, &out)?;
            println!("wrote {} series of length {} to {}", series, length, out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
