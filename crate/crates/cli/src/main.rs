//! `setabs`: one binary, one subcommand per pipeline stage. All artifacts go
//! under `--out` with fixed names; every run writes a manifest.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{Baseline, Ctx};
use config::{Overrides, RunConfig, ScorerChoice};
use error::CliError;

#[derive(Parser)]
#[command(name = "setabs", version, about = "Set abstraction experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Training set size.
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Evaluation and task set size.
    #[arg(long = "set-size", global = true)]
    set_size: Option<usize>,
    /// Singletons and pairs only.
    #[arg(long = "pairs-only", global = true)]
    pairs_only: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a node list (or generate the synthetic tree) into graph.json.
    BuildGraph,
    /// Leaf embeddings from word vectors, averaged up the graph.
    Propagate,
    /// Synthetic class-conditional corpus.
    GenCorpus,
    /// Training sets with targets for every subset.
    GenTrain,
    /// Train the set abstraction module, or a single-item baseline.
    Train {
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
    },
    EvalAbstraction,
    EvalCompletion {
        #[arg(long, value_enum)]
        scorer: Option<ScorerChoice>,
    },
    EvalOoo {
        #[arg(long, value_enum)]
        scorer: Option<ScorerChoice>,
    },
    /// Ranking tasks for completion evaluation and the human service.
    GenTasks,
    /// HTTP ranking service; port from SETABS_PORT.
    Serve {
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        display: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Human baseline report from the response log.
    Report {
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::BuildGraph => "build-graph",
            Command::Propagate => "propagate",
            Command::GenCorpus => "gen-corpus",
            Command::GenTrain => "gen-train",
            Command::Train { baseline: None } => "train",
            Command::Train { baseline: Some(Baseline::Classifier) } => "train-classifier",
            Command::Train { baseline: Some(Baseline::MultiLabel) } => "train-multi-label",
            Command::EvalAbstraction => "eval-abstraction",
            Command::EvalCompletion { .. } => "eval-completion",
            Command::EvalOoo { .. } => "eval-ooo",
            Command::GenTasks => "gen-tasks",
            Command::Serve { .. } => "serve",
            Command::Report { .. } => "report",
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = cli.global;
    let overrides = Overrides { seed: g.seed, out: g.out, n: g.n, set_size: g.set_size, pairs_only: g.pairs_only };
    let cfg = RunConfig::resolve(g.config.as_deref(), &overrides)?;
    let mut ctx = Ctx::new(cfg)?;
    let name = cli.command.name();
    match &cli.command {
        Command::BuildGraph => commands::build_graph(&mut ctx)?,
        Command::Propagate => commands::propagate_embeddings(&mut ctx)?,
        Command::GenCorpus => commands::gen_corpus(&mut ctx)?,
        Command::GenTrain => commands::gen_train(&mut ctx)?,
        Command::Train { baseline } => commands::train_model(&mut ctx, *baseline)?,
        Command::EvalAbstraction => commands::eval_abstraction_cmd(&mut ctx)?,
        Command::EvalCompletion { scorer } => commands::eval_completion_cmd(&mut ctx, *scorer)?,
        Command::EvalOoo { scorer } => commands::eval_ooo_cmd(&mut ctx, *scorer)?,
        Command::GenTasks => commands::gen_tasks(&mut ctx)?,
        Command::Serve { tasks, display, log } => {
            // writes its manifest before blocking
            return commands::serve_cmd(&mut ctx, tasks.as_deref(), display.as_deref(), log.as_deref());
        }
        Command::Report { tasks, log } => commands::report_cmd(&mut ctx, tasks.as_deref(), log.as_deref())?,
    }
    ctx.finish(name)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("setabs: {e}");
            e.exit_code()
        }
    }
}
