//! `spcse`: run the sparse contrastive encoder pipeline stage by stage.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sparsecse::config::RunConfig;
use sparsecse::Result;

use commands::Stage;

#[derive(Parser)]
#[command(name = "spcse", version, about = "Sparse contrastive sentence encoder pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `dotted.key=value`, applied after the file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Repeat the stage once per seed, each in `<out_dir>/seed-<s>`.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Validate configuration and inputs without computing.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus, scored pair sets and probe sets.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20000)]
        sentences: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Masked-token pretraining; also writes the rewind snapshot.
    Pretrain(Common),
    /// Dense contrastive training from the pretrained weights.
    Train(Common),
    /// Importance scores of the trained model.
    Score(Common),
    /// Select and mask the lowest-scoring units.
    Prune(Common),
    /// Rewind retained units to the snapshot and retrain.
    Rewind(Common),
    /// Evaluate a checkpoint (the retrained model by default).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Full sparsity by lambda sweep.
    Sweep(Common),
}

fn run_stage(common: &Common, f: impl Fn(&Stage) -> Result<()>) -> Result<()> {
    let base = RunConfig::load(common.config.as_deref(), &common.overrides)?;
    let configs = if common.seeds.is_empty() {
        vec![base]
    } else {
        common
            .seeds
            .iter()
            .map(|&s| {
                let mut c = base.clone();
                c.train.seed = s;
                c.out_dir = base.out_dir.join(format!("seed-{s}"));
                c
            })
            .collect()
    };
    for config in configs {
        f(&Stage {
            config,
            dry_run: common.dry_run,
            jobs: common.jobs,
        })?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus { out, sentences, seed } => commands::gen_corpus(&out, sentences, seed),
        Command::Pretrain(c) => run_stage(&c, Stage::pretrain),
        Command::Train(c) => run_stage(&c, Stage::train),
        Command::Score(c) => run_stage(&c, Stage::score),
        Command::Prune(c) => run_stage(&c, Stage::prune),
        Command::Rewind(c) => run_stage(&c, Stage::rewind),
        Command::Eval { common, checkpoint } => run_stage(&common, |s| s.eval(checkpoint.as_deref())),
        Command::Sweep(c) => run_stage(&c, Stage::sweep),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SPCSE_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
