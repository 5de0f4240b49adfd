use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ltm_core::run::{Outcome, RunConfig, Runner, Stage, WorkLock};
use ltm_core::tasks::Task;
use ltm_core::{Error, Result};

/// Trajectory model pipeline: tokenization, pre-training and fine-tuning
/// over check-in data.
#[derive(Debug, Parser)]
#[command(name = "ltm", version)]
struct Cli {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory holding every stage's artifacts.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Log more (-v info is the default, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic check-in corpus.
    Synth {
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        months: Option<u32>,
    },
    /// Validate and normalize check-ins from a file or the synth stage.
    Ingest {
        /// JSON Lines or CSV (`user,lat,lon,ts`) check-in file.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Encode, cluster, filter and split monthly trajectories.
    BuildCorpus {
        #[arg(long)]
        precision: Option<usize>,
        #[arg(long)]
        window_s: Option<i64>,
    },
    /// Train the sub-hash vocabulary on the training split.
    TrainTokenizer {
        #[arg(long)]
        vocab_size: Option<usize>,
    },
    /// Chunk and statically mask the training and validation splits.
    BuildPretrainData {
        #[arg(long)]
        chunk_size: Option<usize>,
        #[arg(long)]
        mask_ratio: Option<f64>,
    },
    /// Masked trajectory modeling.
    Pretrain(Schedule),
    /// Fine-tune the pre-trained encoder on the downstream tasks.
    Finetune(TaskArgs),
    /// Fine-tune from random and from pre-trained weights and report F1.
    Compare(TaskArgs),
    /// Validation perplexity and fine-tuned task F1.
    Eval(TaskArgs),
    /// Every stage through compare and eval.
    Run,
    /// Print the effective configuration as JSON.
    ShowConfig,
}

#[derive(Debug, Args)]
struct Schedule {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Args)]
struct TaskArgs {
    /// Restrict to these tasks (nsp, dp, tua); repeatable.
    #[arg(long = "task")]
    tasks: Vec<Task>,
    #[command(flatten)]
    schedule: Schedule,
    #[arg(long)]
    n_examples: Option<usize>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn apply_overrides(cfg: &mut RunConfig, cli: &Cli) {
    set(&mut cfg.seed, cli.seed);
    match &cli.command {
        Command::Synth { users, months } => {
            set(&mut cfg.synth.n_users, *users);
            set(&mut cfg.synth.months, *months);
        }
        Command::Ingest { input } => {
            if input.is_some() {
                cfg.input = input.clone();
            }
        }
        Command::BuildCorpus { precision, window_s } => {
            set(&mut cfg.corpus.precision, *precision);
            set(&mut cfg.corpus.window_s, *window_s);
        }
        Command::TrainTokenizer { vocab_size } => set(&mut cfg.tokenizer.vocab_size, *vocab_size),
        Command::BuildPretrainData { chunk_size, mask_ratio } => {
            set(&mut cfg.masking.chunk_size, *chunk_size);
            set(&mut cfg.masking.ratio, *mask_ratio);
        }
        Command::Pretrain(s) => {
            set(&mut cfg.pretrain.epochs, s.epochs);
            set(&mut cfg.pretrain.batch_size, s.batch_size);
            set(&mut cfg.pretrain.lr, s.lr);
        }
        Command::Finetune(t) | Command::Compare(t) | Command::Eval(t) => {
            if !t.tasks.is_empty() {
                cfg.tasks.tasks = t.tasks.clone();
            }
            set(&mut cfg.tasks.n_examples, t.n_examples);
            set(&mut cfg.finetune.epochs, t.schedule.epochs);
            set(&mut cfg.finetune.batch_size, t.schedule.batch_size);
            set(&mut cfg.finetune.lr, t.schedule.lr);
        }
        Command::Run | Command::ShowConfig => {}
    }
}

fn report(stage: Stage, outcome: &Outcome) {
    match outcome {
        Outcome::Ran => println!("{stage}: done"),
        Outcome::UpToDate => println!("{stage}: up to date"),
    }
}

fn print_file(runner: &Runner, stage: Stage, name: &str) -> Result<()> {
    let path = runner.stage_dir(stage).join(name);
    let text = std::fs::read_to_string(&path).map_err(|_| Error::MissingArtifact(path))?;
    print!("{text}");
    Ok(())
}

fn main_inner(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_path(p)?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, &cli);
    if let Command::ShowConfig = cli.command {
        cfg.validate()?;
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let runner = Runner::new(cfg, &cli.out)?;
    let _lock = WorkLock::acquire(&cli.out)?;
    let single = |stage: Stage| -> Result<()> {
        report(stage, &runner.run(stage)?);
        Ok(())
    };
    match cli.command {
        Command::Synth { .. } => single(Stage::Synth)?,
        Command::Ingest { .. } => single(Stage::Ingest)?,
        Command::BuildCorpus { .. } => single(Stage::BuildCorpus)?,
        Command::TrainTokenizer { .. } => single(Stage::TrainTokenizer)?,
        Command::BuildPretrainData { .. } => single(Stage::BuildPretrainData)?,
        Command::Pretrain(_) => single(Stage::Pretrain)?,
        Command::Finetune(_) => {
            single(Stage::TaskData)?;
            single(Stage::Finetune)?;
            print_file(&runner, Stage::Finetune, "results.json")?;
        }
        Command::Compare(_) => {
            single(Stage::TaskData)?;
            single(Stage::Compare)?;
            print_file(&runner, Stage::Compare, "report.json")?;
        }
        Command::Eval(_) => {
            single(Stage::Eval)?;
            print_file(&runner, Stage::Eval, "report.json")?;
        }
        Command::Run => {
            for target in [Stage::Compare, Stage::Eval] {
                for (stage, outcome) in runner.run_through(target)? {
                    report(stage, &outcome);
                }
            }
            print_file(&runner, Stage::Compare, "report.json")?;
        }
        Command::ShowConfig => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 | 1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
