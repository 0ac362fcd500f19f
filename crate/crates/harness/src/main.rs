use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use graft::cost::count_flops;
use graft_harness::dataset::{emit, generate_dataset, oracle_accuracy};
use graft_harness::train::write_outcome;
use graft_harness::{load_config, resolve_seed, run_suite, train, train_paired, HarnessError, RunConfig, Suite};

#[derive(Parser)]
#[command(name = "graft", version, about = "Train and verify vision transformers with grafted multi-scale branches")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the planted-patch task; writes metrics.csv and checkpoint.bin.
    Train {
        config: PathBuf,
        /// Also train the same backbone without grafts and write paired rows.
        #[arg(long)]
        paired: bool,
        /// Overrides GRAFT_SEED and the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides output.dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one verification suite against the config's backbone.
    Check {
        #[arg(value_parser = ["grad", "invariants", "cost", "oracle"])]
        suite: String,
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print per-block parameter and MAC counts.
    Cost {
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Write the train and test splits to a directory.
    Dataset {
        config: PathBuf,
        #[arg(long)]
        emit: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

enum Failure {
    Check(String),
    Error(HarnessError),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Self::Error(e)
    }
}

impl From<graft::Error> for Failure {
    fn from(e: graft::Error) -> Self {
        Self::Error(e.into())
    }
}

fn configure(path: &Path, seed: Option<u64>) -> Result<RunConfig, HarnessError> {
    let mut cfg = load_config(path)?;
    let env = std::env::var("GRAFT_SEED").ok();
    cfg.seed = resolve_seed(seed, env.as_deref(), cfg.seed)?;
    Ok(cfg)
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train { config, paired, seed, out } => {
            let mut cfg = configure(&config, seed)?;
            if let Some(dir) = out {
                cfg.output_dir = dir;
            }
            if paired {
                let result = train_paired(&cfg)?;
                result.write(&cfg.output_dir)?;
                print!("{}", result.to_csv());
                println!("test accuracy gap (grafted - plain): {:+.4}", result.test_gap());
            } else {
                let outcome = train(&cfg)?;
                write_outcome(&cfg.output_dir, &outcome)?;
                let (first, last) = (outcome.initial(), outcome.last());
                println!(
                    "step {}: loss {:.6} -> {:.6}, train_acc {:.4}, test_acc {:.4}",
                    last.step, first.loss, last.loss, last.train_acc, last.test_acc
                );
            }
            println!("wrote {}", cfg.output_dir.display());
        }
        Command::Check { suite, config, seed } => {
            let cfg = configure(&config, seed)?;
            let suite: Suite = suite.parse()?;
            let report = run_suite(suite, &cfg)?;
            print!("{}", report.to_csv());
            if !report.passed() {
                let failed: Vec<&str> = report.failures().map(|r| r.check.as_str()).collect();
                return Err(Failure::Check(format!(
                    "{suite}: {} of {} checks failed: {}",
                    failed.len(),
                    report.rows.len(),
                    failed.join("; ")
                )));
            }
        }
        Command::Cost { config, format } => {
            let cfg = load_config(&config)?;
            let report = count_flops(&cfg.spec)?;
            match format {
                Format::Text => print!("{}", report.to_text()),
                Format::Csv => print!("{}", report.to_csv()),
            }
        }
        Command::Dataset { config, emit: dir, seed } => {
            let cfg = configure(&config, seed)?;
            let (tr, te) = generate_dataset(&cfg.task, cfg.spec.image_size, cfg.spec.in_channels, cfg.seed)?;
            for path in emit(&dir, &tr, &te)? {
                println!("wrote {}", path.display());
            }
            let ceiling = oracle_accuracy(&te, cfg.task.classes, cfg.task.patch);
            println!("planted-patch oracle test accuracy: {ceiling:.4}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("usage-error: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check-failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Error(e)) => {
            eprintln!("{}", e.report_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
