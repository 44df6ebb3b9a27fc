use std::path::{Path, PathBuf};
use std::process::ExitCode;

use agentir::explore::{explore, read_jsonl, write_jsonl};
use agentir::harness::{
    consistency_table, consistency_text, fail_rate_table, load_config, reference_config, run_batch, verify_dir,
    write_batch, ExperimentConfig, Harness, HarnessError, SchedulerSpec,
};
use agentir::knowledge::{aggregate, load_kb, reported_knowledge_base, save_kb, KnowledgeBase, KnowledgeError};
use agentir::scheduling::{ExperienceScheduler, PresentationScheduler, RandomScheduler, Scheduler};
use agentir::search::RunMode;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "agentir", version, about = "Experience-guided restoration agent over simulated degradations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every subtask order on sampled profiles and write the trials.
    Explore {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Aggregate explored trials into a knowledge base.
    Summarize {
        #[arg(long)]
        tuples: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the knowledge base built from the reported fail rates.
    ReportedKb {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run workflows for every configured combination and mode.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        kb: Option<PathBuf>,
        /// Repeat to run several modes; defaults to the config's modes.
        #[arg(long)]
        mode: Vec<RunMode>,
        #[arg(long)]
        runs: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = default_jobs())]
        jobs: usize,
    },
    /// Measure how much a scheduler depends on presentation order.
    Consistency {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        kb: Option<PathBuf>,
        #[arg(long, default_value = "experience")]
        scheduler: String,
        #[arg(long, default_value_t = 60)]
        runs: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Recompute a report from its traces and check every trace.
    Verify {
        #[arg(long)]
        out: PathBuf,
    },
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

enum Failure {
    User(String),
    Invariant(String),
}

fn user<E: std::fmt::Display>(e: E) -> Failure {
    Failure::User(e.to_string())
}

fn config(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    match path {
        Some(p) => load_config(p).map_err(|e| match e {
            HarnessError::Io { .. } => user(e),
            e => Failure::User(format!("{}: {e}", p.display())),
        }),
        None => Ok(reference_config()),
    }
}

fn kb(path: Option<&Path>) -> Result<KnowledgeBase, Failure> {
    match path {
        Some(p) => load_kb(p).map_err(|e| match e {
            KnowledgeError::Io { .. } => user(e),
            e => Failure::User(format!("{}: {e}", p.display())),
        }),
        None => Ok(reported_knowledge_base()),
    }
}

fn write_kb(kb: &KnowledgeBase, out: &Path) -> Result<(), Failure> {
    save_kb(kb, out).map_err(user)?;
    print!("{}", fail_rate_table(&kb.records));
    eprintln!("wrote {} records and {} rules to {}", kb.records.len(), kb.rules.len(), out.display());
    Ok(())
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Explore { config: path, out, seed } => {
            let cfg = config(path.as_deref())?;
            let h = Harness::build(&cfg).map_err(user)?;
            let mut ex = cfg.exploration.clone();
            if let Some(s) = seed {
                ex.seed = s;
            }
            let trials = explore(&h.toolbox, &ex, h.evaluator.as_ref()).map_err(user)?;
            write_jsonl(&trials, &out).map_err(user)?;
            let records = aggregate(&trials).map_err(user)?;
            print!("{}", fail_rate_table(&records));
            eprintln!("wrote {} trials to {}", trials.len(), out.display());
            Ok(())
        }
        Command::Summarize { tuples, out } => {
            let trials = read_jsonl(&tuples).map_err(user)?;
            let records = aggregate(&trials).map_err(user)?;
            let kb = KnowledgeBase::from_records(records, format!("summarized from {}", tuples.display())).map_err(user)?;
            write_kb(&kb, &out)
        }
        Command::ReportedKb { out } => write_kb(&reported_knowledge_base(), &out),
        Command::Run {
            config: path,
            kb: kb_path,
            mode,
            runs,
            seed,
            out,
            jobs,
        } => {
            let cfg = config(path.as_deref())?;
            let kb = kb(kb_path.as_deref())?;
            let h = Harness::build(&cfg).map_err(user)?;
            let modes = if mode.is_empty() { cfg.run.modes.clone() } else { mode };
            let runs = runs.unwrap_or(cfg.run.runs);
            let seed = seed.unwrap_or(cfg.run.seed);
            let batch = run_batch(&h, &kb, &cfg.run.combinations, &modes, runs, seed, jobs).map_err(user)?;
            write_batch(&batch, &out).map_err(user)?;
            print!("{}", batch.report.to_text());
            Ok(())
        }
        Command::Consistency {
            config: path,
            kb: kb_path,
            scheduler,
            runs,
            seed,
        } => {
            if runs == 0 {
                return Err(Failure::User("--runs must be at least 1".into()));
            }
            let cfg = config(path.as_deref())?;
            let kb = kb(kb_path.as_deref())?;
            let spec: SchedulerSpec = scheduler.parse().map_err(Failure::User)?;
            let boxed: Box<dyn Scheduler>;
            let sched: &dyn Scheduler = match spec {
                SchedulerSpec::Experience => &ExperienceScheduler,
                SchedulerSpec::Random => &RandomScheduler,
                SchedulerSpec::Presentation => &PresentationScheduler,
                SchedulerSpec::Llm => {
                    let cfg = ExperimentConfig {
                        scheduler: SchedulerSpec::Llm,
                        ..cfg.clone()
                    };
                    boxed = Harness::build(&cfg).map_err(user)?.scheduler;
                    boxed.as_ref()
                }
            };
            let rows = consistency_table(sched, &cfg.run.combinations, &kb, runs, seed).map_err(user)?;
            print!("{}", consistency_text(&rows));
            Ok(())
        }
        Command::Verify { out } => {
            let problems = verify_dir(&out).map_err(user)?;
            if problems.is_empty() {
                println!("ok: every report cell matches the traces in {}", out.display());
                Ok(())
            } else {
                Err(Failure::Invariant(problems.join("\n")))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Invariant(msg)) => {
            eprintln!("invariant violation:\n{msg}");
            ExitCode::from(2)
        }
    }
}
