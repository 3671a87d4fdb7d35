use clap::{Args, Parser, Subcommand};
use oltqa_core::config::{Ablation, Config};
use oltqa_core::report;
use oltqa_core::{Error, Result};
use std::path::PathBuf;
use std::process::ExitCode;

/// Long-tailed multi-task QA: curation, training, evaluation and reports.
#[derive(Parser, Debug)]
#[command(name = "oltqa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Curate the long-tailed manifest and write the size report.
    Curate(Common),
    /// Stage I: fit retriever and reranker to the oracle.
    PretrainRankers(Common),
    /// Stage I (if needed) and Stage II; resumes from the newest checkpoint.
    Train(Common),
    /// Evaluate the newest checkpoint on every test task.
    Eval(Common),
    /// Collect curves, heat map and summaries of a run directory.
    Report(Common),
    /// Train and evaluate one run per (alpha, unseen count) cell.
    Sweep(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config; every key has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// `section.key=value`, repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, value_parser = parse_ablation)]
    ablation: Option<Ablation>,
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    Ablation::parse(s).map_err(|e| e.to_string())
}

impl Common {
    fn config(&self) -> Result<Config> {
        let base = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        let mut config = base.with_overrides(&self.overrides)?;
        if let Some(seed) = self.seed {
            config.train.seed = seed;
        }
        if let Some(ablation) = self.ablation {
            config.train.ablation = ablation;
        }
        config.validate()?;
        Ok(config)
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Curate(c) => {
            let data = report::curate(&c.config()?, &c.out)?;
            println!(
                "curated {} seen / {} unseen tasks, {} training instances -> {}",
                data.manifest.seen_task_ids.len(),
                data.manifest.unseen_task_ids.len(),
                data.train.len(),
                c.out.display()
            );
        }
        Command::PretrainRankers(c) => {
            let state = report::pretrain_rankers(&c.config()?, &c.out)?;
            if let Some(kl) = state.log.heldout_kl.last() {
                println!("stage 1 done after {} epochs, held-out KL {kl:.4}", state.stage1_done);
            }
        }
        Command::Train(c) => {
            let state = report::train(&c.config()?, &c.out)?;
            println!("training done: {} stage 2 epochs -> {}", state.stage2_done, c.out.display());
        }
        Command::Eval(c) => {
            let eval = report::evaluate(&c.config()?, &c.out)?;
            let s = &eval.summary;
            println!("A_seen {:.4}", s.a_seen);
            if let Some(u) = s.a_unseen {
                println!("A_unseen {u:.4}");
            }
            println!("Head@{} {:.4}\nTail@{} {:.4}", s.m, s.head_at_m, s.n, s.tail_at_n);
        }
        Command::Report(c) => {
            let outcome = report::report(&c.out)?;
            for path in &outcome.written {
                println!("wrote {}", path.display());
            }
            for gap in &outcome.gaps {
                println!("gap: {gap}");
            }
        }
        Command::Sweep(c) => {
            let cells = report::sweep(&c.config()?, &c.out)?;
            println!("{} sweep cells -> {}", cells.len(), c.out.join(report::SWEEP_FILE).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_input_error() {
        1
    } else {
        2
    }
}
