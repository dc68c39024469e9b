use std::path::PathBuf;
use std::process::ExitCode;

use caselink_cli::config::resolve;
use caselink_cli::{compare_runs, CliError, RunContext, Stage};
use caselink_core::neural::gradcheck::{check_gradients, GRADCHECK_OPS};
use clap::{Parser, Subcommand};

/// Graph-based legal case retrieval, one stage at a time.
#[derive(Parser)]
#[command(name = "caselink", version)]
struct Cli {
    /// Flat `section.key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key; repeatable. Applied after the file and the
    /// CASELINK__SECTION__KEY environment variables.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, default_value = "runs", global = true)]
    runs_dir: PathBuf,
    #[arg(long, default_value = "default", global = true)]
    run_id: String,
    /// Print the resolved plan and configuration without running.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the planted-cluster synthetic corpus.
    Synth,
    /// Load and validate the dataset splits and the charge list.
    Ingest,
    /// Build fact / issue / full views with the summarizer.
    Summarize,
    /// Embed the three views of every case.
    Views,
    /// Train the text-graph encoder and embed cases and charges.
    Casegnn,
    /// Build the case-charge graphs.
    Graph,
    /// Train the graph model.
    Train,
    /// Rank the test candidates for every test query.
    Retrieve,
    /// Score the retrieval run against labels and baselines.
    Evaluate,
    /// Dataset statistics.
    Stats,
    /// Every stage from synth (or ingest) through evaluate.
    All,
    /// Compare two finished runs with per-metric paired t-tests.
    Compare {
        manifest_a: PathBuf,
        manifest_b: PathBuf,
        /// Bonferroni divisor; defaults to `eval.comparisons` of run A.
        #[arg(long)]
        comparisons: Option<usize>,
        /// Write the JSON report here as well.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of the differentiable operations.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// One operation; all when omitted.
        #[arg(long)]
        op: Option<String>,
    },
}

fn stage_of(c: &Command) -> Option<Stage> {
    Some(match c {
        Command::Synth => Stage::Synth,
        Command::Ingest => Stage::Ingest,
        Command::Summarize => Stage::Summarize,
        Command::Views => Stage::Views,
        Command::Casegnn => Stage::Casegnn,
        Command::Graph => Stage::Graph,
        Command::Train => Stage::Train,
        Command::Retrieve => Stage::Retrieve,
        Command::Evaluate => Stage::Evaluate,
        Command::Stats => Stage::Stats,
        _ => return None,
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Compare {
            manifest_a,
            manifest_b,
            comparisons,
            out,
        } => {
            let report = compare_runs(manifest_a, manifest_b, *comparisons)?;
            print!("{}", report.to_table());
            if let Some(path) = out {
                let body = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
                std::fs::write(path, body).map_err(|e| CliError::io(path, e))?;
            }
            return Ok(());
        }
        Command::Gradcheck { trials, seed, op } => {
            let ops: Vec<&str> = match op {
                Some(o) => vec![o.as_str()],
                None => GRADCHECK_OPS.to_vec(),
            };
            let mut failed = Vec::new();
            for op in ops {
                let r = check_gradients(op, *trials, *seed)?;
                println!(
                    "{:<16} trials {:>3}  entries {:>6}  max rel {:.3e}  max abs {:.3e}  {}",
                    r.op,
                    r.trials,
                    r.entries_checked,
                    r.max_rel_error,
                    r.max_abs_error,
                    if r.passed { "ok" } else { "FAIL" }
                );
                if !r.passed {
                    failed.push(r.op);
                }
            }
            return if failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::Other(format!("gradient check failed for {}", failed.join(", "))))
            };
        }
        _ => {}
    }

    let values = resolve(cli.config.as_deref(), std::env::vars(), &cli.overrides)?;
    let ctx = RunContext::new(&cli.runs_dir, &cli.run_id, values)?;
    let stages = match stage_of(&cli.command) {
        Some(s) => vec![s],
        None => ctx.pipeline_stages(),
    };
    if cli.dry_run {
        print!("{}", ctx.plan(&stages)?);
        return Ok(());
    }
    for s in stages {
        let rec = ctx.run_stage(s)?;
        eprintln!(
            "{s}: {} files in {}/ ({:.2}s)",
            rec.outputs.len(),
            ctx.dir.join(s.dir()).display(),
            rec.wall_clock_secs
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
