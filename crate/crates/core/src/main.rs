use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use mvp_core::harness::config::apply_seed_override;
use mvp_core::harness::gradsuite::{DEFAULT_STEP, DEFAULT_TOLERANCE};
use mvp_core::harness::{
    gradient_suite, load_checkpoint, load_config, mean_last_by_experts, report_dir, run_stream, sweep_experts,
    MetricsReport, RunConfig, RunOptions, Strategy,
};
use mvp_core::MvpError;

/// Mixture of visual projectors on a synthetic continual-learning stream.
#[derive(Parser)]
#[command(name = "mvp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full experiment from a config file.
    Run {
        config: PathBuf,
        /// Run directory (defaults to the config's `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config's strategy.
        #[arg(long)]
        strategy: Option<Strategy>,
        /// Continue from the run directory's checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many tasks have been learned.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Accuracy of one task under a saved checkpoint.
    Eval { checkpoint: PathBuf, task: usize },
    /// Finite-difference check of every objective's gradient.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f64,
    },
    /// Last/Avg/Transfer table plus `report.csv` and `curves.csv` for a run
    /// directory or a directory of runs.
    Report { run_dir: PathBuf },
    /// Repeat a run for several expert counts.
    SweepExperts {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        n_experts: Vec<usize>,
        /// Seeds to average over (defaults to the config seed).
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &MvpError) -> u8 {
    match e {
        MvpError::Validation(_) | MvpError::Configuration(_) => 2,
        MvpError::Phase { source, .. } => exit_code(source),
        _ => 3,
    }
}

fn config_from(path: &Path) -> Result<RunConfig, MvpError> {
    let mut cfg = load_config(path).map_err(|e| match e {
        MvpError::Io(io) => MvpError::Validation(format!("cannot read {}: {io}", path.display())),
        other => other,
    })?;
    apply_seed_override(&mut cfg)?;
    Ok(cfg)
}

fn print_report(m: &MetricsReport) {
    println!("strategy {}  seed {}  config {}", m.strategy, m.seed, &m.config_hash[..12]);
    println!("{:>5} {:>6} {:>8} {:>8} {:>9} {:>9}", "task", "family", "last", "avg", "transfer", "zero_shot");
    for t in &m.tasks {
        let transfer = t.transfer.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        println!(
            "{:>5} {:>6} {:>8.4} {:>8.4} {:>9} {:>9.4}",
            t.task, t.family, t.last, t.avg, transfer, t.zero_shot
        );
    }
    for f in &m.families {
        println!(
            "family {}: last {:.4}  avg {:.4}  just learned {:.4}",
            f.family, f.last, f.avg, f.just_learned
        );
    }
    let gap = m.transfer_gap.map_or_else(|| "-".to_string(), |v| format!("{v:+.4}"));
    println!("mean last {:.4}  mean avg {:.4}  transfer gap {gap}", m.mean_last, m.mean_avg);
}

fn run(command: Command) -> Result<(), MvpError> {
    match command {
        Command::Run {
            config,
            out,
            strategy,
            resume,
            stop_after,
        } => {
            let mut cfg = config_from(&config)?;
            if let Some(s) = strategy {
                cfg.strategy = s;
            }
            let out_dir = out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
            let started = Instant::now();
            let output = run_stream(
                &cfg,
                &RunOptions {
                    out_dir: Some(out_dir.clone()),
                    stop_after,
                    resume,
                },
            )?;
            match output.report {
                Some(m) => print_report(&m),
                None => println!(
                    "stopped after {} of {} tasks; resume with --resume",
                    output.state.completed(),
                    output.state.tasks.len()
                ),
            }
            println!("{} in {:.1}s", out_dir.display(), started.elapsed().as_secs_f64());
        }
        Command::Eval { checkpoint, task } => {
            let state = load_checkpoint(&checkpoint)?;
            if task >= state.tasks.len() {
                return Err(MvpError::Validation(format!(
                    "task {task} does not exist; the stream has {} tasks",
                    state.tasks.len()
                )));
            }
            let acc = state.evaluate(task)?;
            println!(
                "{}",
                serde_json::json!({
                    "task": task,
                    "family": state.tasks[task].family_id,
                    "tasks_learned": state.completed(),
                    "accuracy": acc,
                })
            );
        }
        Command::Gradcheck {
            trials,
            seed,
            tolerance,
            step,
        } => {
            let started = Instant::now();
            let entries = gradient_suite(trials, seed, step)?;
            let mut failed = Vec::new();
            for e in &entries {
                let ok = e.passed(tolerance);
                println!(
                    "{:<15} {:>4} trials {:>7} coords  max rel err {:.3e}  {}",
                    e.objective,
                    e.trials,
                    e.coordinates,
                    e.max_rel_error,
                    if ok { "ok" } else { "FAILED" }
                );
                if !ok {
                    failed.push(e.objective.clone());
                }
            }
            println!("{:.1}s", started.elapsed().as_secs_f64());
            if !failed.is_empty() {
                return Err(MvpError::Oracle(format!(
                    "gradients exceed {tolerance:e} for {}",
                    failed.join(", ")
                )));
            }
        }
        Command::Report { run_dir } => {
            for m in report_dir(&run_dir)? {
                print_report(&m);
                println!();
            }
        }
        Command::SweepExperts {
            config,
            n_experts,
            seeds,
            out,
        } => {
            let cfg = config_from(&config)?;
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
            let out_dir = out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir).join("sweep"));
            std::fs::create_dir_all(&out_dir)?;
            let points = sweep_experts(&cfg, &n_experts, &seeds, Some(&out_dir))?;
            println!("{:>4} {:>10}", "N_E", "mean last");
            for (n, last) in mean_last_by_experts(&points) {
                println!("{n:>4} {last:>10.4}");
            }
            println!("{}", out_dir.join("sweep.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
