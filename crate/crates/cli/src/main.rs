use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use budgetnet::data::{gen_dataset, save_scenes, CorruptionKind, CorruptionPolicy};
use budgetnet::harness::{
    evaluate, gradcheck_suite, read_report, run_pipeline, train_stage, write_outputs, write_traces, EvalReport, RunConfig,
};
use budgetnet::pipeline::Variant;

#[derive(Parser)]
#[command(name = "budgetnet", version, about = "Train and evaluate the budget-constrained adaptive fusion network")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `out_dir` from the config.
    #[arg(short, long, global = true)]
    out_dir: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the default configuration as TOML.
    InitConfig { path: PathBuf },
    /// Generate a scene dataset as JSON lines.
    GenData {
        #[arg(long, default_value_t = 256)]
        count: usize,
        /// A corruption kind (e.g. `b-fog`), `mixed` or `clean`.
        #[arg(long, default_value = "mixed")]
        kind: String,
        #[arg(long, num_args = 2, default_values_t = [0.4, 1.0])]
        severity: Vec<f64>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train one stage from the previous stage's checkpoint.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=5))]
        stage: u8,
        /// Start from a random init when a prerequisite checkpoint is missing.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate all variants over the corruption × budget grid.
    Eval,
    /// Rewrite the CSV outputs from report.json and print a summary.
    Report {
        /// Defaults to `<out_dir>/report.json`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Finite-difference and invariant checks.
    Gradcheck,
    /// All five stages followed by eval.
    RunAll,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = &common.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(anyhow::Error::msg).context("invalid configuration")?;
    Ok(cfg)
}

fn summarize(report: &EvalReport) {
    println!("{:<14} {:>6} {:>8} {:>8} {:>8} {:>9}", "variant", "budget", "loss", "f1", "exec", "retention");
    for &b in &report.estimator.budgets {
        for v in Variant::GRID {
            let rows: Vec<_> = report.rows.iter().filter(|r| r.budget == b && r.variant == v).collect();
            let n = rows.len().max(1) as f64;
            let avg = |f: &dyn Fn(&budgetnet::harness::EvalRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
            println!(
                "{:<14} {:>6} {:>8.4} {:>8.4} {:>8.2} {:>9.3}",
                v.name(),
                b,
                avg(&|r| r.detection_loss),
                avg(&|r| r.f1),
                avg(&|r| r.executed.iter().sum()),
                avg(&|r| r.retention.iter().sum::<f64>() / r.retention.len() as f64),
            );
        }
    }
    let e = &report.estimator;
    println!(
        "margin: relaxed sort {:.3}, straight-through baseline {:.3}; low-budget wins {}/{}",
        e.mean_margin_neuralsort,
        e.mean_margin_baseline,
        e.low_budget_wins,
        e.low_budget_losses.len()
    );
    println!("budget guarantee: {}", if report.budget_guarantee { "pass" } else { "FAIL" });
}

fn run(cli: Cli) -> Result<bool> {
    if let Command::Gradcheck = cli.command {
        let suite = gradcheck_suite();
        for c in &suite.checks {
            println!("{} {}: {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
        }
        return Ok(suite.passed());
    }
    if let Command::InitConfig { path } = &cli.command {
        RunConfig::default().save(path)?;
        return Ok(true);
    }
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::GenData {
            count,
            kind,
            severity,
            output,
        } => {
            let (lo, hi) = (severity[0], severity[1]);
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                bail!("severity range [{lo}, {hi}] must lie in [0, 1]");
            }
            let policy = match kind.as_str() {
                "mixed" => CorruptionPolicy::Mixed {
                    min_severity: lo,
                    max_severity: hi,
                },
                "clean" => CorruptionPolicy::Clean,
                other => CorruptionPolicy::Fixed {
                    kind: other.parse::<CorruptionKind>()?,
                    min_severity: lo,
                    max_severity: hi,
                },
            };
            let scenes = gen_dataset(cfg.seed, count, &cfg.data.scene, policy)?;
            save_scenes(&output, &scenes)?;
            info!("wrote {} scenes to {}", scenes.len(), output.display());
            Ok(true)
        }
        Command::Train { stage, force } => {
            std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
            cfg.save(&cfg.path("config.toml"))?;
            let log = train_stage(&cfg, stage as usize, force)?;
            for (phase, losses) in &log.phases {
                println!("stage {stage} {phase}: final loss {:.5}", losses.last().copied().unwrap_or(f64::NAN));
            }
            Ok(true)
        }
        Command::Eval => {
            let (report, traces) = evaluate(&cfg)?;
            write_outputs(&report, &cfg.out_dir)?;
            write_traces(&traces, &cfg.path("traces.jsonl"))?;
            summarize(&report);
            Ok(report.budget_guarantee)
        }
        Command::Report { input } => {
            let path = input.unwrap_or_else(|| cfg.path("report.json"));
            let report = read_report(&path)?;
            write_outputs(&report, &cfg.out_dir)?;
            summarize(&report);
            Ok(report.budget_guarantee)
        }
        Command::RunAll => {
            let report = run_pipeline(&cfg)?;
            summarize(&report);
            Ok(report.budget_guarantee)
        }
        Command::Gradcheck | Command::InitConfig { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
