use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use loradrop_core::analytic::{run_suite, SuiteConfig};
use loradrop_core::harness::report::{curves_csv, load_runs, summary_csv};
use loradrop_core::harness::{compare, sweep, train, ExperimentConfig, Method, SweepAxis};
use loradrop_core::Result;

#[derive(Parser)]
#[command(name = "loradrop", version, about = "Dropout methods for LoRA finetuning on a desk-scale transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check DropKey/DropAttention equivalence and gradient-ratio identities on random instances.
    Verify {
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        #[arg(long, default_value_t = SuiteConfig::default().seed)]
        seed: u64,
    },
    /// Train one run and write metrics.jsonl and best.ckpt.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Grid sweep over one axis (rate, rank or kl_weight).
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Defaults to the seeds listed in the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Seed-paired comparison of method bundles with permutation-test p-values.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "baseline,dropkey,hiddencut,dropattention,hiddenkey-,hiddenkey")]
        methods: Vec<Method>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Summary and curve tables (CSV) for a run directory or a directory of runs.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Write per-record curve data here; the summary goes to stdout.
        #[arg(long)]
        curves: Option<PathBuf>,
    },
    /// Print the default experiment config as JSON.
    DefaultConfig,
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path)
}

fn seeds_or_default(seeds: Vec<u64>, cfg: &ExperimentConfig) -> Vec<u64> {
    if seeds.is_empty() {
        cfg.seeds.clone()
    } else {
        seeds
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Verify { instances, seed } => {
            let report = run_suite(&SuiteConfig { instances, seed, ..Default::default() })?;
            println!(
                "instances {} (multi-mask {}, degenerate {}, generic {})",
                report.instances, report.multi_mask_instances, report.degenerate_instances, report.generic_instances
            );
            for c in &report.checks {
                let tag = if c.passed { "PASS" } else { "FAIL" };
                println!("{tag} {:<40} observed {:.3e} threshold {:.3e}", c.name, c.observed, c.threshold);
            }
            Ok(report.passed)
        }
        Command::Train { config, seed, out } => {
            let cfg = load(&config)?;
            let o = train(&cfg, seed, Some(&out))?;
            let last = o.final_record();
            println!("run {}", o.run_id);
            println!("best eval {:.4} at step {}", o.best_eval, o.best_step);
            println!("final eval {:.4} train {:.4}", last.eval_metric, last.train_metric);
            if let Some(dir) = &o.run_dir {
                println!("written to {}", dir.display());
            }
            Ok(last.status.is_none())
        }
        Command::Sweep { config, axis, values, seeds, out, workers } => {
            let cfg = load(&config)?;
            let seeds = seeds_or_default(seeds, &cfg);
            let r = sweep(&cfg, axis, &values, &seeds, out.as_deref(), workers)?;
            println!("value,median_best_eval,mad_best_eval,median_final_eval,median_final_train");
            for s in &r.summary {
                println!(
                    "{},{:.6},{:.6},{:.6},{:.6}",
                    s.value, s.median_best_eval, s.mad_best_eval, s.median_final_eval, s.median_final_train
                );
            }
            Ok(true)
        }
        Command::Compare { config, methods, seeds, out, workers } => {
            let cfg = load(&config)?;
            let seeds = seeds_or_default(seeds, &cfg);
            let r = compare(&cfg, &methods, &seeds, out.as_deref(), workers)?;
            println!("method,median_best_eval,mad_best_eval");
            for m in &r.methods {
                println!("{},{:.6},{:.6}", m.method, m.median, m.mad);
            }
            println!();
            println!("a,b,median_diff,p_value");
            for p in &r.pairs {
                println!("{},{},{:.6},{:.6}", p.a, p.b, p.median_diff, p.p_value);
            }
            Ok(true)
        }
        Command::Report { run, curves } => {
            let runs = load_runs(&run)?;
            print!("{}", summary_csv(&runs)?);
            if let Some(path) = curves {
                std::fs::write(path, curves_csv(&runs)?)?;
            }
            Ok(true)
        }
        Command::DefaultConfig => {
            println!("{}", ExperimentConfig::default().to_json()?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
