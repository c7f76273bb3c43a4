//! `cgrl` command line: build shift benchmarks, train and evaluate models,
//! run ablations and sensitivity sweeps, verify the causal theory, and
//! re-emit plots from persisted records.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cgrl_core::config::{load_config, BenchConfig, ExperimentConfig};
use cgrl_core::error::Result;
use cgrl_core::experiment::{run_ablation, run_experiment, run_sensitivity, SweepAxis};
use cgrl_core::report::{emit_ablation, emit_outputs, emit_sweep, load_records};
use cgrl_core::scm::run_verification;
use cgrl_core::shift::{assemble_benchmark, load_bundle, save_bundle, BenchmarkBundle};

#[derive(Parser)]
#[command(name = "cgrl", about = "causal-guided graph representation learning", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunFlags {
    /// Experiment config file (flat key = value)
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides out_dir from the config)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Added to every run seed
    #[arg(long, default_value_t = 0)]
    seed_offset: u64,
    /// Worker threads for independent runs
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic feature-shift benchmark bundle
    Bench {
        /// Bundle output directory
        #[arg(long)]
        out: PathBuf,
        /// Optional generator config (sbm_* / shift_* keys)
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train and evaluate one experiment over its seeds
    Train(RunFlags),
    /// Full model plus the four single-loss-removed variants
    Ablate(RunFlags),
    /// Sensitivity sweep along one hyperparameter axis
    Sweep {
        #[command(flatten)]
        flags: RunFlags,
        /// Axis: k, lambda1, lambda2, tau, margin
        #[arg(long)]
        axis: String,
        /// Comma-separated values
        #[arg(long)]
        values: String,
    },
    /// Run the causal-theory verification suite
    Verify {
        /// Random SCM instances for the backdoor check
        #[arg(long, default_value_t = 20)]
        scm_seeds: u64,
        /// Random instances for the lower-bound check
        #[arg(long, default_value_t = 100)]
        elbo_seeds: u64,
        /// Largest epoch index for the replacement-loss limits
        #[arg(long, default_value_t = 10_000)]
        t_max: usize,
    },
    /// Re-emit plots and summaries from a persisted records file
    Plot {
        /// records_<hash>.json produced by train
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_setup(flags: &RunFlags) -> Result<(ExperimentConfig, BenchmarkBundle<f64>, PathBuf)> {
    let mut cfg = load_config(&flags.config)?;
    if let Some(out) = &flags.out {
        cfg.out_dir = out.display().to_string();
    }
    let bundle = load_bundle::<f64>(std::path::Path::new(&cfg.bench_dir))?;
    let out_dir = PathBuf::from(&cfg.out_dir);
    Ok((cfg, bundle, out_dir))
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Bench { out, config } => {
            let bench_cfg = match config {
                Some(path) => BenchConfig::load(&path)?,
                None => BenchConfig::default(),
            };
            let bundle = assemble_benchmark::<f64>(&bench_cfg.sbm, &bench_cfg.shift)?;
            save_bundle(&bundle, &out)?;
            println!(
                "bundle written to {} ({} nodes, {} edges, 3 OOD domains)",
                out.display(),
                bundle.id_graph.n(),
                bundle.id_graph.num_edges()
            );
            Ok(0)
        }
        Command::Train(flags) => {
            let (cfg, bundle, out_dir) = load_setup(&flags)?;
            println!("resolved config:\n{}", cfg.canonical_text());
            let result = run_experiment(&cfg, &bundle, flags.seed_offset, flags.jobs)?;
            let written = emit_outputs(&result, &out_dir)?;
            let a = &result.aggregate;
            println!(
                "{}: best-val {:.4} +/- {:.4}, ood overall {:.4} +/- {:.4} ({} files)",
                cfg.model.name(),
                a.best_val_mean,
                a.best_val_std,
                a.ood_overall_mean,
                a.ood_overall_std,
                written.len()
            );
            Ok(if a.runs_failed > 0 { 1 } else { 0 })
        }
        Command::Ablate(flags) => {
            let (cfg, bundle, out_dir) = load_setup(&flags)?;
            let table = run_ablation(&cfg, &bundle, flags.seed_offset, flags.jobs)?;
            emit_ablation(&table, &out_dir)?;
            println!("{}", cgrl_core::report::ablation_text(&table));
            let failed: usize = table
                .rows
                .iter()
                .map(|(_, r)| r.aggregate.runs_failed)
                .sum();
            Ok(if failed > 0 { 1 } else { 0 })
        }
        Command::Sweep {
            flags,
            axis,
            values,
        } => {
            let (cfg, bundle, out_dir) = load_setup(&flags)?;
            let axis = SweepAxis::parse(&axis)?;
            let values: Vec<f64> = values
                .split(',')
                .map(|v| {
                    v.trim().parse::<f64>().map_err(|_| {
                        cgrl_core::CgrlError::Config(format!("bad sweep value {v:?}"))
                    })
                })
                .collect::<Result<_>>()?;
            let table = run_sensitivity(&cfg, &bundle, axis, &values, flags.seed_offset, flags.jobs)?;
            emit_sweep(&table, &out_dir)?;
            println!("{}", cgrl_core::report::sweep_csv(&table));
            let failed: usize = table
                .rows
                .iter()
                .map(|(_, r)| r.aggregate.runs_failed)
                .sum();
            Ok(if failed > 0 { 1 } else { 0 })
        }
        Command::Verify {
            scm_seeds,
            elbo_seeds,
            t_max,
        } => {
            let report = run_verification::<f64>(scm_seeds, elbo_seeds, t_max)?;
            print!("{}", report.render());
            Ok(if report.passed() { 0 } else { 1 })
        }
        Command::Plot { records, out } => {
            let result = load_records(&records)?;
            let written = emit_outputs(&result, &out)?;
            println!("re-emitted {} files to {}", written.len(), out.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
