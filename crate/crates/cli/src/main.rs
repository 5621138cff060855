use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dafos_core::config::{apply_overrides, parse_config, EvalMode, ExperimentConfig};
use dafos_core::data::{load_registry, make_class_splits, ClassSplits, DatasetRegistry};
use dafos_core::eval::{evaluate, write_evaluation};
use dafos_core::sweep::{plot_sweep, read_sweep_csv, run_sweep, write_sweep_csv, SweepValues};
use dafos_core::trainer::{load_checkpoint, resume, train};
use dafos_core::{DafosError, Result};

#[derive(Parser)]
#[command(name = "dafos", version, about = "Domain-adaptive few-shot open-set recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a configuration key, e.g. `--set gan.sigma_low=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Dataset root; overrides `dataset.root`.
    #[arg(long)]
    data_root: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Standard,
    Generalized,
}

#[derive(Subcommand)]
enum Command {
    /// Partition the classes into the four disjoint pools and write them as JSON.
    PrepareSplits {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Meta-train a model; writes config echo, splits, stats, checkpoint and a metrics report.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory; defaults to `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use an existing split file instead of drawing one.
        #[arg(long)]
        splits: Option<PathBuf>,
        /// Continue from `<out>/checkpoint`.
        #[arg(long)]
        resume: bool,
        /// Skip the evaluation pass after training.
        #[arg(long)]
        no_eval: bool,
    },
    /// Evaluate a checkpoint on test episodes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split file; defaults to the one stored in the checkpoint.
        #[arg(long)]
        splits: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
        /// Disable synthetic augmentation of the test support.
        #[arg(long)]
        no_test_augment: bool,
        #[arg(long)]
        data_root: Option<PathBuf>,
        /// Output directory; defaults to `<checkpoint>/../eval-<mode>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one axis and write a table plus a line plot.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// shots, open_classes or sigma.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; sigma pairs as `low:high` (empty = the six-point grid).
        #[arg(long, default_value = "")]
        values: String,
        /// Reuse a trained checkpoint for the count axes.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-render a sweep table as an SVG line plot.
    Plot {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| DafosError::io(&args.config, e))?;
    let text = apply_overrides(&text, &args.overrides)?;
    let mut cfg = parse_config(&text)?;
    if let Some(root) = &args.data_root {
        cfg.dataset.root = Some(root.clone());
    } else if let Some(root) = cfg.dataset.root.as_ref().filter(|r| r.is_relative()) {
        let base = args.config.parent().unwrap_or(Path::new("."));
        cfg.dataset.root = Some(base.join(root));
    }
    Ok(cfg)
}

fn registry_for(cfg: &ExperimentConfig) -> Result<DatasetRegistry> {
    load_registry(None, &cfg.dataset)
}

fn splits_for(cfg: &ExperimentConfig, registry: &DatasetRegistry, path: Option<&Path>) -> Result<ClassSplits> {
    match path {
        Some(p) => ClassSplits::load(p),
        None => make_class_splits(registry, &cfg.splits),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrepareSplits { cfg, out } => {
            let cfg = read_config(&cfg)?;
            let registry = registry_for(&cfg)?;
            let splits = make_class_splits(&registry, &cfg.splits)?;
            splits.save(&out)?;
            println!(
                "wrote {} ({} source-train, {} target-train, {} test-known, {} test-unknown classes)",
                out.display(),
                splits.source_train.len(),
                splits.target_train.len(),
                splits.test_known.len(),
                splits.test_unknown.len()
            );
        }
        Command::Train {
            cfg,
            out,
            splits,
            resume: cont,
            no_eval,
        } => {
            let cfg = read_config(&cfg)?;
            let out = out
                .or_else(|| cfg.output_dir.clone())
                .ok_or_else(|| DafosError::config("output_dir", "no run directory: pass --out or set output_dir"))?;
            let registry = registry_for(&cfg)?;
            let (model, cfg, splits) = if cont {
                let (model, _) = resume(&registry, &out, Some(cfg.train.episodes))?;
                let ckpt = load_checkpoint(&out.join("checkpoint"))?;
                (model, ckpt.config, ckpt.splits)
            } else {
                let splits = splits_for(&cfg, &registry, splits.as_deref())?;
                let (model, _) = train(&registry, &splits, &cfg, Some(&out))?;
                (model, cfg, splits)
            };
            println!("checkpoint: {}", out.join("checkpoint").display());
            if !no_eval {
                let eval = evaluate(&model, &registry, &splits, &cfg)?;
                write_evaluation(&out, &eval)?;
                print!("{}", eval.report.summary());
            }
        }
        Command::Eval {
            checkpoint,
            splits,
            episodes,
            mode,
            runs,
            workers,
            no_test_augment,
            data_root,
            out,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            if ckpt.model.source_bank.is_none() {
                return Err(DafosError::MissingSegment("source_bank.json".into()));
            }
            let mut cfg = ckpt.config;
            if let Some(root) = data_root {
                cfg.dataset.root = Some(root);
            }
            if let Some(n) = episodes {
                cfg.eval.episodes = n;
            }
            if let Some(m) = mode {
                cfg.eval.mode = match m {
                    Mode::Standard => EvalMode::Standard,
                    Mode::Generalized => EvalMode::Generalized,
                };
            }
            if let Some(r) = runs {
                cfg.eval.runs = r;
            }
            if let Some(w) = workers {
                cfg.eval.workers = w;
            }
            if no_test_augment {
                cfg.eval.test_augment = false;
            }
            cfg.validate()?;
            let registry = registry_for(&cfg)?;
            let splits = match splits {
                Some(p) => ClassSplits::load(&p)?,
                None => ckpt.splits,
            };
            let eval = evaluate(&ckpt.model, &registry, &splits, &cfg)?;
            let tag = match cfg.eval.mode {
                EvalMode::Standard => "eval-standard",
                EvalMode::Generalized => "eval-generalized",
            };
            let out = out.unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join(tag));
            write_evaluation(&out, &eval)?;
            print!("{}", eval.report.summary());
            println!("results: {}", out.display());
        }
        Command::Sweep {
            cfg,
            axis,
            values,
            checkpoint,
            out,
        } => {
            let cfg = read_config(&cfg)?;
            let values = SweepValues::parse(&axis, &values)?;
            let registry = registry_for(&cfg)?;
            let (model, splits) = match checkpoint {
                Some(dir) => {
                    let c = load_checkpoint(&dir)?;
                    (Some(c.model), c.splits)
                }
                None => (None, make_class_splits(&registry, &cfg.splits)?),
            };
            let rows = run_sweep(&cfg, &registry, &splits, &values, model.as_ref())?;
            std::fs::create_dir_all(&out).map_err(|e| DafosError::io(&out, e))?;
            let table = out.join(format!("sweep_{}.csv", values.axis()));
            write_sweep_csv(&table, &rows)?;
            plot_sweep(&rows, &out.join(format!("sweep_{}.svg", values.axis())))?;
            for r in &rows {
                let kl = r.kl.map(|k| format!("  KL {k:.4}")).unwrap_or_default();
                println!("{} = {:>8}: Acc {:.2} ± {:.2}  AUROC {:.2} ± {:.2}{kl}", r.axis, r.value, r.acc, r.acc_std, r.auroc, r.auroc_std);
            }
            println!("table: {}", table.display());
        }
        Command::Plot { table, out } => {
            let rows = read_sweep_csv(&table)?;
            plot_sweep(&rows, &out)?;
            println!("plot: {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error ({:?}): {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
