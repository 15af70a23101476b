//! Command line for the desk-scale reasoning experiments:
//! `gen-data`, `train`, `eval`, `dump`, `interpolate`, `report`.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use daft_core::harness::{build_config, checkpoint, dump, eval, report, train, SolverSpec};
use daft_core::ode::Method;
use daft_core::taskgen;

#[derive(Parser)]
#[command(name = "daft", version, about = "Continuous-attention reasoning at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Every config key is also a flag; flags override the config file.
#[derive(Args, Clone, Default)]
struct ConfigFlags {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// mac | daft | daft_residual | mac_tlt_penalty
    #[arg(long)]
    model: Option<String>,
    /// Reasoning steps T.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    e: Option<usize>,
    /// identity | tanh | elu
    #[arg(long)]
    nonlinearity: Option<String>,
    /// shared | per_interval
    #[arg(long)]
    sharing: Option<String>,
    /// TLT penalty weight for mac_tlt_penalty.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// euler | rk4_38 | dopri5
    #[arg(long)]
    train_solver: Option<String>,
    #[arg(long)]
    train_fixed_steps: Option<usize>,
    #[arg(long)]
    train_rtol: Option<f64>,
    #[arg(long)]
    train_atol: Option<f64>,
    /// euler | rk4_38 | dopri5
    #[arg(long)]
    eval_solver: Option<String>,
    #[arg(long)]
    eval_fixed_steps: Option<usize>,
    #[arg(long)]
    eval_rtol: Option<f64>,
    #[arg(long)]
    eval_atol: Option<f64>,
    #[arg(long)]
    max_nfe: Option<usize>,
    #[arg(long)]
    tlt_subset: Option<usize>,
    #[arg(long)]
    data_train: Option<String>,
    #[arg(long)]
    data_val: Option<String>,
    /// desk | paper | custom
    #[arg(long)]
    preset: Option<String>,
}

impl ConfigFlags {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut kv = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                kv.push((k.to_string(), v));
            }
        };
        push("preset", self.preset.clone());
        push("model", self.model.clone());
        push("steps", self.steps.map(|v| v.to_string()));
        push("d", self.d.map(|v| v.to_string()));
        push("e", self.e.map(|v| v.to_string()));
        push("nonlinearity", self.nonlinearity.clone());
        push("sharing", self.sharing.clone());
        push("lambda", self.lambda.map(|v| v.to_string()));
        push("lr", self.lr.map(|v| v.to_string()));
        push("batch_size", self.batch_size.map(|v| v.to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        push("max_epochs", self.max_epochs.map(|v| v.to_string()));
        push("train_solver", self.train_solver.clone());
        push(
            "train_fixed_steps",
            self.train_fixed_steps.map(|v| v.to_string()),
        );
        push("train_rtol", self.train_rtol.map(|v| v.to_string()));
        push("train_atol", self.train_atol.map(|v| v.to_string()));
        push("eval_solver", self.eval_solver.clone());
        push(
            "eval_fixed_steps",
            self.eval_fixed_steps.map(|v| v.to_string()),
        );
        push("eval_rtol", self.eval_rtol.map(|v| v.to_string()));
        push("eval_atol", self.eval_atol.map(|v| v.to_string()));
        push("max_nfe", self.max_nfe.map(|v| v.to_string()));
        push("tlt_subset", self.tlt_subset.map(|v| v.to_string()));
        push("data_train", self.data_train.clone());
        push("data_val", self.data_val.clone());
        kv
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic reasoning dataset as train/val JSONL.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20_000)]
        n_train: usize,
        #[arg(long, default_value_t = 4_000)]
        n_val: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model; writes checkpoint.json, train_log.csv, and
    /// summary.json into --out.
    Train {
        #[command(flatten)]
        cfg: ConfigFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a JSONL split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// euler | rk4_38 | dopri5; overrides the checkpoint's
        /// evaluation solver (continuous cell only).
        #[arg(long)]
        solver: Option<String>,
        #[arg(long)]
        eval_fixed_steps: Option<usize>,
        /// Also measure wall time per batch (printed, never written).
        #[arg(long)]
        timing: bool,
        /// Metrics CSV destination.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump attention matrices and transition lengths as JSONL.
    Dump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// How many examples to dump.
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        samples_per_interval: usize,
        /// Also write per-example CSV matrices and SVG heatmaps here.
        #[arg(long)]
        heatmap_dir: Option<PathBuf>,
    },
    /// Fine-grained attention interpolation between reasoning steps.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Samples per unit interval.
        #[arg(long, default_value_t = 20)]
        rate: usize,
        #[arg(long, default_value_t = 8)]
        n: usize,
    },
    /// Aggregate run directories into plot-ready comparison CSVs.
    Report {
        #[arg(long)]
        out: PathBuf,
        /// Run directories containing summary.json.
        runs: Vec<PathBuf>,
    },
}

fn parse_solver_flag(
    s: Option<String>,
    fixed_steps: Option<usize>,
    base: SolverSpec,
) -> Result<Option<SolverSpec>> {
    match s {
        None => Ok(None),
        Some(name) => {
            let method = Method::parse(&name)
                .with_context(|| format!("unknown solver '{name}' (euler | rk4_38 | dopri5)"))?;
            let mut spec = base;
            spec.method = method;
            if let Some(n) = fixed_steps {
                spec.fixed_steps = n;
            }
            Ok(Some(spec))
        }
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData {
            out,
            n_train,
            n_val,
            seed,
        } => {
            if n_train == 0 || n_val == 0 {
                bail!("n_train and n_val must be at least 1");
            }
            std::fs::create_dir_all(&out)?;
            let ds = taskgen::generate_dataset(n_train, n_val, seed);
            let train_path = out.join("train.jsonl");
            let val_path = out.join("val.jsonl");
            taskgen::write_jsonl(&ds.train, std::fs::File::create(&train_path)?)?;
            taskgen::write_jsonl(&ds.val, std::fs::File::create(&val_path)?)?;
            println!(
                "wrote {} train to {} and {} val to {}",
                ds.train.len(),
                train_path.display(),
                ds.val.len(),
                val_path.display()
            );
        }
        Command::Train { cfg, out } => {
            let config = build_config(cfg.config.as_deref(), &cfg.overrides())?;
            let result = train(&config, &out)?;
            println!(
                "done: best val_acc {:.4} at epoch {} ({}); artifacts in {}",
                result.best_val_acc,
                result.best_epoch,
                result.stop_reason,
                out.display()
            );
        }
        Command::Eval {
            checkpoint: ckpt,
            data,
            solver,
            eval_fixed_steps,
            timing,
            out,
        } => {
            let (config, model) = checkpoint::load_checkpoint(&ckpt)?;
            let examples = taskgen::load_encoded(&data)?;
            let requested = parse_solver_flag(solver, eval_fixed_steps, config.eval_solver)?;
            let report = eval::evaluate(&model, &config, &examples, requested)?;
            if let Some(w) = &report.warning {
                eprintln!("warning: {w}");
            }
            println!(
                "n {}  accuracy {:.4}  mean_tlt {:.4}{}  solver {}",
                report.n,
                report.accuracy,
                report.mean_tlt,
                report
                    .tlt_ci95
                    .map(|x| format!(" +-{x:.4}"))
                    .unwrap_or_default(),
                report.solver
            );
            for t in &report.per_type {
                println!(
                    "  {:<18} n {:>5}  acc {:.4}  tlt {:.4}",
                    t.question_type, t.n, t.accuracy, t.mean_tlt
                );
            }
            if let (Some(m), Some(x)) = (report.mean_nfe, report.max_nfe) {
                println!("  nfe mean {m:.2} max {x}");
            }
            if timing {
                let ms = eval::measure_batch_time(&model, &config, &examples, requested)?;
                println!("  wall time per batch of {}: {ms:.2} ms", config.batch_size);
            }
            if let Some(path) = out {
                eval::write_eval_csv(&report, &path)?;
            }
        }
        Command::Dump {
            checkpoint: ckpt,
            data,
            out,
            n,
            samples_per_interval,
            heatmap_dir,
        } => {
            let (config, model) = checkpoint::load_checkpoint(&ckpt)?;
            let examples = taskgen::load_encoded(&data)?;
            let records =
                dump::dump_attention(&model, &config, &examples, n, samples_per_interval, None)?;
            dump::write_dump_jsonl(&records, &out)?;
            if let Some(dir) = heatmap_dir {
                dump::write_heatmaps(&records, &dir)?;
            }
            println!("dumped {} records to {}", records.len(), out.display());
        }
        Command::Interpolate {
            checkpoint: ckpt,
            data,
            out,
            rate,
            n,
        } => {
            let (config, model) = checkpoint::load_checkpoint(&ckpt)?;
            let examples = taskgen::load_encoded(&data)?;
            let records = dump::interpolate_dump(&model, &config, &examples, n, rate, None)?;
            dump::write_interpolation_jsonl(&records, &out)?;
            println!(
                "interpolated {} examples at rate {rate} to {}",
                records.len(),
                out.display()
            );
        }
        Command::Report { out, runs } => {
            if runs.is_empty() {
                bail!("give at least one run directory");
            }
            let summary = report::report(&runs, &out)?;
            println!(
                "aggregated {} runs into {} ({} incomplete)",
                summary.runs.len(),
                out.display(),
                summary.incomplete.len()
            );
            for (dir, reason) in &summary.incomplete {
                eprintln!("incomplete: {} ({reason})", dir.display());
            }
        }
    }
    Ok(())
}
