//! `loragate`: run gate selection, retraining, probes, oracles, and sweeps
//! from one experiment file.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration rejected (the
//! message names the offending key).

use clap::{Args, Parser, Subcommand};
use loragate_core::{
    aggregate_runs, discover_run_dirs, run_finetune_cmd, run_oracle_cmd, run_pipeline,
    run_probe_cmd, run_select_cmd, run_sweep_cmd, Error, ExperimentConfig, Result, SelectionRule,
    SweepGrid,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "loragate", version, about = "Gated low-rank adapters with automatic layer selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the configured seed list with this one seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for parallel seeds, grid cells, and oracle subsets.
    #[arg(long)]
    jobs: Option<usize>,
    /// Override the selection rule: `threshold` or `topk:K`.
    #[arg(long)]
    rule: Option<SelectionRule>,
    /// Accept an empty selected set instead of erroring.
    #[arg(long)]
    allow_empty_selection: bool,
}

impl CommonArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = ExperimentConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            config.output.dir = out.clone();
        }
        if let Some(seed) = self.seed {
            config.seeds = vec![seed];
        }
        if let Some(rule) = self.rule {
            config.run.rule = rule;
        }
        if self.allow_empty_selection {
            config.run.allow_empty_selection = true;
            config.finetune.allow_empty = true;
        }
        Ok(config)
    }

    /// The seed single-run subcommands operate on.
    fn one_seed(&self, config: &ExperimentConfig) -> u64 {
        self.seed.unwrap_or(config.seeds[0])
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run gate selection (alternating adapter and logit steps) and write
    /// the selection artifacts, without retraining.
    Select(CommonArgs),
    /// Retrain the layers named by a saved selection and write eval.json.
    Finetune(FinetuneArgs),
    /// Full flow per configured seed: select, retrain, optionally probe.
    Pipeline(CommonArgs),
    /// Fine-tune every layer subset exhaustively and rank them by
    /// validation loss.
    Oracle(CommonArgs),
    /// Estimate gradient smoothness per layer (or per depth) and compare
    /// against the operator-norm bounds.
    Probe(CommonArgs),
    /// Run a robustness grid: kt, layers, seeds, or depth.
    Sweep(SweepArgs),
    /// Aggregate finished run directories into one report.csv.
    Report(ReportArgs),
    /// Check an experiment file and print its canonical form.
    ValidateConfig(ValidateArgs),
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Selection file to retrain from; defaults to selection.json in the
    /// run directory. Single-seed runs only.
    #[arg(long)]
    selection: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Which grid to run.
    #[arg(long)]
    grid: SweepGrid,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding one run or seed_N subdirectories.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    /// Experiment file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Print nothing on success.
    #[arg(long)]
    quiet: bool,
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Select(args) => {
            let config = args.load()?;
            let outcome = run_select_cmd(&config, args.jobs)?;
            for (_, dir) in &outcome.seed_dirs {
                println!("{}", dir.join("selection.json").display());
            }
        }
        Command::Finetune(args) => {
            let config = args.common.load()?;
            let written = run_finetune_cmd(&config, args.selection.as_deref())?;
            for path in &written {
                println!("{}", path.display());
            }
        }
        Command::Pipeline(args) => {
            let config = args.load()?;
            let outcome = run_pipeline(&config, args.jobs)?;
            for (_, dir) in &outcome.seed_dirs {
                println!("{}", dir.display());
            }
            let report = outcome.out_dir.join("report.csv");
            if report.is_file() {
                println!("{}", report.display());
            }
        }
        Command::Oracle(args) => {
            let config = args.load()?;
            let seed = args.one_seed(&config);
            let (path, entries) = run_oracle_cmd(&config, seed, args.jobs)?;
            let best = entries
                .iter()
                .min_by(|a, b| a.val_loss.total_cmp(&b.val_loss))
                .expect("oracle always evaluates the empty subset");
            println!("{}", path.display());
            println!(
                "best subset=[{}] val_loss={:.6e}",
                best.subset
                    .iter()
                    .map(|i| i.to_string())
                    .collect::<Vec<_>>()
                    .join("|"),
                best.val_loss
            );
        }
        Command::Probe(args) => {
            let config = args.load()?;
            let seed = args.one_seed(&config);
            let (path, report) = run_probe_cmd(&config, seed)?;
            let max_ratio = report.rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
            println!("{}", path.display());
            println!("rows={} max_ratio={max_ratio:.4}", report.rows.len());
        }
        Command::Sweep(args) => {
            let config = args.common.load()?;
            let dir = run_sweep_cmd(&config, args.grid, args.common.jobs)?;
            println!("{}", dir.display());
        }
        Command::Report(args) => {
            let dirs = discover_run_dirs(&args.out)?;
            let csv = aggregate_runs(&dirs)?;
            let path = args.out.join("report.csv");
            std::fs::write(&path, csv)
                .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
            println!("{}", path.display());
        }
        Command::ValidateConfig(args) => {
            let config = ExperimentConfig::load(&args.config)?;
            if !args.quiet {
                print!("{}", config.to_toml_string()?);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
