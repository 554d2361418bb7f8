//! Run orchestration: turn one experiment file into a directory of
//! artifacts.
//!
//! Every byte written here is a pure function of the config, so re-running
//! a pipeline into a fresh directory reproduces it exactly. A single seed
//! writes the flat layout
//!
//! ```text
//! out/
//!   config.snapshot  selection.json  trajectory.csv  eval.json
//!   beta.csv  beta.json  beta_worst.csv  (probe configured only)
//!   logs.txt
//! ```
//!
//! and a seed list writes one `seed_<s>/` sub-layout per seed plus a
//! `report.csv` aggregate at the root. Timestamps and timings stay out of
//! all of it.

use crate::bilevel::{run_selection, TrajectoryLog};
use crate::config::{CsvTask, ExperimentConfig, ModelSection};
use crate::data::{
    gaussian_matrix, generate_planted, ingest_csv, planted_base_model, IngestSchema, TargetKind,
};
use crate::error::{Error, Result};
use crate::finetune::{
    evaluate_carry, finetune_selected, oracle_to_csv, random_k_baseline, subset_oracle,
    EvalReport, OracleEntry,
};
use crate::gating::{AlphaVector, SelectionResult};
use crate::model::{Batch, GatedLoraModel, LayerSpec, Targets};
use crate::rng::Rng;
use crate::smoothness::{depth_sweep, per_layer_report, BetaReport, ChainFamily, ProbeMode};
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Datasets plus the per-seed starting model.
pub struct PreparedTask {
    pub train: Batch,
    pub val: Batch,
    pub test: Batch,
    pub base: GatedLoraModel,
}

fn csv_model(csv: &CsvTask, model: &ModelSection, seed: u64) -> Result<GatedLoraModel> {
    let dims = model
        .hidden_dims
        .as_ref()
        .ok_or_else(|| Error::config("model.hidden_dims", "required for csv tasks"))?;
    let activation = model
        .activation
        .ok_or_else(|| Error::config("model.activation", "required for csv tasks"))?;
    let mut d_in = csv.n_features;
    let mut specs = Vec::with_capacity(dims.len());
    for &d_out in dims {
        specs.push(LayerSpec {
            d_in,
            d_out,
            rank: model.rank,
            activation,
        });
        d_in = d_out;
    }
    let root = Rng::from_seed(seed);
    let weights = specs
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let mut rng = root.stream_indexed("base", j as u64);
            gaussian_matrix(&mut rng, s.d_out, s.d_in, 1.0 / (s.d_in as f64).sqrt())
        })
        .collect();
    let head = match (csv.target, csv.classes) {
        (TargetKind::Classes, Some(classes)) => {
            let last = *dims.last().unwrap();
            let mut rng = root.stream("head");
            Some(gaussian_matrix(&mut rng, classes, last, 1.0 / (last as f64).sqrt()))
        }
        _ => None,
    };
    GatedLoraModel::new(specs, weights, head)
}

/// Load or generate the task's three splits and build the seed's model.
pub fn prepare_task(config: &ExperimentConfig, seed: u64) -> Result<PreparedTask> {
    match (&config.task.planted, &config.task.csv) {
        (Some(planted), _) => {
            let (train, val, test) = generate_planted(planted, seed)?;
            let base = planted_base_model(planted, config.model.rank, seed)?;
            Ok(PreparedTask { train, val, test, base })
        }
        (None, Some(csv)) => {
            let schema = IngestSchema {
                n_features: csv.n_features,
                target: csv.target,
            };
            let train = ingest_csv(&csv.train, schema)?;
            let val = ingest_csv(&csv.val, schema)?;
            let test = ingest_csv(&csv.test, schema)?;
            let base = csv_model(csv, &config.model, seed)?;
            if let (Targets::Regression(y), None) = (&train.targets, base.head()) {
                if y.cols() != base.output_dim() {
                    return Err(Error::Invalid(format!(
                        "csv targets have {} columns but the model ends at width {}",
                        y.cols(),
                        base.output_dim()
                    )));
                }
            }
            Ok(PreparedTask { train, val, test, base })
        }
        (None, None) => Err(Error::config("task", "one of task.planted or task.csv is required")),
    }
}

/// Everything one seed produces, before any file is written.
pub struct SeedArtifacts {
    pub seed: u64,
    pub selection: SelectionResult,
    pub trajectory: TrajectoryLog,
    pub eval: EvalReport,
    pub beta: Option<BetaReport>,
    pub log: String,
}

fn task_log_line(config: &ExperimentConfig) -> String {
    match (&config.task.planted, &config.task.csv) {
        (Some(p), _) => format!(
            "task: planted depth={} dim={} planted={:?} teacher_rank={} delta_scale={} noise={}",
            p.depth, p.dim, p.planted, p.teacher_rank, p.delta_scale, p.noise
        ),
        (None, Some(c)) => format!(
            "task: csv train={} n_features={} target={:?}",
            c.train.display(),
            c.n_features,
            c.target
        ),
        (None, None) => "task: (missing)".into(),
    }
}

fn join_indices(idx: &[usize]) -> String {
    idx.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("|")
}

/// Stages 1 and 2 for one seed: dataset, starting model, selection run.
struct SelectStage {
    prepared: PreparedTask,
    /// The model as the selection loop left it (stage-2 adapters in place).
    model: GatedLoraModel,
    selection: SelectionResult,
    trajectory: TrajectoryLog,
    log: String,
}

fn select_stage(config: &ExperimentConfig, seed: u64) -> Result<SelectStage> {
    let prepared = prepare_task(config, seed)?;
    let run_cfg = config.run.to_run_config(config.model.rank, seed);
    let mut model = prepared.base.clone();
    let (selection, trajectory) =
        run_selection(&mut model, &prepared.train, &prepared.val, &run_cfg)?;

    let mut log = String::new();
    let _ = writeln!(log, "run seed={seed}");
    log.push_str(&task_log_line(config));
    log.push('\n');
    let sum_alpha: f64 = selection.alpha_final.iter().sum();
    let _ = writeln!(
        log,
        "selection: rule={} selected=[{}] outer_steps={} sum_alpha={sum_alpha:.6e}",
        selection.rule,
        join_indices(&selection.selected),
        trajectory.rows.len(),
    );
    if trajectory.warnings.is_empty() {
        log.push_str("warnings: none\n");
    } else {
        for w in &trajectory.warnings {
            let _ = writeln!(log, "warning: {w}");
        }
    }
    Ok(SelectStage {
        prepared,
        model,
        selection,
        trajectory,
        log,
    })
}

/// Select, retrain (or carry), optionally probe. No files are touched.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedArtifacts> {
    let SelectStage {
        prepared,
        mut model,
        selection,
        trajectory,
        mut log,
    } = select_stage(config, seed)?;
    let ft_cfg = config.finetune.to_finetune_config(seed);

    let carry_gates;
    let eval = if ft_cfg.carry_alpha {
        let alpha = AlphaVector::from_raw(selection.alpha_final.clone())?;
        carry_gates = Some(alpha.relaxed());
        let _ = writeln!(log, "finetune: mode=carry (stage-2 model evaluated as-is)");
        evaluate_carry(&model, &alpha, &prepared.train, &prepared.val, &prepared.test)?
    } else {
        carry_gates = None;
        let _ = writeln!(
            log,
            "finetune: mode=retrain epochs={} batch={} eta_theta={}",
            ft_cfg.epochs, ft_cfg.batch, ft_cfg.eta_theta
        );
        finetune_selected(
            &mut model,
            &selection.selected,
            &prepared.train,
            &prepared.val,
            &prepared.test,
            &ft_cfg,
        )?
    };
    let _ = writeln!(
        log,
        "eval: train={:.6e} val={:.6e} test={:.6e} trained_params={}",
        eval.train_loss, eval.val_loss, eval.test_loss, eval.trained_params
    );
    if let Some(acc) = eval.test_accuracy {
        let _ = writeln!(log, "eval: test_accuracy={acc:.4}");
    }

    let beta = match &config.probe {
        None => None,
        Some(probe_cfg) => {
            let report = match probe_cfg.mode {
                ProbeMode::PerLayer => {
                    // Probe whatever model was just evaluated, at the gates
                    // it was evaluated with. The estimate runs on its dense
                    // linear view; the log says so.
                    let gates = carry_gates
                        .clone()
                        .unwrap_or_else(|| vec![1.0; model.n_layers()]);
                    let _ = writeln!(
                        log,
                        "probe: per-layer on the dense linear view of the evaluated model"
                    );
                    per_layer_report(&model, &gates, probe_cfg, seed)?
                }
                ProbeMode::DepthSweep => {
                    let sweep = config.sweep.clone().unwrap_or_default();
                    let family = ChainFamily {
                        dim: prepared.base.input_dim(),
                        lambda: sweep.lambda,
                        seed,
                    };
                    let _ = writeln!(
                        log,
                        "probe: depth sweep dim={} lambda={} depths={:?}",
                        family.dim, family.lambda, sweep.depths
                    );
                    depth_sweep(&family, &sweep.depths, probe_cfg)?
                }
            };
            let max_ratio = report.rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
            let degenerate = report.rows.iter().filter(|r| r.degenerate).count();
            let _ = writeln!(
                log,
                "probe: rows={} max_ratio={max_ratio:.4} degenerate_rows={degenerate}",
                report.rows.len()
            );
            Some(report)
        }
    };

    Ok(SeedArtifacts {
        seed,
        selection,
        trajectory,
        eval,
        beta,
        log,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

/// Write one seed's artifact set into `dir`.
pub fn write_seed_dir(dir: &Path, artifacts: &SeedArtifacts) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join("selection.json"), &artifacts.selection.to_json()?)?;
    write_file(&dir.join("trajectory.csv"), &artifacts.trajectory.to_csv_string())?;
    write_file(&dir.join("eval.json"), &artifacts.eval.to_json()?)?;
    if let Some(beta) = &artifacts.beta {
        write_file(&dir.join("beta.csv"), &beta.to_csv_string())?;
        write_file(&dir.join("beta.json"), &beta.to_json()?)?;
        if let Some(worst) = beta.worst_to_csv_string() {
            write_file(&dir.join("beta_worst.csv"), &worst)?;
        }
    }
    write_file(&dir.join("logs.txt"), &artifacts.log)
}

/// Run an `f` under a thread pool of `jobs` workers, or the global pool.
pub fn with_jobs<T, F>(jobs: Option<usize>, f: F) -> Result<T>
where
    T: Send,
    F: FnOnce() -> Result<T> + Send,
{
    match jobs {
        None => f(),
        Some(j) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(j.max(1))
                .build()
                .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
            pool.install(f)
        }
    }
}

pub struct PipelineOutcome {
    pub out_dir: PathBuf,
    /// (seed, directory holding that seed's artifacts).
    pub seed_dirs: Vec<(u64, PathBuf)>,
}

/// The three-stage flow for every configured seed, written to disk.
pub fn run_pipeline(config: &ExperimentConfig, jobs: Option<usize>) -> Result<PipelineOutcome> {
    config.validate()?;
    let out = &config.output.dir;
    create_dir(out)?;
    write_file(&out.join("config.snapshot"), &config.to_toml_string()?)?;

    let artifacts: Vec<SeedArtifacts> = with_jobs(jobs, || {
        config
            .seeds
            .par_iter()
            .map(|&seed| run_seed(config, seed))
            .collect()
    })?;

    let mut seed_dirs = Vec::with_capacity(artifacts.len());
    if let [single] = &artifacts[..] {
        write_seed_dir(out, single)?;
        seed_dirs.push((single.seed, out.clone()));
    } else {
        for art in &artifacts {
            let dir = out.join(format!("seed_{}", art.seed));
            write_seed_dir(&dir, art)?;
            seed_dirs.push((art.seed, dir));
        }
        let dirs: Vec<PathBuf> = seed_dirs.iter().map(|(_, d)| d.clone()).collect();
        write_file(&out.join("report.csv"), &aggregate_runs(&dirs)?)?;
    }
    Ok(PipelineOutcome {
        out_dir: out.clone(),
        seed_dirs,
    })
}

fn seed_dir_for(out: &Path, seed: u64, single: bool) -> PathBuf {
    if single {
        out.to_path_buf()
    } else {
        out.join(format!("seed_{seed}"))
    }
}

/// Stages 1 and 2 only: write selection.json, trajectory.csv, and logs.txt
/// per seed, with no retraining pass.
pub fn run_select_cmd(config: &ExperimentConfig, jobs: Option<usize>) -> Result<PipelineOutcome> {
    config.validate()?;
    let out = &config.output.dir;
    create_dir(out)?;
    write_file(&out.join("config.snapshot"), &config.to_toml_string()?)?;

    let stages: Vec<(u64, SelectStage)> = with_jobs(jobs, || {
        config
            .seeds
            .par_iter()
            .map(|&seed| select_stage(config, seed).map(|s| (seed, s)))
            .collect()
    })?;

    let single = stages.len() == 1;
    let mut seed_dirs = Vec::with_capacity(stages.len());
    for (seed, stage) in &stages {
        let dir = seed_dir_for(out, *seed, single);
        create_dir(&dir)?;
        write_file(&dir.join("selection.json"), &stage.selection.to_json()?)?;
        write_file(&dir.join("trajectory.csv"), &stage.trajectory.to_csv_string())?;
        write_file(&dir.join("logs.txt"), &stage.log)?;
        seed_dirs.push((*seed, dir));
    }
    Ok(PipelineOutcome {
        out_dir: out.clone(),
        seed_dirs,
    })
}

/// Stage 3 from saved selections: rebuild each seed's base model, retrain
/// the selected layers, and write eval.json beside the selection.
///
/// Retraining reinitializes the selected adapters and drops frozen layers
/// from the forward pass, so starting from the fresh base model reproduces
/// a full pipeline's stage 3 exactly. `selection_path` overrides where the
/// selection is read from (single-seed runs only); the default is each
/// seed directory's own selection.json.
pub fn run_finetune_cmd(
    config: &ExperimentConfig,
    selection_path: Option<&Path>,
) -> Result<Vec<PathBuf>> {
    config.validate()?;
    if config.finetune.carry_alpha {
        return Err(Error::config(
            "finetune.carry_alpha",
            "carrying gates needs the stage-2 adapters in memory; run the pipeline subcommand",
        ));
    }
    let single = config.seeds.len() == 1;
    if selection_path.is_some() && !single {
        return Err(Error::Invalid(
            "an explicit selection file only applies to a single-seed run".into(),
        ));
    }
    let out = &config.output.dir;
    let mut written = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let dir = seed_dir_for(out, seed, single);
        let sel_file = selection_path
            .map(Path::to_path_buf)
            .unwrap_or_else(|| dir.join("selection.json"));
        let selection = SelectionResult::load(&sel_file)?;
        let prepared = prepare_task(config, seed)?;
        if selection.n != prepared.base.n_layers() {
            return Err(Error::Invalid(format!(
                "selection covers {} layers but the model has {}",
                selection.n,
                prepared.base.n_layers()
            )));
        }
        let ft_cfg = config.finetune.to_finetune_config(seed);
        let mut model = prepared.base;
        let eval = finetune_selected(
            &mut model,
            &selection.selected,
            &prepared.train,
            &prepared.val,
            &prepared.test,
            &ft_cfg,
        )?;
        create_dir(&dir)?;
        let mut log = String::new();
        let _ = writeln!(log, "finetune seed={seed} selection={}", sel_file.display());
        let _ = writeln!(
            log,
            "finetune: selected=[{}] epochs={} batch={} eta_theta={}",
            join_indices(&selection.selected),
            ft_cfg.epochs,
            ft_cfg.batch,
            ft_cfg.eta_theta
        );
        let _ = writeln!(
            log,
            "eval: train={:.6e} val={:.6e} test={:.6e} trained_params={}",
            eval.train_loss, eval.val_loss, eval.test_loss, eval.trained_params
        );
        write_file(&dir.join("eval.json"), &eval.to_json()?)?;
        write_file(&dir.join("finetune_logs.txt"), &log)?;
        written.push(dir.join("eval.json"));
    }
    Ok(written)
}

/// Run directories under `root`: the root itself when it holds a
/// selection.json, otherwise its `seed_*` children, seed-sorted.
pub fn discover_run_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join("selection.json").is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let entries = std::fs::read_dir(root)
        .map_err(|e| Error::io(format!("reading {}", root.display()), e))?;
    let mut found: Vec<(u64, PathBuf)> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(format!("reading {}", root.display()), e))?;
        let path = entry.path();
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(seed_str) = name.strip_prefix("seed_") {
            if let Ok(seed) = seed_str.parse::<u64>() {
                if path.join("selection.json").is_file() {
                    found.push((seed, path));
                }
            }
        }
    }
    if found.is_empty() {
        return Err(Error::Invalid(format!(
            "no run directories under {}",
            root.display()
        )));
    }
    found.sort_by_key(|(s, _)| *s);
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

fn float_cell(v: f64) -> String {
    format!("{v:.16e}")
}

/// One CSV over a set of run directories: every eval.json field plus the
/// selection summary. Gate-logit history is not repeated here; it already
/// lives in each run's trajectory.csv.
pub fn aggregate_runs(dirs: &[PathBuf]) -> Result<String> {
    let mut out = String::from(
        "run,n_layers,rule,selected,n_selected,alpha_final,train_loss,val_loss,test_loss,test_accuracy,trained_params\n",
    );
    for dir in dirs {
        let selection = SelectionResult::load(&dir.join("selection.json"))?;
        let eval_text = std::fs::read_to_string(dir.join("eval.json"))
            .map_err(|e| Error::io(format!("reading {}", dir.join("eval.json").display()), e))?;
        let eval = EvalReport::from_json(&eval_text)?;
        let run = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let alpha = selection
            .alpha_final
            .iter()
            .map(|&a| float_cell(a))
            .collect::<Vec<_>>()
            .join("|");
        let accuracy = eval.test_accuracy.map(float_cell).unwrap_or_default();
        let _ = writeln!(
            out,
            "{run},{},{},{},{},{alpha},{},{},{},{accuracy},{}",
            selection.n,
            selection.rule,
            join_indices(&selection.selected),
            selection.selected.len(),
            float_cell(eval.train_loss),
            float_cell(eval.val_loss),
            float_cell(eval.test_loss),
            eval.trained_params
        );
    }
    Ok(out)
}

/// Exhaustive subset certification on one seed's task, written as
/// oracle.csv plus a log.
pub fn run_oracle_cmd(
    config: &ExperimentConfig,
    seed: u64,
    jobs: Option<usize>,
) -> Result<(PathBuf, Vec<OracleEntry>)> {
    config.validate()?;
    let prepared = prepare_task(config, seed)?;
    let ft_cfg = config.finetune.to_finetune_config(seed);
    let entries = subset_oracle(
        &prepared.base,
        &prepared.train,
        &prepared.val,
        &prepared.test,
        &ft_cfg,
        jobs,
    )?;
    let out = &config.output.dir;
    create_dir(out)?;
    write_file(&out.join("oracle.csv"), &oracle_to_csv(&entries))?;
    let mut log = format!("oracle seed={seed} subsets={}\n", entries.len());
    let mut order: Vec<&OracleEntry> = entries.iter().collect();
    order.sort_by(|a, b| {
        a.val_loss
            .partial_cmp(&b.val_loss)
            .expect("losses are finite")
            .then(a.bitmask.cmp(&b.bitmask))
    });
    for (rank, e) in order.iter().take(5).enumerate() {
        let _ = writeln!(
            log,
            "rank {}: subset=[{}] val_loss={:.6e}",
            rank + 1,
            join_indices(&e.subset),
            e.val_loss
        );
    }
    write_file(&out.join("oracle_logs.txt"), &log)?;
    Ok((out.join("oracle.csv"), entries))
}

/// Standalone smoothness probe. Per-layer mode probes the seed's base
/// model (zero adapters, every gate 1), depth-sweep mode probes the
/// generated chain family; both write beta.csv/beta.json under the output
/// directory.
pub fn run_probe_cmd(config: &ExperimentConfig, seed: u64) -> Result<(PathBuf, BetaReport)> {
    config.validate()?;
    let probe_cfg = config
        .probe
        .ok_or_else(|| Error::config("probe", "a [probe] section is required"))?;
    let report = match probe_cfg.mode {
        ProbeMode::PerLayer => {
            let prepared = prepare_task(config, seed)?;
            let gates = vec![1.0; prepared.base.n_layers()];
            per_layer_report(&prepared.base, &gates, &probe_cfg, seed)?
        }
        ProbeMode::DepthSweep => {
            let sweep = config.sweep.clone().unwrap_or_default();
            let dim = match (&config.task.planted, &config.task.csv) {
                (Some(p), _) => p.dim,
                (None, Some(c)) => c.n_features,
                (None, None) => return Err(Error::config("task", "a task is required")),
            };
            let family = ChainFamily { dim, lambda: sweep.lambda, seed };
            depth_sweep(&family, &sweep.depths, &probe_cfg)?
        }
    };
    let out = &config.output.dir;
    create_dir(out)?;
    write_file(&out.join("beta.csv"), &report.to_csv_string())?;
    write_file(&out.join("beta.json"), &report.to_json()?)?;
    if let Some(worst) = report.worst_to_csv_string() {
        write_file(&out.join("beta_worst.csv"), &worst)?;
    }
    Ok((out.join("beta.csv"), report))
}

/// The grids the sweep subcommand can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepGrid {
    /// Selected set per (K, T) cell per seed.
    Kt,
    /// Best-of-random subsets per layer count.
    Layers,
    /// Selected set per seed.
    Seeds,
    /// Smoothness versus chain depth.
    Depth,
}

impl FromStr for SweepGrid {
    type Err = Error;

    fn from_str(s: &str) -> Result<SweepGrid> {
        match s.to_ascii_lowercase().as_str() {
            "kt" => Ok(SweepGrid::Kt),
            "layers" => Ok(SweepGrid::Layers),
            "seeds" => Ok(SweepGrid::Seeds),
            "depth" => Ok(SweepGrid::Depth),
            other => Err(Error::Invalid(format!(
                "unknown grid `{other}`; expected kt, layers, seeds, or depth"
            ))),
        }
    }
}

impl std::fmt::Display for SweepGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepGrid::Kt => "kt",
            SweepGrid::Layers => "layers",
            SweepGrid::Seeds => "seeds",
            SweepGrid::Depth => "depth",
        })
    }
}

fn kt_sweep(config: &ExperimentConfig) -> Result<String> {
    let sweep = config.sweep.clone().unwrap_or_default();
    let mut cells = Vec::new();
    for &seed in &config.seeds {
        for &k in &sweep.ks {
            for &t in &sweep.ts {
                cells.push((seed, k, t));
            }
        }
    }
    let rows: Vec<String> = cells
        .par_iter()
        .map(|&(seed, k, t)| -> Result<String> {
            let prepared = prepare_task(config, seed)?;
            let mut run_cfg = config.run.to_run_config(config.model.rank, seed);
            run_cfg.k = k;
            run_cfg.t = t;
            let mut model = prepared.base.clone();
            let (selection, _) =
                run_selection(&mut model, &prepared.train, &prepared.val, &run_cfg)?;
            Ok(format!("{seed},{k},{t},{}", join_indices(&selection.selected)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = String::from("seed,K,T,selected\n");
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    Ok(out)
}

fn layers_sweep(config: &ExperimentConfig) -> Result<String> {
    let sweep = config.sweep.clone().unwrap_or_default();
    let n = config.n_layers();
    let counts = sweep
        .layer_counts
        .clone()
        .unwrap_or_else(|| (0..=n).collect());
    let mut cells = Vec::new();
    for &seed in &config.seeds {
        for &k in &counts {
            for draw in 0..sweep.random_per_count {
                cells.push((seed, k, draw));
            }
        }
    }
    let rows: Vec<String> = cells
        .par_iter()
        .map(|&(seed, k, draw)| -> Result<String> {
            let prepared = prepare_task(config, seed)?;
            let ft_cfg = config.finetune.to_finetune_config(seed);
            let draw_seed = Rng::from_seed(seed)
                .stream_indexed("layer-grid", (k * sweep.random_per_count + draw) as u64)
                .next_u64();
            let mut model = prepared.base.clone();
            let (subset, report) = random_k_baseline(
                &mut model,
                k,
                draw_seed,
                &prepared.train,
                &prepared.val,
                &prepared.test,
                &ft_cfg,
            )?;
            Ok(format!(
                "{seed},{k},{draw},{},{},{}",
                join_indices(&subset),
                float_cell(report.val_loss),
                float_cell(report.test_loss)
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = String::from("seed,k,draw,subset,val_loss,test_loss\n");
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    Ok(out)
}

fn seeds_sweep(config: &ExperimentConfig) -> Result<String> {
    let rows: Vec<String> = config
        .seeds
        .par_iter()
        .map(|&seed| -> Result<String> {
            let prepared = prepare_task(config, seed)?;
            let run_cfg = config.run.to_run_config(config.model.rank, seed);
            let mut model = prepared.base.clone();
            let (selection, _) =
                run_selection(&mut model, &prepared.train, &prepared.val, &run_cfg)?;
            let sum_alpha: f64 = selection.alpha_final.iter().sum();
            Ok(format!(
                "{seed},{},{}",
                join_indices(&selection.selected),
                float_cell(sum_alpha)
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = String::from("seed,selected,sum_alpha\n");
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    Ok(out)
}

/// Run one grid and write its artifacts under `out/sweep_<grid>/`.
pub fn run_sweep_cmd(
    config: &ExperimentConfig,
    grid: SweepGrid,
    jobs: Option<usize>,
) -> Result<PathBuf> {
    config.validate()?;
    let dir = config.output.dir.join(format!("sweep_{grid}"));
    create_dir(&dir)?;
    match grid {
        SweepGrid::Kt => {
            let csv = with_jobs(jobs, || kt_sweep(config))?;
            write_file(&dir.join("cells.csv"), &csv)?;
        }
        SweepGrid::Layers => {
            let csv = with_jobs(jobs, || layers_sweep(config))?;
            write_file(&dir.join("cells.csv"), &csv)?;
        }
        SweepGrid::Seeds => {
            let csv = with_jobs(jobs, || seeds_sweep(config))?;
            write_file(&dir.join("cells.csv"), &csv)?;
        }
        SweepGrid::Depth => {
            let sweep = config.sweep.clone().unwrap_or_default();
            let probe_cfg = config.probe.unwrap_or_default();
            let dim = match (&config.task.planted, &config.task.csv) {
                (Some(p), _) => p.dim,
                (None, Some(c)) => c.n_features,
                (None, None) => return Err(Error::config("task", "a task is required")),
            };
            let family = ChainFamily {
                dim,
                lambda: sweep.lambda,
                seed: config.seeds[0],
            };
            let report = with_jobs(jobs, || depth_sweep(&family, &sweep.depths, &probe_cfg))?;
            write_file(&dir.join("beta.csv"), &report.to_csv_string())?;
            write_file(&dir.join("beta.json"), &report.to_json()?)?;
            if let Some(worst) = report.worst_to_csv_string() {
                write_file(&dir.join("beta_worst.csv"), &worst)?;
            }
        }
    }
    Ok(dir)
}
