//! The experiment file: one TOML document that pins a whole run.
//!
//! Section structs mirror the runtime configs but leave out the seed, which
//! comes from the top-level `seeds` list so one file can drive a seed grid.
//! Unknown keys are rejected everywhere, and [`ExperimentConfig::validate`]
//! checks cross-field rules up front so a run never dies halfway in;
//! validation errors carry the offending key path.

use crate::bilevel::{EarlyStop, RunConfig};
use crate::data::{PlantedTask, TargetKind};
use crate::error::{Error, Result};
use crate::finetune::{FinetuneConfig, LossKind};
use crate::gating::SelectionRule;
use crate::model::Activation;
use crate::smoothness::{ProbeMode, SmoothnessProbeConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// A tabular task read from three CSV files. The files are shared across
/// seeds; only the model initialization varies per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvTask {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    pub n_features: usize,
    pub target: TargetKind,
    /// Class count, required for `target = "classes"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
}

/// Exactly one of the two task sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted: Option<PlantedTask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<CsvTask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Adapter rank, shared by every layer.
    pub rank: usize,
    /// Layer output widths for CSV tasks; the input width is n_features.
    /// Planted tasks define their own chain and reject this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_dims: Option<Vec<usize>>,
    /// Activation for CSV-task models; planted tasks carry their own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
}

fn threshold_rule() -> SelectionRule {
    SelectionRule::Threshold
}

/// [`RunConfig`] minus seed and rank, which the experiment supplies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub eta_theta: f64,
    pub eta_alpha: f64,
    pub batch_train: usize,
    pub batch_val: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early_stop: Option<EarlyStop>,
    #[serde(default = "threshold_rule")]
    pub rule: SelectionRule,
    #[serde(default)]
    pub allow_empty_selection: bool,
}

impl RunSection {
    pub fn to_run_config(&self, rank: usize, seed: u64) -> RunConfig {
        RunConfig {
            t: self.t,
            k: self.k,
            eta_theta: self.eta_theta,
            eta_alpha: self.eta_alpha,
            batch_train: self.batch_train,
            batch_val: self.batch_val,
            seed,
            early_stop: self.early_stop,
            rank,
            rule: self.rule,
            allow_empty_selection: self.allow_empty_selection,
        }
    }
}

fn default_eval_every() -> usize {
    1
}

/// [`FinetuneConfig`] minus the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub eta_theta: f64,
    pub batch: usize,
    pub loss: LossKind,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub allow_empty: bool,
    #[serde(default)]
    pub carry_alpha: bool,
}

impl FinetuneSection {
    pub fn to_finetune_config(&self, seed: u64) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.epochs,
            eta_theta: self.eta_theta,
            batch: self.batch,
            seed,
            loss: self.loss,
            eval_every: self.eval_every,
            allow_empty: self.allow_empty,
            carry_alpha: self.carry_alpha,
        }
    }
}

fn default_ks() -> Vec<usize> {
    vec![4, 8]
}

fn default_ts() -> Vec<usize> {
    vec![300, 600, 1200]
}

fn default_random_per_count() -> usize {
    3
}

fn default_depths() -> Vec<usize> {
    (1..=8).collect()
}

fn default_lambda() -> f64 {
    1.5
}

/// Grid axes for the sweep subcommand. Each grid uses the axes it needs and
/// ignores the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Inner-step counts for the (K, T) grid.
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
    /// Outer-step budgets for the (K, T) grid.
    #[serde(default = "default_ts")]
    pub ts: Vec<usize>,
    /// Subset sizes for the layer-count grid; defaults to 0..=N at run time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_counts: Option<Vec<usize>>,
    /// Random subsets drawn per layer count; the best validation loss wins.
    #[serde(default = "default_random_per_count")]
    pub random_per_count: usize,
    /// Chain depths for the smoothness depth grid.
    #[serde(default = "default_depths")]
    pub depths: Vec<usize>,
    /// Per-layer spectral norm of the generated chains.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            ks: default_ks(),
            ts: default_ts(),
            layer_counts: None,
            random_per_count: default_random_per_count(),
            depths: default_depths(),
            lambda: default_lambda(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// One full pipeline per seed: data (planted), initialization, batch
    /// order, everything.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub task: TaskSection,
    pub model: ModelSection,
    pub run: RunSection,
    pub finetune: FinetuneSection,
    /// Present means: probe the fine-tuned model and write beta reports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<SmoothnessProbeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    pub output: OutputSection,
}

fn config_err(path: &str, message: impl Into<String>) -> Error {
    Error::config(path, message)
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<ExperimentConfig> {
        let config: ExperimentConfig = toml::from_str(s)
            .map_err(|e| config_err("(toml)", e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let config: ExperimentConfig = toml::from_str(&text).map_err(|e| {
            config_err(&path.display().to_string(), e.message().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Canonical serialization, written verbatim as the run's
    /// config.snapshot.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Invalid(format!("config snapshot: {e}")))
    }

    /// The planted task when that is the source.
    pub fn planted(&self) -> Option<&PlantedTask> {
        self.task.planted.as_ref()
    }

    pub fn csv(&self) -> Option<&CsvTask> {
        self.task.csv.as_ref()
    }

    /// Layer count of the model this config builds.
    pub fn n_layers(&self) -> usize {
        match &self.task.planted {
            Some(p) => p.depth,
            None => self.model.hidden_dims.as_ref().map_or(0, |d| d.len()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "at least one seed is required"));
        }
        let n_layers = match (&self.task.planted, &self.task.csv) {
            (Some(_), Some(_)) => {
                return Err(config_err("task", "give either task.planted or task.csv, not both"))
            }
            (None, None) => {
                return Err(config_err("task", "one of task.planted or task.csv is required"))
            }
            (Some(planted), None) => {
                planted
                    .validate()
                    .map_err(|e| config_err("task.planted", e.to_string()))?;
                if self.model.hidden_dims.is_some() {
                    return Err(config_err(
                        "model.hidden_dims",
                        "planted tasks define their own chain",
                    ));
                }
                if self.model.activation.is_some() {
                    return Err(config_err(
                        "model.activation",
                        "planted tasks define their own activation",
                    ));
                }
                if self.model.rank > planted.dim {
                    return Err(config_err(
                        "model.rank",
                        format!("rank {} exceeds layer width {}", self.model.rank, planted.dim),
                    ));
                }
                let kind_ok = match self.finetune.loss {
                    LossKind::Mse => planted.classes.is_none(),
                    LossKind::CrossEntropy => planted.classes.is_some(),
                };
                if !kind_ok {
                    return Err(config_err(
                        "finetune.loss",
                        "mse pairs with regression tasks, cross_entropy with classification",
                    ));
                }
                if self.run.batch_train > planted.n_train {
                    return Err(config_err(
                        "run.batch_train",
                        format!("{} exceeds n_train {}", self.run.batch_train, planted.n_train),
                    ));
                }
                if self.run.batch_val > planted.n_val {
                    return Err(config_err(
                        "run.batch_val",
                        format!("{} exceeds n_val {}", self.run.batch_val, planted.n_val),
                    ));
                }
                if self.finetune.batch > planted.n_train {
                    return Err(config_err(
                        "finetune.batch",
                        format!("{} exceeds n_train {}", self.finetune.batch, planted.n_train),
                    ));
                }
                planted.depth
            }
            (None, Some(csv)) => {
                if csv.n_features == 0 {
                    return Err(config_err("task.csv.n_features", "must be at least 1"));
                }
                match (csv.target, csv.classes) {
                    (TargetKind::Classes, None) => {
                        return Err(config_err(
                            "task.csv.classes",
                            "required when target = \"classes\"",
                        ))
                    }
                    (TargetKind::Classes, Some(c)) if c < 2 => {
                        return Err(config_err("task.csv.classes", "needs at least 2 classes"))
                    }
                    (TargetKind::Regression, Some(_)) => {
                        return Err(config_err(
                            "task.csv.classes",
                            "only valid when target = \"classes\"",
                        ))
                    }
                    _ => {}
                }
                let dims = self.model.hidden_dims.as_ref().ok_or_else(|| {
                    config_err("model.hidden_dims", "required for csv tasks")
                })?;
                if dims.is_empty() || dims.contains(&0) {
                    return Err(config_err(
                        "model.hidden_dims",
                        "needs at least one positive width",
                    ));
                }
                if self.model.activation.is_none() {
                    return Err(config_err("model.activation", "required for csv tasks"));
                }
                let min_dim = *dims.iter().min().unwrap().min(&csv.n_features);
                if self.model.rank > min_dim {
                    return Err(config_err(
                        "model.rank",
                        format!("rank {} exceeds the narrowest width {min_dim}", self.model.rank),
                    ));
                }
                let loss_ok = match self.finetune.loss {
                    LossKind::Mse => csv.target == TargetKind::Regression,
                    LossKind::CrossEntropy => csv.target == TargetKind::Classes,
                };
                if !loss_ok {
                    return Err(config_err(
                        "finetune.loss",
                        "mse pairs with regression targets, cross_entropy with classes",
                    ));
                }
                dims.len()
            }
        };
        if self.model.rank == 0 {
            return Err(config_err("model.rank", "must be at least 1"));
        }
        if self.run.t == 0 {
            return Err(config_err("run.T", "must be at least 1"));
        }
        for (value, path) in [
            (self.run.eta_theta, "run.eta_theta"),
            (self.run.eta_alpha, "run.eta_alpha"),
            (self.finetune.eta_theta, "finetune.eta_theta"),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(config_err(path, format!("must be finite and >= 0, got {value}")));
            }
        }
        if self.run.batch_train == 0 {
            return Err(config_err("run.batch_train", "must be at least 1"));
        }
        if self.run.batch_val == 0 {
            return Err(config_err("run.batch_val", "must be at least 1"));
        }
        if let Some(es) = &self.run.early_stop {
            if es.patience == 0 {
                return Err(config_err("run.early_stop.patience", "must be at least 1"));
            }
            if !(es.min_delta.is_finite() && es.min_delta >= 0.0) {
                return Err(config_err(
                    "run.early_stop.min_delta",
                    "must be finite and >= 0",
                ));
            }
        }
        if let SelectionRule::TopK(k) = self.run.rule {
            if k > n_layers {
                return Err(config_err(
                    "run.rule",
                    format!("top-k of {k} exceeds the {n_layers}-layer model"),
                ));
            }
        }
        if self.finetune.epochs == 0 {
            return Err(config_err("finetune.epochs", "must be at least 1"));
        }
        if self.finetune.eval_every == 0 {
            return Err(config_err("finetune.eval_every", "must be at least 1"));
        }
        if self.finetune.batch == 0 {
            return Err(config_err("finetune.batch", "must be at least 1"));
        }
        if let Some(probe) = &self.probe {
            probe.validate()?;
            let classification = match (&self.task.planted, &self.task.csv) {
                (Some(p), _) => p.classes.is_some(),
                (None, Some(c)) => c.target == TargetKind::Classes,
                (None, None) => false,
            };
            if probe.mode == ProbeMode::PerLayer && classification {
                return Err(config_err(
                    "probe.mode",
                    "per_layer probes a headless chain; this task has a classification head",
                ));
            }
        }
        if let Some(sweep) = &self.sweep {
            if sweep.ks.is_empty() {
                return Err(config_err("sweep.ks", "needs at least one K"));
            }
            if sweep.ts.is_empty() || sweep.ts.contains(&0) {
                return Err(config_err("sweep.ts", "needs positive T values"));
            }
            if sweep.random_per_count == 0 {
                return Err(config_err("sweep.random_per_count", "must be at least 1"));
            }
            if sweep.depths.is_empty() || sweep.depths.contains(&0) {
                return Err(config_err("sweep.depths", "needs positive depths"));
            }
            if !(sweep.lambda.is_finite() && sweep.lambda > 0.0) {
                return Err(config_err("sweep.lambda", "must be finite and positive"));
            }
            if let Some(counts) = &sweep.layer_counts {
                if counts.iter().any(|&k| k > n_layers) {
                    return Err(config_err(
                        "sweep.layer_counts",
                        format!("counts exceed the {n_layers}-layer model"),
                    ));
                }
            }
        }
        if self.output.dir.as_os_str().is_empty() {
            return Err(config_err("output.dir", "must not be empty"));
        }
        Ok(())
    }
}
