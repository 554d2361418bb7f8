//! Stage 3: retrain the selected layers from scratch, plus the baseline
//! runners the comparisons need (all-layer, random-k, frozen base,
//! exhaustive subset oracle, and the no-retrain ablation that carries the
//! continuous gates over).

use crate::bilevel::{sample_batch, BatchSampler};
use crate::error::{Error, Result};
use crate::gating::AlphaVector;
use crate::model::{freeze_unselected, reinit_adapters, Batch, GatedLoraModel, Targets};
use crate::rng::Rng;
use crate::tensor::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

fn default_eval_every() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub eta_theta: f64,
    pub batch: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Epochs between full validation evaluations (the final epoch is
    /// always evaluated).
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Accept an empty selection and report the frozen base model instead
    /// of erroring.
    #[serde(default)]
    pub allow_empty: bool,
    /// Skip retraining entirely: evaluate the stage-2 model with its
    /// continuous gates carried over (the no-fine-tune ablation).
    #[serde(default)]
    pub carry_alpha: bool,
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Invalid("finetune: epochs must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Invalid("finetune: eval_every must be at least 1".into()));
        }
        if !(self.eta_theta.is_finite() && self.eta_theta >= 0.0) {
            return Err(Error::Invalid("finetune: eta_theta must be finite and >= 0".into()));
        }
        if self.batch == 0 {
            return Err(Error::Invalid("finetune: batch must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Loss over the full training set at the final parameters.
    pub train_loss: f64,
    pub val_loss: f64,
    pub test_loss: f64,
    /// Present for classification tasks only.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub test_accuracy: Option<f64>,
    /// Closed form: sum over trained layers of rank * (d_in + d_out).
    pub trained_params: usize,
    /// In-memory only; keeping it out of the JSON keeps re-runs
    /// byte-identical.
    #[serde(skip, default)]
    pub wall_time: Duration,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<EvalReport> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Per-step training record, used for curve comparisons and logging.
#[derive(Debug, Clone, Default)]
pub struct FinetuneLog {
    pub train_losses: Vec<f64>,
    /// (step index, full validation loss) at the evaluation cadence.
    pub val_curve: Vec<(usize, f64)>,
}

fn check_loss_kind(config: &FinetuneConfig, data: &Batch) -> Result<()> {
    let matches = matches!(
        (config.loss, &data.targets),
        (LossKind::Mse, Targets::Regression(_)) | (LossKind::CrossEntropy, Targets::Classes(_))
    );
    if matches {
        Ok(())
    } else {
        Err(Error::Invalid(
            "finetune: loss kind does not match the dataset's targets".into(),
        ))
    }
}

/// Fraction of rows whose argmax logit equals the label; ties resolve to
/// the lower class index.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::Invalid(format!(
            "accuracy: {} rows vs {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let mut hits = 0usize;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let mut best = 0;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

fn evaluate(model: &GatedLoraModel, gates: &[f64], data: &Batch) -> Result<(f64, Option<f64>)> {
    let loss = model.loss(data, gates)?;
    let acc = match &data.targets {
        Targets::Classes(labels) => {
            let logits = model.forward(&data.inputs, gates)?;
            Some(accuracy(&logits, labels)?)
        }
        Targets::Regression(_) => None,
    };
    Ok((loss, acc))
}

fn report_at(
    model: &GatedLoraModel,
    gates: &[f64],
    train: &Batch,
    val: &Batch,
    test: &Batch,
    trained_params: usize,
    started: Instant,
) -> Result<EvalReport> {
    let (train_loss, _) = evaluate(model, gates, train)?;
    let (val_loss, _) = evaluate(model, gates, val)?;
    let (test_loss, test_accuracy) = evaluate(model, gates, test)?;
    Ok(EvalReport {
        train_loss,
        val_loss,
        test_loss,
        test_accuracy,
        trained_params,
        wall_time: started.elapsed(),
    })
}

/// Retrain the selected layers from scratch and evaluate.
///
/// Adapters of the selected layers are reinitialized from the config seed,
/// everything else is frozen (and drops out of the forward pass), gates sit
/// at exactly 1, and plain SGD runs for `epochs` passes of
/// ceil(train/batch) steps each. Batch order comes from the same "train"
/// stream the selection loop uses, so an all-layer fine-tune with the same
/// seed retraces a K=0 selection run exactly.
pub fn finetune_selected(
    model: &mut GatedLoraModel,
    selected: &[usize],
    train: &Batch,
    val: &Batch,
    test: &Batch,
    config: &FinetuneConfig,
) -> Result<EvalReport> {
    finetune_selected_logged(model, selected, train, val, test, config).map(|(r, _)| r)
}

/// [`finetune_selected`] plus the per-step loss record.
pub fn finetune_selected_logged(
    model: &mut GatedLoraModel,
    selected: &[usize],
    train: &Batch,
    val: &Batch,
    test: &Batch,
    config: &FinetuneConfig,
) -> Result<(EvalReport, FinetuneLog)> {
    let started = Instant::now();
    config.validate()?;
    check_loss_kind(config, train)?;
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = model.n_layers();
    let gates = vec![1.0; n];

    if selected.is_empty() {
        if !config.allow_empty {
            return Err(Error::EmptySelection);
        }
        freeze_unselected(model, &[])?;
        let report = report_at(model, &gates, train, val, test, 0, started)?;
        return Ok((report, FinetuneLog::default()));
    }

    freeze_unselected(model, selected)?;
    reinit_adapters(model, selected, config.seed)?;

    let root = Rng::from_seed(config.seed);
    let mut sampler = BatchSampler::new(train.len(), config.batch, root.stream("train"))?;
    let steps_per_epoch = train.len().div_ceil(config.batch);
    let alpha = AlphaVector::zeros(n)?;

    let mut log = FinetuneLog::default();
    for epoch in 0..config.epochs {
        for _ in 0..steps_per_epoch {
            let batch = sample_batch(train, &mut sampler)?;
            let (loss, grads) = model.loss_and_grads(&batch, &alpha)?;
            model.apply_sgd(&grads, config.eta_theta)?;
            log.train_losses.push(loss);
        }
        if epoch % config.eval_every == 0 || epoch + 1 == config.epochs {
            let (val_loss, _) = evaluate(model, &gates, val)?;
            log.val_curve.push((log.train_losses.len(), val_loss));
        }
    }

    let trained = model.trainable_param_count();
    let report = report_at(model, &gates, train, val, test, trained, started)?;
    Ok((report, log))
}

/// Evaluate the stage-2 model as-is: continuous gates, no freezing, no
/// retraining. This is the no-fine-tune ablation; `trained_params` is 0
/// because nothing is trained here.
pub fn evaluate_carry(
    model: &GatedLoraModel,
    alpha: &AlphaVector,
    train: &Batch,
    val: &Batch,
    test: &Batch,
) -> Result<EvalReport> {
    let started = Instant::now();
    if alpha.n() != model.n_layers() {
        return Err(Error::Invalid(format!(
            "{} gate logits for {} layers",
            alpha.n(),
            model.n_layers()
        )));
    }
    let gates = alpha.relaxed();
    report_at(model, &gates, train, val, test, 0, started)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleEntry {
    pub bitmask: u64,
    pub subset: Vec<usize>,
    pub val_loss: f64,
    pub test_metric: f64,
}

fn subset_of(mask: u64, n: usize) -> Vec<usize> {
    (0..n).filter(|i| mask & (1 << i) != 0).collect()
}

/// Fine-tune every one of the 2^N layer subsets with the identical config
/// and seed, so validation losses are directly comparable. Entries come
/// back in bitmask order regardless of which worker finished first.
///
/// `jobs` caps the worker threads; `None` uses the global default.
pub fn subset_oracle(
    base: &GatedLoraModel,
    train: &Batch,
    val: &Batch,
    test: &Batch,
    config: &FinetuneConfig,
    jobs: Option<usize>,
) -> Result<Vec<OracleEntry>> {
    let n = base.n_layers();
    if n > 8 {
        return Err(Error::Invalid(format!(
            "subset oracle is exhaustive over 2^N fine-tunes; {n} layers exceeds the 8-layer cap"
        )));
    }
    let mut sub_config = config.clone();
    sub_config.allow_empty = true;
    sub_config.carry_alpha = false;

    let run_mask = |mask: u64| -> Result<OracleEntry> {
        let mut model = base.clone();
        let subset = subset_of(mask, n);
        let report = finetune_selected(&mut model, &subset, train, val, test, &sub_config)?;
        let test_metric = report.test_accuracy.unwrap_or(report.test_loss);
        Ok(OracleEntry {
            bitmask: mask,
            subset,
            val_loss: report.val_loss,
            test_metric,
        })
    };

    let masks: Vec<u64> = (0..(1u64 << n)).collect();
    let run_all = || masks.par_iter().map(|&m| run_mask(m)).collect::<Result<Vec<_>>>();
    match jobs {
        Some(threads) => rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?
            .install(run_all),
        None => run_all(),
    }
}

/// 1-based rank of a subset in the oracle output, ordered by validation
/// loss ascending with bitmask as the tiebreak.
pub fn oracle_rank(entries: &[OracleEntry], subset: &[usize]) -> Option<usize> {
    let mut order: Vec<&OracleEntry> = entries.iter().collect();
    order.sort_by(|a, b| {
        a.val_loss
            .partial_cmp(&b.val_loss)
            .expect("losses are finite")
            .then(a.bitmask.cmp(&b.bitmask))
    });
    order.iter().position(|e| e.subset == subset).map(|p| p + 1)
}

pub fn oracle_to_csv(entries: &[OracleEntry]) -> String {
    let mut out = String::from("bitmask,subset,val_loss,test_metric\n");
    for e in entries {
        let subset = e
            .subset
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join("|");
        out.push_str(&format!(
            "{},{},{:.16e},{:.16e}\n",
            e.bitmask, subset, e.val_loss, e.test_metric
        ));
    }
    out
}

pub fn oracle_from_csv(s: &str) -> Result<Vec<OracleEntry>> {
    let mut entries = Vec::new();
    for (lineno, line) in s.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Invalid(format!(
                "oracle csv: line {} has {} fields",
                lineno + 1,
                fields.len()
            )));
        }
        let bad = |what: &str| Error::Invalid(format!("oracle csv: bad {what} on line {}", lineno + 1));
        let subset = if fields[1].is_empty() {
            Vec::new()
        } else {
            fields[1]
                .split('|')
                .map(|p| p.parse::<usize>().map_err(|_| bad("subset")))
                .collect::<Result<_>>()?
        };
        entries.push(OracleEntry {
            bitmask: fields[0].parse().map_err(|_| bad("bitmask"))?,
            subset,
            val_loss: fields[2].parse().map_err(|_| bad("val_loss"))?,
            test_metric: fields[3].parse().map_err(|_| bad("test_metric"))?,
        });
    }
    Ok(entries)
}

/// Fine-tune a uniformly drawn k-subset. Returns the subset with its
/// report.
pub fn random_k_baseline(
    model: &mut GatedLoraModel,
    k: usize,
    seed: u64,
    train: &Batch,
    val: &Batch,
    test: &Batch,
    config: &FinetuneConfig,
) -> Result<(Vec<usize>, EvalReport)> {
    let n = model.n_layers();
    if k > n {
        return Err(Error::TopKTooLarge { k, n });
    }
    let subset = Rng::from_seed(seed).stream("random-k").subset(n, k);
    let mut sub_config = config.clone();
    if k == 0 {
        sub_config.allow_empty = true;
    }
    let report = finetune_selected(model, &subset, train, val, test, &sub_config)?;
    Ok((subset, report))
}
