//! Synthetic planted-layer tasks and tabular CSV ingestion.
//!
//! The planted task builds a teacher that equals the base chain plus
//! low-rank deltas at a known layer subset, then samples Gaussian inputs
//! and noisy teacher outputs. The planted subset is the ground-truth
//! answer for layer selection: a student starting from the same base can
//! close the train/teacher gap by adapting exactly those layers. With the
//! default tanh activation the planted subset is identifiable; with
//! identity activations a product of low-rank corrections can be absorbed
//! by many different layer subsets, so linear planted tasks are only
//! suitable for smoke tests.

use crate::error::{Error, Result};
use crate::model::{Activation, Batch, GatedLoraModel, LayerSpec, Targets};
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Regression,
    Classification { classes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKindName {
    Regression,
    Classification,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

fn default_base_scale() -> f64 {
    1.0
}

fn default_kind() -> TaskKindName {
    TaskKindName::Regression
}

/// Everything that defines a planted-layer problem instance except the
/// seed, which is supplied per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedTask {
    pub depth: usize,
    pub dim: usize,
    /// Input and output width. Defaults to `dim`. A value above `dim`
    /// makes the chain a bottleneck: the first layer contracts and the
    /// last expands, so a delta planted there touches input or output
    /// directions the frozen base discards, which no interior layer can
    /// imitate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub io_dim: Option<usize>,
    /// Layers where the teacher carries a low-rank delta.
    pub planted: Vec<usize>,
    pub teacher_rank: usize,
    /// Per-entry rms of each planted delta's contribution to the clean
    /// output. The signal-to-noise ratio per planted layer is
    /// (delta_scale / noise)^2.
    pub delta_scale: f64,
    /// Standard deviation of the additive label noise.
    pub noise: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Keep the last layer linear, the usual shape for a regression head.
    /// Anything upstream then reaches the output only through the frozen
    /// final weight, which is what pins a delta planted there.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub linear_output: bool,
    /// Base weight entries are N(0, (base_scale)^2 / d_in).
    #[serde(default = "default_base_scale")]
    pub base_scale: f64,
    #[serde(default = "default_kind")]
    pub kind: TaskKindName,
    /// Required for classification, rejected otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
}

impl PlantedTask {
    /// Resolve the kind/classes pair into the task variant.
    pub fn task(&self) -> Result<TaskKind> {
        match (self.kind, self.classes) {
            (TaskKindName::Regression, None) => Ok(TaskKind::Regression),
            (TaskKindName::Regression, Some(_)) => Err(Error::Invalid(
                "planted task: classes is only valid for classification".into(),
            )),
            (TaskKindName::Classification, Some(classes)) => {
                Ok(TaskKind::Classification { classes })
            }
            (TaskKindName::Classification, None) => Err(Error::Invalid(
                "planted task: classification needs a classes count".into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.dim == 0 {
            return Err(Error::Invalid("planted task: depth and dim must be positive".into()));
        }
        if self.planted.iter().any(|&i| i >= self.depth) {
            return Err(Error::Invalid(format!(
                "planted task: planted layers {:?} exceed depth {}",
                self.planted, self.depth
            )));
        }
        if self.io_dim == Some(0) {
            return Err(Error::Invalid("planted task: io_dim must be positive".into()));
        }
        let max_rank = self.dim.min(self.io_dim());
        if self.teacher_rank == 0 || self.teacher_rank > max_rank {
            return Err(Error::Invalid(format!(
                "planted task: teacher_rank {} outside 1..={max_rank}",
                self.teacher_rank
            )));
        }
        if self.noise < 0.0 || !self.noise.is_finite() {
            return Err(Error::Invalid("planted task: noise must be finite and >= 0".into()));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::Invalid("planted task: sample counts must be positive".into()));
        }
        if let TaskKind::Classification { classes } = self.task()? {
            if classes < 2 {
                return Err(Error::Invalid("planted task: classification needs >= 2 classes".into()));
            }
        }
        Ok(())
    }

    pub fn io_dim(&self) -> usize {
        self.io_dim.unwrap_or(self.dim)
    }

    /// Per-layer (d_in, d_out): `io_dim` at the ends, `dim` inside.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|j| {
                let d_in = if j == 0 { self.io_dim() } else { self.dim };
                let d_out = if j == self.depth - 1 { self.io_dim() } else { self.dim };
                (d_in, d_out)
            })
            .collect()
    }

    fn layer_specs(&self, rank: usize) -> Vec<LayerSpec> {
        let last = self.depth - 1;
        self.layer_dims()
            .into_iter()
            .enumerate()
            .map(|(j, (d_in, d_out))| {
                let activation = if self.linear_output && j == last {
                    Activation::Identity
                } else {
                    self.activation
                };
                LayerSpec { d_in, d_out, rank, activation }
            })
            .collect()
    }
}

/// Rewrite each row of `mat` to be orthogonal to the row space of
/// `basis`, keeping its original norm. A row already inside the span is
/// left alone; Gaussian draws land there with probability zero.
fn reject_rows(mat: &Tensor, basis: &Tensor) -> Tensor {
    let mut q: Vec<Vec<f64>> = Vec::new();
    for r in 0..basis.rows() {
        let mut v = basis.row(r).to_vec();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= d * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            v.iter_mut().for_each(|x| *x /= n);
            q.push(v);
        }
    }
    let mut out = Vec::with_capacity(mat.rows() * mat.cols());
    for r in 0..mat.rows() {
        let mut v = mat.row(r).to_vec();
        let norm0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= d * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 && norm0 > 0.0 {
            let s = norm0 / n;
            v.iter_mut().for_each(|x| *x *= s);
        }
        out.extend(v);
    }
    Tensor::matrix(mat.rows(), mat.cols(), out).expect("shape preserved")
}

pub(crate) fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.next_normal() * std).collect())
        .expect("gaussian entries are finite")
}

fn base_weights(task: &PlantedTask, root: &Rng) -> Vec<Tensor> {
    task.layer_dims()
        .into_iter()
        .enumerate()
        .map(|(j, (d_in, d_out))| {
            let mut rng = root.stream_indexed("base", j as u64);
            gaussian_matrix(&mut rng, d_out, d_in, task.base_scale / (d_in as f64).sqrt())
        })
        .collect()
}

fn head_weights(task: &PlantedTask, root: &Rng) -> Result<Option<Tensor>> {
    Ok(match task.task()? {
        TaskKind::Regression => None,
        TaskKind::Classification { classes } => {
            let mut rng = root.stream("head");
            let d_last = task.io_dim();
            Some(gaussian_matrix(&mut rng, classes, d_last, 1.0 / (d_last as f64).sqrt()))
        }
    })
}

/// The student's starting point: base weights shared with the teacher,
/// zero adapters of the requested rank.
pub fn planted_base_model(task: &PlantedTask, rank: usize, seed: u64) -> Result<GatedLoraModel> {
    task.validate()?;
    let max_rank = task.dim.min(task.io_dim());
    if rank == 0 || rank > max_rank {
        return Err(Error::Invalid(format!(
            "planted task: adapter rank {rank} outside 1..={max_rank}"
        )));
    }
    let root = Rng::from_seed(seed);
    let head = head_weights(task, &root)?;
    GatedLoraModel::new(task.layer_specs(rank), base_weights(task, &root), head)
}

/// The teacher: the same base chain with delta_scale * B* A* added at each
/// planted layer.
fn teacher_model(task: &PlantedTask, seed: u64) -> Result<GatedLoraModel> {
    let root = Rng::from_seed(seed);
    let head = head_weights(task, &root)?;
    let mut model =
        GatedLoraModel::new(task.layer_specs(task.teacher_rank), base_weights(task, &root), head)?;
    let dims = task.layer_dims();
    for &j in &task.planted {
        let (d_in, d_out) = dims[j];
        let mut rng = root.stream_indexed("teacher", j as u64);
        // the draw only fixes directions; equalize_planted sets the scale
        let mut b = gaussian_matrix(&mut rng, d_out, task.teacher_rank, task.delta_scale);
        let mut a = gaussian_matrix(
            &mut rng,
            task.teacher_rank,
            d_in,
            1.0 / (task.teacher_rank as f64).sqrt(),
        );
        // On non-square layers, push the delta into the directions the
        // frozen base discards: reading inputs outside row(W) or writing
        // outputs outside col(W). That makes the planted layer carry
        // information no other layer can express, so the subset is the
        // ground truth rather than merely a good answer. Square layers
        // have no such complement and keep the raw draw.
        let w = model.base_weight(j);
        if d_in > d_out {
            a = reject_rows(&a, w);
        } else if d_out > d_in {
            b = reject_rows(&b.transpose(), &w.transpose()).transpose();
        }
        model.set_adapter(j, a, b)?;
    }
    equalize_planted(task, &mut model, root.stream("equalize"))?;
    Ok(model)
}

/// Rescale each planted delta so its solo contribution to the output has
/// rms `delta_scale` per entry, measured on a probe batch. Without this a
/// delta near the input arrives at the loss attenuated by every later
/// activation and the task gets easier toward the output end; equal
/// footing keeps recovery difficulty a property of the noise level, not
/// of where the subset happens to sit. A few fixed-point rounds absorb
/// the activations' nonlinear response to the rescale itself.
fn equalize_planted(task: &PlantedTask, model: &mut GatedLoraModel, mut rng: Rng) -> Result<()> {
    let x = gaussian_matrix(&mut rng, 256, task.io_dim(), 1.0);
    let off = vec![0.0; task.depth];
    let base_out = model.forward(&x, &off)?;
    for _ in 0..4 {
        for &j in &task.planted {
            let mut gates = off.clone();
            gates[j] = 1.0;
            let diff = model.forward(&x, &gates)?.sub(&base_out)?;
            let rms = (diff.norm_sq() / diff.len() as f64).sqrt();
            if rms <= 1e-12 {
                continue;
            }
            let a = model.adapter(j).a.clone();
            let b = model.adapter(j).b.scale(task.delta_scale / rms)?;
            model.set_adapter(j, a, b)?;
        }
    }
    Ok(())
}

fn sample_split(
    task: &PlantedTask,
    teacher: &GatedLoraModel,
    root: &Rng,
    split: &str,
    count: usize,
) -> Result<Batch> {
    let mut data_rng = root.stream(&format!("data-{split}"));
    let mut noise_rng = root.stream(&format!("noise-{split}"));
    let x = gaussian_matrix(&mut data_rng, count, task.io_dim(), 1.0);
    let gates = vec![1.0; task.depth];
    let clean = teacher.forward(&x, &gates)?;
    let noisy = if task.noise > 0.0 {
        clean.add(&gaussian_matrix(&mut noise_rng, clean.rows(), clean.cols(), task.noise))?
    } else {
        clean
    };
    let targets = match task.task()? {
        TaskKind::Regression => Targets::Regression(noisy),
        TaskKind::Classification { .. } => {
            let labels = (0..noisy.rows())
                .map(|r| {
                    let row = noisy.row(r);
                    let mut best = 0;
                    for (c, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = c;
                        }
                    }
                    best
                })
                .collect();
            Targets::Classes(labels)
        }
    };
    Batch::new(x, targets)
}

/// Three datasets from three derived streams; the test split is never
/// touched during training.
pub fn generate_planted(task: &PlantedTask, seed: u64) -> Result<(Batch, Batch, Batch)> {
    task.validate()?;
    let teacher = teacher_model(task, seed)?;
    let root = Rng::from_seed(seed);
    Ok((
        sample_split(task, &teacher, &root, "train", task.n_train)?,
        sample_split(task, &teacher, &root, "val", task.n_val)?,
        sample_split(task, &teacher, &root, "test", task.n_test)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Regression,
    Classes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IngestSchema {
    pub n_features: usize,
    pub target: TargetKind,
}

/// Read a headered CSV into a dataset. The first `n_features` columns are
/// features; the remaining columns are the target (one or more numeric
/// columns for regression, exactly one integer label column for classes).
/// Malformed rows are reported together, first ten line numbers named.
pub fn ingest_csv(path: &Path, schema: IngestSchema) -> Result<Batch> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    ingest_csv_str(&text, schema).map_err(|e| match e {
        Error::Invalid(detail) => Error::MalformedData {
            path: path.display().to_string(),
            detail,
        },
        other => other,
    })
}

pub fn ingest_csv_str(text: &str, schema: IngestSchema) -> Result<Batch> {
    if schema.n_features == 0 {
        return Err(Error::Invalid("schema: n_features must be positive".into()));
    }
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Invalid("empty file (header row required)".into()))?;
    let n_cols = header.split(',').count();
    if n_cols <= schema.n_features {
        return Err(Error::Invalid(format!(
            "header has {n_cols} columns; need more than n_features = {}",
            schema.n_features
        )));
    }
    let n_targets = n_cols - schema.n_features;
    if schema.target == TargetKind::Classes && n_targets != 1 {
        return Err(Error::Invalid(format!(
            "class targets need exactly one label column, found {n_targets}"
        )));
    }

    let mut features = Vec::new();
    let mut reg_targets = Vec::new();
    let mut labels = Vec::new();
    let mut offenders: Vec<(usize, String)> = Vec::new();
    let mut rows = 0usize;
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let mut bad: Option<String> = None;
        if fields.len() != n_cols {
            bad = Some(format!("{} fields, expected {n_cols}", fields.len()));
        } else {
            let mut row_feats = Vec::with_capacity(schema.n_features);
            let mut row_targets = Vec::with_capacity(n_targets);
            let mut row_label = 0usize;
            for (c, field) in fields.iter().enumerate() {
                let cell = field.trim();
                if c < schema.n_features || schema.target == TargetKind::Regression {
                    match cell.parse::<f64>() {
                        Ok(v) if v.is_finite() => {
                            if c < schema.n_features {
                                row_feats.push(v);
                            } else {
                                row_targets.push(v);
                            }
                        }
                        _ => {
                            bad = Some(format!("non-numeric cell `{cell}`"));
                            break;
                        }
                    }
                } else {
                    match cell.parse::<usize>() {
                        Ok(v) => row_label = v,
                        Err(_) => {
                            bad = Some(format!("non-integer label `{cell}`"));
                            break;
                        }
                    }
                }
            }
            if bad.is_none() {
                features.extend(row_feats);
                if schema.target == TargetKind::Regression {
                    reg_targets.extend(row_targets);
                } else {
                    labels.push(row_label);
                }
                rows += 1;
            }
        }
        if let Some(reason) = bad {
            offenders.push((lineno + 1, reason));
        }
    }
    if !offenders.is_empty() {
        let shown: Vec<String> = offenders
            .iter()
            .take(10)
            .map(|(line, reason)| format!("line {line}: {reason}"))
            .collect();
        return Err(Error::Invalid(format!(
            "{} malformed rows ({})",
            offenders.len(),
            shown.join("; ")
        )));
    }
    if rows == 0 {
        return Err(Error::EmptyDataset);
    }
    let inputs = Tensor::matrix(rows, schema.n_features, features)?;
    let targets = match schema.target {
        TargetKind::Regression => {
            Targets::Regression(Tensor::matrix(rows, n_targets, reg_targets)?)
        }
        TargetKind::Classes => Targets::Classes(labels),
    };
    Batch::new(inputs, targets)
}

/// Write a dataset in the layout [`ingest_csv`] reads: feature columns
/// f0.., then target columns t0.. (or one label column).
pub fn export_csv(batch: &Batch, path: &Path) -> Result<()> {
    let mut out = String::new();
    let nf = batch.inputs.cols();
    for j in 0..nf {
        if j > 0 {
            out.push(',');
        }
        out.push_str(&format!("f{j}"));
    }
    match &batch.targets {
        Targets::Regression(t) => {
            for j in 0..t.cols() {
                out.push_str(&format!(",t{j}"));
            }
        }
        Targets::Classes(_) => out.push_str(",label"),
    }
    out.push('\n');
    for r in 0..batch.inputs.rows() {
        for (j, v) in batch.inputs.row(r).iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("{v:.16e}"));
        }
        match &batch.targets {
            Targets::Regression(t) => {
                for v in t.row(r) {
                    out.push_str(&format!(",{v:.16e}"));
                }
            }
            Targets::Classes(l) => out.push_str(&format!(",{}", l[r])),
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::mse_loss;

    fn toy_task() -> PlantedTask {
        PlantedTask {
            depth: 4,
            dim: 5,
            io_dim: None,
            planted: vec![1, 3],
            teacher_rank: 2,
            delta_scale: 0.5,
            noise: 0.01,
            n_train: 20,
            n_val: 12,
            n_test: 16,
            activation: Activation::Tanh,
            linear_output: false,
            base_scale: 1.0,
            kind: TaskKindName::Regression,
            classes: None,
        }
    }

    #[test]
    fn same_seed_gives_identical_datasets() {
        let task = toy_task();
        let (tr1, va1, te1) = generate_planted(&task, 42).unwrap();
        let (tr2, va2, te2) = generate_planted(&task, 42).unwrap();
        assert_eq!(tr1, tr2);
        assert_eq!(va1, va2);
        assert_eq!(te1, te2);
        let (tr3, _, _) = generate_planted(&task, 43).unwrap();
        assert_ne!(tr1, tr3);
    }

    #[test]
    fn splits_are_distinct() {
        let (train, val, test) = generate_planted(&toy_task(), 7).unwrap();
        assert_eq!(train.len(), 20);
        assert_eq!(val.len(), 12);
        assert_eq!(test.len(), 16);
        assert_ne!(train.inputs.row(0), val.inputs.row(0));
        assert_ne!(val.inputs.row(0), test.inputs.row(0));
    }

    #[test]
    fn rejected_rows_are_orthogonal_and_norm_preserving() {
        let mut rng = Rng::from_seed(11);
        let basis = gaussian_matrix(&mut rng, 4, 12, 1.0);
        let mat = gaussian_matrix(&mut rng, 2, 12, 0.7);
        let out = reject_rows(&mat, &basis);
        for r in 0..out.rows() {
            for b in 0..basis.rows() {
                let dot: f64 =
                    out.row(r).iter().zip(basis.row(b)).map(|(x, y)| x * y).sum();
                assert!(dot.abs() < 1e-9, "row {r} vs basis {b}: {dot}");
            }
            let n0: f64 = mat.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            let n1: f64 = out.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n0 - n1).abs() < 1e-9 * n0.max(1.0));
        }
    }

    #[test]
    fn bottleneck_planted_feature_is_invisible_downstream() {
        // With io_dim > dim the first layer's planted delta must read only
        // directions the frozen base drops, so adding any x-perturbation
        // inside row(W0)'s preimage leaves the delta's contribution alone.
        let mut task = toy_task();
        task.io_dim = Some(12);
        task.dim = 4;
        task.planted = vec![0, 3];
        task.teacher_rank = 1;
        let teacher = teacher_model(&task, 5).unwrap();
        let w0 = teacher.base_weight(0);
        let a0 = &teacher.adapter(0).a;
        for r in 0..w0.rows() {
            let dot: f64 = a0.row(0).iter().zip(w0.row(r)).map(|(x, y)| x * y).sum();
            assert!(dot.abs() < 1e-9);
        }
        // Last layer: the planted output direction escapes col(W_last).
        let w3 = teacher.base_weight(3);
        let b3 = &teacher.adapter(3).b;
        let bt = b3.transpose();
        let wt = w3.transpose();
        for r in 0..wt.rows() {
            let dot: f64 = bt.row(0).iter().zip(wt.row(r)).map(|(x, y)| x * y).sum();
            assert!(dot.abs() < 1e-9);
        }
        // The dataset still carries both deltas: a base-only student has
        // irreducible error far above the noise floor.
        task.noise = 0.0;
        let (train, _, _) = generate_planted(&task, 5).unwrap();
        let base = planted_base_model(&task, 1, 5).unwrap();
        let pred = base.forward(&train.inputs, &[1.0; 4]).unwrap();
        match &train.targets {
            Targets::Regression(y) => {
                assert!(mse_loss(&pred, y).unwrap() > 1e-3);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn no_deltas_no_noise_means_base_is_perfect() {
        let mut task = toy_task();
        task.planted = vec![];
        task.noise = 0.0;
        let (train, _, _) = generate_planted(&task, 3).unwrap();
        let base = planted_base_model(&task, 2, 3).unwrap();
        let pred = base.forward(&train.inputs, &[1.0; 4]).unwrap();
        match &train.targets {
            Targets::Regression(y) => {
                assert!(mse_loss(&pred, y).unwrap() < 1e-24);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn teacher_differs_from_base_exactly_at_planted_depths() {
        let mut task = toy_task();
        task.noise = 0.0;
        let (train, _, _) = generate_planted(&task, 9).unwrap();
        let base = planted_base_model(&task, 2, 9).unwrap();
        let pred = base.forward(&train.inputs, &[1.0; 4]).unwrap();
        match &train.targets {
            Targets::Regression(y) => {
                let gap = mse_loss(&pred, y).unwrap();
                assert!(gap > 1e-4, "planted deltas should leave a visible gap, got {gap}");
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn base_model_shares_teacher_base_weights() {
        let task = toy_task();
        let student_r2 = planted_base_model(&task, 2, 11).unwrap();
        let student_r3 = planted_base_model(&task, 3, 11).unwrap();
        for i in 0..task.depth {
            assert_eq!(student_r2.base_weight(i), student_r3.base_weight(i));
        }
    }

    #[test]
    fn classification_labels_are_in_range() {
        let mut task = toy_task();
        task.kind = TaskKindName::Classification;
        task.classes = Some(3);
        let (train, _, _) = generate_planted(&task, 5).unwrap();
        match &train.targets {
            Targets::Classes(labels) => {
                assert!(labels.iter().all(|&l| l < 3));
                // argmax labels over 3 classes should not be constant
                assert!(labels.windows(2).any(|w| w[0] != w[1]));
            }
            _ => unreachable!(),
        }
        let model = planted_base_model(&task, 2, 5).unwrap();
        assert_eq!(model.output_dim(), 3);
    }

    #[test]
    fn validation_rejects_bad_tasks() {
        let mut task = toy_task();
        task.planted = vec![4];
        assert!(task.validate().is_err());
        task = toy_task();
        task.teacher_rank = 0;
        assert!(task.validate().is_err());
        task = toy_task();
        task.noise = -1.0;
        assert!(task.validate().is_err());
        task = toy_task();
        task.kind = TaskKindName::Classification;
        assert!(task.validate().is_err(), "classification without classes");
        task = toy_task();
        task.classes = Some(3);
        assert!(task.validate().is_err(), "classes on regression");
    }

    #[test]
    fn toml_rejects_unknown_keys_and_fills_defaults() {
        let src = r#"
            depth = 4
            dim = 5
            planted = [1, 3]
            teacher_rank = 2
            delta_scale = 0.5
            noise = 0.01
            n_train = 20
            n_val = 12
            n_test = 16
        "#;
        let task: PlantedTask = toml::from_str(src).unwrap();
        assert_eq!(task.activation, Activation::Tanh);
        assert_eq!(task.task().unwrap(), TaskKind::Regression);
        let bad = format!("{src}\nmystery = 1");
        assert!(toml::from_str::<PlantedTask>(&bad).is_err());
    }

    #[test]
    fn ingest_well_formed_file() {
        let text = "f0,f1,t0\n1.0,2.0,3.0\n4.0,5.0,6.0\n";
        let batch = ingest_csv_str(
            text,
            IngestSchema {
                n_features: 2,
                target: TargetKind::Regression,
            },
        )
        .unwrap();
        assert_eq!(batch.len(), 2);
        assert_eq!(batch.inputs.row(1), &[4.0, 5.0]);
        match &batch.targets {
            Targets::Regression(t) => assert_eq!(t.data(), &[3.0, 6.0]),
            _ => unreachable!(),
        }
    }

    #[test]
    fn ingest_names_bad_lines() {
        let text = "f0,f1,t0\n1.0,2.0,3.0\n1.0,oops,3.0\n4.0,5.0,6.0\nnan,1.0,2.0\n";
        let err = ingest_csv_str(
            text,
            IngestSchema {
                n_features: 2,
                target: TargetKind::Regression,
            },
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("line 3"), "{err}");
        assert!(err.contains("line 5"), "{err}");
        assert!(err.contains("oops"), "{err}");
    }

    #[test]
    fn ingest_caps_reported_offenders_at_ten() {
        let mut text = String::from("f0,t0\n");
        for _ in 0..15 {
            text.push_str("bad,1.0\n");
        }
        let err = ingest_csv_str(
            &text,
            IngestSchema {
                n_features: 1,
                target: TargetKind::Regression,
            },
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("15 malformed rows"), "{err}");
        assert!(err.contains("line 11"), "{err}");
        assert!(!err.contains("line 12"), "{err}");
    }

    #[test]
    fn ingest_classification_labels() {
        let text = "f0,f1,label\n0.5,1.5,0\n0.25,-1.0,2\n";
        let batch = ingest_csv_str(
            text,
            IngestSchema {
                n_features: 2,
                target: TargetKind::Classes,
            },
        )
        .unwrap();
        assert_eq!(batch.targets, Targets::Classes(vec![0, 2]));
    }

    #[test]
    fn export_ingest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _, _) = generate_planted(&toy_task(), 13).unwrap();
        let path = dir.path().join("train.csv");
        export_csv(&train, &path).unwrap();
        let back = ingest_csv(
            &path,
            IngestSchema {
                n_features: 5,
                target: TargetKind::Regression,
            },
        )
        .unwrap();
        assert_eq!(back, train);

        let mut task = toy_task();
        task.kind = TaskKindName::Classification;
        task.classes = Some(3);
        let (ctrain, _, _) = generate_planted(&task, 13).unwrap();
        let cpath = dir.path().join("ctrain.csv");
        export_csv(&ctrain, &cpath).unwrap();
        let cback = ingest_csv(
            &cpath,
            IngestSchema {
                n_features: 5,
                target: TargetKind::Classes,
            },
        )
        .unwrap();
        assert_eq!(cback, ctrain);
    }
}
