//! Alternating bilevel optimization of adapters and gate logits.
//!
//! Each outer step takes one SGD step on all adapter weights using a
//! training mini-batch at the current gates, then K SGD steps on the gate
//! logits using fresh validation mini-batches at the updated weights.
//! After the last outer step the final logits are thresholded into a layer
//! subset. Everything is driven by one seed: batch order, adapter
//! initialization, and therefore the whole trajectory are reproducible bit
//! for bit.

use crate::error::{Error, Result};
use crate::gating::{
    grad_alpha, select, sgd_alpha_step, AlphaVector, SelectionResult, SelectionRule,
};
use crate::model::{freeze_unselected, reinit_adapters, Batch, GatedLoraModel};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop {
            patience: 50,
            min_delta: 1e-5,
        }
    }
}

fn default_rule() -> SelectionRule {
    SelectionRule::Threshold
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Outer steps (one adapter update each).
    #[serde(rename = "T")]
    pub t: usize,
    /// Inner gate-logit steps per outer step.
    #[serde(rename = "K")]
    pub k: usize,
    pub eta_theta: f64,
    pub eta_alpha: f64,
    pub batch_train: usize,
    pub batch_val: usize,
    pub seed: u64,
    #[serde(default)]
    pub early_stop: Option<EarlyStop>,
    pub rank: usize,
    #[serde(default = "default_rule")]
    pub rule: SelectionRule,
    /// When the threshold rule selects nothing: keep the empty subset
    /// instead of falling back to the single best layer.
    #[serde(default)]
    pub allow_empty_selection: bool,
}

/// One logged outer step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub step: usize,
    pub train_loss: f64,
    /// Loss on the full validation set after this step's updates.
    pub val_loss: f64,
    pub sum_alpha: f64,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrajectoryLog {
    pub rows: Vec<TrajectoryRow>,
    pub warnings: Vec<String>,
    /// Kept in memory for operators; never serialized, so artifacts stay
    /// byte-identical across runs.
    pub wall_time: Duration,
}

impl TrajectoryLog {
    pub fn to_csv_string(&self) -> String {
        let n = self.rows.first().map_or(0, |r| r.alpha.len());
        let mut out = String::from("step,train_loss,val_loss,sum_alpha");
        for i in 0..n {
            out.push_str(&format!(",alpha_{i}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e}",
                r.step, r.train_loss, r.val_loss, r.sum_alpha
            ));
            for a in &r.alpha {
                out.push_str(&format!(",{a:.16e}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv_str(s: &str) -> Result<TrajectoryLog> {
        let mut rows = Vec::new();
        for (lineno, line) in s.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 4 {
                return Err(Error::Invalid(format!(
                    "trajectory csv: line {} has {} fields",
                    lineno + 1,
                    fields.len()
                )));
            }
            let parse = |f: &str| -> Result<f64> {
                f.parse()
                    .map_err(|_| Error::Invalid(format!("trajectory csv: bad number on line {}", lineno + 1)))
            };
            rows.push(TrajectoryRow {
                step: fields[0].parse().map_err(|_| {
                    Error::Invalid(format!("trajectory csv: bad step on line {}", lineno + 1))
                })?,
                train_loss: parse(fields[1])?,
                val_loss: parse(fields[2])?,
                sum_alpha: parse(fields[3])?,
                alpha: fields[4..].iter().map(|f| parse(f)).collect::<Result<_>>()?,
            });
        }
        Ok(TrajectoryLog {
            rows,
            warnings: Vec::new(),
            wall_time: Duration::ZERO,
        })
    }
}

/// Without-replacement mini-batch sampler. Every epoch is a fresh shuffle;
/// batches have a fixed size, so a batch that crosses an epoch boundary is
/// filled with the first indices of the next shuffle.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: Rng,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, mut rng: Rng) -> Result<BatchSampler> {
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if batch == 0 || batch > n {
            return Err(Error::BatchTooLarge {
                requested: batch,
                available: n,
            });
        }
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        Ok(BatchSampler {
            order,
            pos: 0,
            batch,
            rng,
        })
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            let take = (self.batch - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

pub fn sample_batch(data: &Batch, sampler: &mut BatchSampler) -> Result<Batch> {
    data.take_rows(&sampler.next_indices())
}

/// Algorithm: initialize adapters from the run seed with every layer
/// trainable and all logits at zero, alternate adapter and gate updates
/// for up to T outer steps, then apply the selection rule to the final
/// logits.
///
/// The model is left holding the adapters from the last outer step; the
/// retraining stage reinitializes them anyway.
pub fn run_selection(
    model: &mut GatedLoraModel,
    train: &Batch,
    val: &Batch,
    config: &RunConfig,
) -> Result<(SelectionResult, TrajectoryLog)> {
    let started = Instant::now();
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = model.n_layers();
    let all: Vec<usize> = (0..n).collect();
    reinit_adapters(model, &all, config.seed)?;
    freeze_unselected(model, &all)?;

    let root = Rng::from_seed(config.seed);
    let mut train_sampler = BatchSampler::new(train.len(), config.batch_train, root.stream("train"))?;
    let mut val_sampler = BatchSampler::new(val.len(), config.batch_val, root.stream("val"))?;

    let mut alpha = AlphaVector::zeros(n)?;
    let mut history = vec![alpha.raw().to_vec()];
    let mut log = TrajectoryLog::default();
    let mut best = f64::INFINITY;
    let mut stale = 0usize;

    for t in 0..config.t {
        let tb = sample_batch(train, &mut train_sampler)?;
        let (train_loss, grads) = model.loss_and_grads(&tb, &alpha)?;
        model.apply_sgd(&grads, config.eta_theta)?;

        for _ in 0..config.k {
            let vb = sample_batch(val, &mut val_sampler)?;
            let (_, vgrads) = model.loss_and_grads(&vb, &alpha)?;
            let ga = grad_alpha(&alpha, &vgrads.gates)?;
            alpha = sgd_alpha_step(&alpha, &ga, config.eta_alpha)?;
        }

        let val_loss = model.loss(val, &alpha.relaxed())?;
        history.push(alpha.raw().to_vec());
        log.rows.push(TrajectoryRow {
            step: t,
            train_loss,
            val_loss,
            sum_alpha: alpha.raw().iter().sum(),
            alpha: alpha.raw().to_vec(),
        });

        if val_loss < best - config.early_stop.map_or(0.0, |e| e.min_delta) {
            best = val_loss;
            stale = 0;
        } else if let Some(es) = config.early_stop {
            stale += 1;
            if stale >= es.patience {
                log.warnings.push(format!(
                    "early stop at outer step {t}: validation loss has not improved by {} in {} steps",
                    es.min_delta, es.patience
                ));
                break;
            }
        }
    }

    let mut selected = select(&alpha, config.rule)?;
    if selected.is_empty() && !config.allow_empty_selection {
        log.warnings.push(
            "threshold selection is empty; falling back to the single largest logit".to_string(),
        );
        selected = select(&alpha, SelectionRule::TopK(1))?;
    }

    let result = SelectionResult {
        n,
        rule: config.rule,
        selected,
        alpha_final: alpha.raw().to_vec(),
        alpha_history: history,
    };
    log.wall_time = started.elapsed();
    Ok((result, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, LayerSpec, Targets};
    use crate::tensor::Tensor;

    fn sampler(n: usize, batch: usize, seed: u64) -> BatchSampler {
        BatchSampler::new(n, batch, Rng::from_seed(seed)).unwrap()
    }

    #[test]
    fn every_epoch_is_a_permutation() {
        for &(n, b) in &[(5usize, 2usize), (7, 3), (4, 4), (6, 2)] {
            let mut s = sampler(n, b, 17);
            let mut stream = Vec::new();
            while stream.len() < 4 * n {
                stream.extend(s.next_indices());
            }
            for (e, window) in stream.chunks_exact(n).enumerate() {
                let mut sorted = window.to_vec();
                sorted.sort_unstable();
                assert_eq!(
                    sorted,
                    (0..n).collect::<Vec<_>>(),
                    "n={n} b={b}: epoch {e} is not a permutation"
                );
            }
        }
    }

    #[test]
    fn sampler_is_seed_deterministic() {
        let mut a = sampler(10, 3, 5);
        let mut b = sampler(10, 3, 5);
        let mut c = sampler(10, 3, 6);
        let mut differed = false;
        for _ in 0..10 {
            let x = a.next_indices();
            assert_eq!(x, b.next_indices());
            differed |= x != c.next_indices();
        }
        assert!(differed);
    }

    #[test]
    fn sampler_rejects_bad_sizes() {
        assert!(matches!(
            BatchSampler::new(0, 1, Rng::from_seed(0)),
            Err(Error::EmptyDataset)
        ));
        assert!(matches!(
            BatchSampler::new(4, 5, Rng::from_seed(0)),
            Err(Error::BatchTooLarge { requested: 5, available: 4 })
        ));
    }

    fn toy_model(n_layers: usize, seed: u64) -> GatedLoraModel {
        let d = 3;
        let layers: Vec<LayerSpec> = (0..n_layers)
            .map(|_| LayerSpec {
                d_in: d,
                d_out: d,
                rank: 1,
                activation: Activation::Tanh,
            })
            .collect();
        let mut rng = Rng::from_seed(seed);
        let base = layers
            .iter()
            .map(|s| {
                Tensor::matrix(
                    s.d_out,
                    s.d_in,
                    (0..s.d_out * s.d_in).map(|_| rng.next_normal() * 0.6).collect(),
                )
                .unwrap()
            })
            .collect();
        GatedLoraModel::new(layers, base, None).unwrap()
    }

    fn toy_data(rows: usize, d: usize, seed: u64) -> Batch {
        let mut rng = Rng::from_seed(seed);
        let x = Tensor::matrix(rows, d, (0..rows * d).map(|_| rng.next_normal()).collect()).unwrap();
        let y = Tensor::matrix(rows, d, (0..rows * d).map(|_| rng.next_normal() * 0.3).collect())
            .unwrap();
        Batch::new(x, Targets::Regression(y)).unwrap()
    }

    fn toy_config() -> RunConfig {
        RunConfig {
            t: 12,
            k: 3,
            eta_theta: 0.05,
            eta_alpha: 0.1,
            batch_train: 8,
            batch_val: 8,
            seed: 33,
            early_stop: None,
            rank: 1,
            rule: SelectionRule::Threshold,
            allow_empty_selection: false,
        }
    }

    #[test]
    fn selection_run_invariants() {
        let mut model = toy_model(4, 2);
        let train = toy_data(24, 3, 100);
        let val = toy_data(24, 3, 101);
        let config = toy_config();
        let (result, log) = run_selection(&mut model, &train, &val, &config).unwrap();

        assert_eq!(log.rows.len(), 12);
        assert_eq!(result.alpha_history.len(), 13);
        assert_eq!(result.alpha_history[0], vec![0.0; 4]);
        assert!(!result.selected.is_empty());
        for row in &log.rows {
            assert!(row.sum_alpha.abs() < 1e-9, "sum drifted to {}", row.sum_alpha);
            assert!(row.train_loss.is_finite() && row.val_loss.is_finite());
        }

        // identical inputs reproduce the trajectory exactly
        let mut model2 = toy_model(4, 2);
        let (result2, log2) = run_selection(&mut model2, &train, &val, &config).unwrap();
        assert_eq!(result, result2);
        for (a, b) in log.rows.iter().zip(&log2.rows) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_inner_steps_keep_gates_at_one() {
        let mut model = toy_model(3, 4);
        let train = toy_data(16, 3, 1);
        let val = toy_data(16, 3, 2);
        let mut config = toy_config();
        config.k = 0;
        config.t = 5;
        let (result, log) = run_selection(&mut model, &train, &val, &config).unwrap();
        assert_eq!(result.alpha_final, vec![0.0; 3]);
        // threshold finds nothing strictly positive, so the fallback names
        // the lowest index among the tied logits
        assert_eq!(result.selected, vec![0]);
        assert!(log.warnings.iter().any(|w| w.contains("falling back")));
    }

    #[test]
    fn empty_selection_is_allowed_when_asked() {
        let mut model = toy_model(3, 4);
        let train = toy_data(16, 3, 1);
        let val = toy_data(16, 3, 2);
        let mut config = toy_config();
        config.k = 0;
        config.t = 2;
        config.allow_empty_selection = true;
        let (result, log) = run_selection(&mut model, &train, &val, &config).unwrap();
        assert!(result.selected.is_empty());
        assert!(log.warnings.is_empty());
    }

    #[test]
    fn early_stop_truncates_the_run() {
        let mut model = toy_model(3, 4);
        let train = toy_data(16, 3, 1);
        let val = toy_data(16, 3, 2);
        let mut config = toy_config();
        // frozen dynamics: no update can improve validation loss
        config.eta_theta = 0.0;
        config.eta_alpha = 0.0;
        config.t = 100;
        config.early_stop = Some(EarlyStop {
            patience: 4,
            min_delta: 1e-5,
        });
        let (_, log) = run_selection(&mut model, &train, &val, &config).unwrap();
        assert_eq!(log.rows.len(), 5);
        assert!(log.warnings.iter().any(|w| w.contains("early stop")));
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let log = TrajectoryLog {
            rows: vec![
                TrajectoryRow {
                    step: 0,
                    train_loss: 0.5,
                    val_loss: 0.25,
                    sum_alpha: 0.0,
                    alpha: vec![0.125, -0.125],
                },
                TrajectoryRow {
                    step: 1,
                    train_loss: 0.375,
                    val_loss: 0.1875,
                    sum_alpha: 0.0,
                    alpha: vec![0.25, -0.25],
                },
            ],
            warnings: Vec::new(),
            wall_time: Duration::from_secs(1),
        };
        let csv = log.to_csv_string();
        assert!(csv.starts_with("step,train_loss,val_loss,sum_alpha,alpha_0,alpha_1\n"));
        let back = TrajectoryLog::from_csv_str(&csv).unwrap();
        assert_eq!(back.rows, log.rows);
    }

    #[test]
    fn config_toml_round_trip_with_defaults() {
        let toml_src = r#"
            T = 10
            K = 2
            eta_theta = 0.05
            eta_alpha = 0.1
            batch_train = 8
            batch_val = 8
            seed = 7
            rank = 2
        "#;
        let config: RunConfig = toml::from_str(toml_src).unwrap();
        assert_eq!(config.t, 10);
        assert_eq!(config.rule, SelectionRule::Threshold);
        assert_eq!(config.early_stop, None);
        assert!(!config.allow_empty_selection);
        let unknown = toml::from_str::<RunConfig>("T = 1\nbogus = 2");
        assert!(unknown.is_err());
    }
}
