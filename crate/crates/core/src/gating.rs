//! Per-layer gate logits and their softmax relaxation.
//!
//! Each adapter layer i carries a logit `raw[i]`. The relaxed gate is
//!
//! ```text
//! gate(i) = n * exp(raw[i]) / sum_j exp(raw[j])
//! ```
//!
//! so gates average to exactly 1 and the all-zeros initialization leaves
//! the model identical to an ungated one. Gradients flow through the
//! relaxation with a closed-form Jacobian whose columns sum to zero; under
//! plain SGD that keeps `sum(raw)` pinned at its initial value, which is
//! what makes "logit above zero" a meaningful selection threshold.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use std::str::FromStr;

/// Gate logits for an n-layer model, plus how many SGD steps produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaVector {
    raw: Vec<f64>,
    step_count: u64,
}

impl AlphaVector {
    /// The standard initialization: every gate starts at exactly 1.
    pub fn zeros(n: usize) -> Result<AlphaVector> {
        if n == 0 {
            return Err(Error::Invalid("alpha vector needs at least one layer".into()));
        }
        Ok(AlphaVector {
            raw: vec![0.0; n],
            step_count: 0,
        })
    }

    pub fn from_raw(raw: Vec<f64>) -> Result<AlphaVector> {
        if raw.is_empty() {
            return Err(Error::Invalid("alpha vector needs at least one layer".into()));
        }
        if !raw.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite {
                context: "alpha vector".into(),
            });
        }
        Ok(AlphaVector { raw, step_count: 0 })
    }

    pub fn n(&self) -> usize {
        self.raw.len()
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Relaxed gate values for the current logits.
    pub fn relaxed(&self) -> Vec<f64> {
        relax(&self.raw)
    }
}

/// Softmax relaxation scaled by n, computed with max-subtraction so large
/// logits cannot overflow. Output entries sum to n.
pub fn relax(raw: &[f64]) -> Vec<f64> {
    let n = raw.len() as f64;
    let m = raw.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let exps: Vec<f64> = raw.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = exps.iter().fold(0.0, |acc, &e| acc + e);
    exps.iter().map(|&e| n * e / s).collect()
}

/// Jacobian of [`relax`]: entry (j, i) is d gate(j) / d raw(i).
///
/// Diagonal: gate(j) * (1 - gate(j)/n). Off-diagonal: -gate(j)*gate(i)/n.
/// Every column sums to zero.
pub fn relax_jacobian(raw: &[f64]) -> Tensor {
    let n = raw.len();
    let g = relax(raw);
    let nf = n as f64;
    let mut data = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..n {
            data[j * n + i] = if i == j {
                g[j] * (1.0 - g[j] / nf)
            } else {
                -g[j] * g[i] / nf
            };
        }
    }
    Tensor::matrix(n, n, data).expect("jacobian entries are finite")
}

/// Pull a loss gradient with respect to the gates back to the logits.
///
/// `d[j]` is dL/d gate(j); the result is dL/d raw(i), using the closed
/// form of the Jacobian-transpose product:
///
/// ```text
/// g_i = d_i * gate_i - (gate_i / n) * sum_j d_j * gate_j
/// ```
///
/// The entries always sum to zero (up to rounding).
pub fn grad_alpha(alpha: &AlphaVector, d: &[f64]) -> Result<Vec<f64>> {
    let n = alpha.n();
    if d.len() != n {
        return Err(Error::Invalid(format!(
            "grad_alpha: {} gate gradients for {} layers",
            d.len(),
            n
        )));
    }
    let gates = alpha.relaxed();
    let weighted: f64 = d
        .iter()
        .zip(&gates)
        .fold(0.0, |acc, (&dj, &gj)| acc + dj * gj);
    let nf = n as f64;
    let out: Vec<f64> = gates
        .iter()
        .zip(d)
        .map(|(&gi, &di)| di * gi - gi / nf * weighted)
        .collect();
    if !out.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite {
            context: "grad_alpha".into(),
        });
    }
    Ok(out)
}

/// One plain SGD step on the logits. Functional: the input is unchanged.
pub fn sgd_alpha_step(alpha: &AlphaVector, grad: &[f64], eta: f64) -> Result<AlphaVector> {
    if grad.len() != alpha.n() {
        return Err(Error::Invalid(format!(
            "sgd_alpha_step: {} gradient entries for {} layers",
            grad.len(),
            alpha.n()
        )));
    }
    let raw: Vec<f64> = alpha
        .raw
        .iter()
        .zip(grad)
        .map(|(&a, &g)| a - eta * g)
        .collect();
    if !raw.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite {
            context: "sgd_alpha_step".into(),
        });
    }
    Ok(AlphaVector {
        raw,
        step_count: alpha.step_count + 1,
    })
}

/// How final logits are mapped to a layer subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionRule {
    /// Keep layers whose logit is strictly above zero.
    Threshold,
    /// Keep the k largest logits; ties go to the lower index.
    TopK(usize),
}

impl fmt::Display for SelectionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectionRule::Threshold => write!(f, "threshold"),
            SelectionRule::TopK(k) => write!(f, "topk:{k}"),
        }
    }
}

impl FromStr for SelectionRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<SelectionRule> {
        if s == "threshold" {
            return Ok(SelectionRule::Threshold);
        }
        if let Some(rest) = s.strip_prefix("topk:") {
            let k: usize = rest
                .parse()
                .map_err(|_| Error::Invalid(format!("bad selection rule `{s}`")))?;
            return Ok(SelectionRule::TopK(k));
        }
        Err(Error::Invalid(format!(
            "bad selection rule `{s}` (expected `threshold` or `topk:K`)"
        )))
    }
}

impl Serialize for SelectionRule {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SelectionRule {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// Apply a selection rule to the final logits. The result is ascending and
/// may be empty under [`SelectionRule::Threshold`]; callers that need a
/// non-empty subset handle that case themselves.
pub fn select(alpha: &AlphaVector, rule: SelectionRule) -> Result<Vec<usize>> {
    let raw = alpha.raw();
    match rule {
        SelectionRule::Threshold => Ok(raw
            .iter()
            .enumerate()
            .filter(|&(_, &v)| v > 0.0)
            .map(|(i, _)| i)
            .collect()),
        SelectionRule::TopK(k) => {
            if k > raw.len() {
                return Err(Error::TopKTooLarge { k, n: raw.len() });
            }
            let mut order: Vec<usize> = (0..raw.len()).collect();
            order.sort_by(|&a, &b| {
                raw[b]
                    .partial_cmp(&raw[a])
                    .expect("logits are finite")
                    .then(a.cmp(&b))
            });
            let mut chosen = order[..k].to_vec();
            chosen.sort_unstable();
            Ok(chosen)
        }
    }
}

/// Everything a selection run produces, in the shape it is persisted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub n: usize,
    pub rule: SelectionRule,
    pub selected: Vec<usize>,
    pub alpha_final: Vec<f64>,
    /// Logits after each outer step; entry 0 is the initialization.
    pub alpha_history: Vec<Vec<f64>>,
}

impl SelectionResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<SelectionResult> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &std::path::Path) -> Result<SelectionResult> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        SelectionResult::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn relax_at_zero_is_exactly_one() {
        let a = AlphaVector::zeros(4).unwrap();
        for g in a.relaxed() {
            assert_eq!(g, 1.0);
        }
    }

    #[test]
    fn relax_known_values() {
        let g = relax(&[2.0f64.ln(), 0.0, 0.0]);
        assert!((g[0] - 1.5).abs() < 1e-12);
        assert!((g[1] - 0.75).abs() < 1e-12);
        assert!((g[2] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn relax_survives_huge_logits() {
        let g = relax(&[800.0, 0.0]);
        assert!(g.iter().all(|x| x.is_finite()));
        assert!((g[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn jacobian_at_zero() {
        let j = relax_jacobian(&[0.0; 4]);
        for r in 0..4 {
            for c in 0..4 {
                let expected = if r == c { 0.75 } else { -0.25 };
                assert_eq!(j.get(r, c), expected);
            }
        }
    }

    #[test]
    fn jacobian_single_layer_is_zero() {
        let j = relax_jacobian(&[1.7]);
        assert_eq!(j.get(0, 0), 0.0);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let raw = [0.3, -1.2, 0.8, 0.05];
        let j = relax_jacobian(&raw);
        let eps = 1e-6;
        for i in 0..raw.len() {
            let mut up = raw.to_vec();
            let mut down = raw.to_vec();
            up[i] += eps;
            down[i] -= eps;
            let gu = relax(&up);
            let gd = relax(&down);
            for jj in 0..raw.len() {
                let numeric = (gu[jj] - gd[jj]) / (2.0 * eps);
                assert!(
                    (j.get(jj, i) - numeric).abs() < 1e-6,
                    "entry ({jj},{i}): {} vs {numeric}",
                    j.get(jj, i)
                );
            }
        }
    }

    #[test]
    fn grad_alpha_known_value() {
        let a = AlphaVector::zeros(2).unwrap();
        let g = grad_alpha(&a, &[1.0, 0.0]).unwrap();
        assert_eq!(g, vec![0.5, -0.5]);
    }

    #[test]
    fn grad_alpha_matches_jacobian_transpose() {
        let a = AlphaVector::from_raw(vec![0.4, -0.9, 1.3]).unwrap();
        let d = [0.7, -0.2, 0.5];
        let closed = grad_alpha(&a, &d).unwrap();
        let j = relax_jacobian(a.raw());
        // J^T d: entry i sums d_j * J[j][i]
        for i in 0..3 {
            let mut acc = 0.0;
            for jj in 0..3 {
                acc += d[jj] * j.get(jj, i);
            }
            assert!((closed[i] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_step_counts_and_moves() {
        let a = AlphaVector::zeros(3).unwrap();
        let b = sgd_alpha_step(&a, &[1.0, 0.0, -1.0], 0.1).unwrap();
        assert_eq!(b.step_count(), 1);
        assert_eq!(b.raw(), &[-0.1, 0.0, 0.1]);
        assert_eq!(a.raw(), &[0.0; 3]);
    }

    #[test]
    fn threshold_is_strict() {
        let a = AlphaVector::from_raw(vec![0.1, 0.0, -0.2]).unwrap();
        assert_eq!(select(&a, SelectionRule::Threshold).unwrap(), vec![0]);
    }

    #[test]
    fn threshold_can_be_empty() {
        let a = AlphaVector::from_raw(vec![-0.1, 0.0]).unwrap();
        assert!(select(&a, SelectionRule::Threshold).unwrap().is_empty());
    }

    #[test]
    fn topk_breaks_ties_toward_lower_index() {
        let a = AlphaVector::from_raw(vec![0.5, 0.7, 0.5, 0.1]).unwrap();
        assert_eq!(select(&a, SelectionRule::TopK(2)).unwrap(), vec![0, 1]);
        assert_eq!(select(&a, SelectionRule::TopK(3)).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn topk_too_large_is_an_error() {
        let a = AlphaVector::zeros(3).unwrap();
        assert!(matches!(
            select(&a, SelectionRule::TopK(5)),
            Err(Error::TopKTooLarge { k: 5, n: 3 })
        ));
    }

    #[test]
    fn rule_string_round_trip() {
        for rule in [SelectionRule::Threshold, SelectionRule::TopK(4)] {
            let s = rule.to_string();
            assert_eq!(s.parse::<SelectionRule>().unwrap(), rule);
        }
        assert!("topk".parse::<SelectionRule>().is_err());
        assert!("topk:x".parse::<SelectionRule>().is_err());
    }

    #[test]
    fn selection_result_json_round_trip() {
        let r = SelectionResult {
            n: 3,
            rule: SelectionRule::TopK(2),
            selected: vec![0, 2],
            alpha_final: vec![0.5, -0.25, 0.125],
            alpha_history: vec![vec![0.0, 0.0, 0.0], vec![0.5, -0.25, 0.125]],
        };
        let json = r.to_json().unwrap();
        assert!(json.contains("\"rule\": \"topk:2\""), "{json}");
        assert_eq!(SelectionResult::from_json(&json).unwrap(), r);
    }

    proptest! {
        #[test]
        fn relax_sums_to_n(raw in prop::collection::vec(-10.0f64..10.0, 1..12)) {
            let g = relax(&raw);
            let s: f64 = g.iter().sum();
            prop_assert!((s - raw.len() as f64).abs() < 1e-9);
            prop_assert!(g.iter().all(|&x| x > 0.0));
        }

        #[test]
        fn relax_is_shift_invariant(
            raw in prop::collection::vec(-5.0f64..5.0, 1..10),
            c in -20.0f64..20.0,
        ) {
            let shifted: Vec<f64> = raw.iter().map(|&x| x + c).collect();
            let a = relax(&raw);
            let b = relax(&shifted);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn jacobian_columns_sum_to_zero(raw in prop::collection::vec(-6.0f64..6.0, 1..10)) {
            let j = relax_jacobian(&raw);
            let n = raw.len();
            for i in 0..n {
                let mut s = 0.0;
                for jj in 0..n {
                    s += j.get(jj, i);
                }
                prop_assert!(s.abs() < 1e-9, "column {i} sums to {s}");
            }
        }

        #[test]
        fn grad_alpha_sums_to_zero(
            raw in prop::collection::vec(-6.0f64..6.0, 1..10),
            seed in 0u64..1000,
        ) {
            let a = AlphaVector::from_raw(raw.clone()).unwrap();
            let mut rng = crate::rng::Rng::from_seed(seed);
            let d: Vec<f64> = (0..raw.len()).map(|_| rng.next_normal()).collect();
            let g = grad_alpha(&a, &d).unwrap();
            let s: f64 = g.iter().sum();
            prop_assert!(s.abs() < 1e-9, "gradient sums to {s}");
        }

        #[test]
        fn sum_raw_is_invariant_under_sgd(
            seed in 0u64..500,
            steps in 1usize..30,
            eta in 0.01f64..0.5,
        ) {
            let mut rng = crate::rng::Rng::from_seed(seed);
            let mut a = AlphaVector::zeros(6).unwrap();
            for _ in 0..steps {
                let d: Vec<f64> = (0..6).map(|_| rng.next_normal()).collect();
                let g = grad_alpha(&a, &d).unwrap();
                a = sgd_alpha_step(&a, &g, eta).unwrap();
            }
            let s: f64 = a.raw().iter().sum();
            prop_assert!(s.abs() < 1e-9, "sum drifted to {s}");
            prop_assert_eq!(a.step_count(), steps as u64);
        }
    }
}
