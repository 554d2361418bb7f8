//! Finite-difference smoothness probes and the analytic bounds they are
//! checked against.
//!
//! The estimator perturbs one parameter block, re-evaluates the loss
//! gradient, and reports the Lipschitz quotient
//!
//! ```text
//! beta_hat = ||grad f(w + eps u) - grad f(w)|| / ||eps u||
//! ```
//!
//! maximized over random unit directions u and averaged over probe inputs.
//! For identity-activation chains under MSE the gradient of a single weight
//! block is affine in that block, so the quotient is exact and two closed
//! forms bound it: the product of the other layers' operator norms squared
//! times the mean squared input norm, and a factored variant that splits
//! each layer into its frozen base and its gated low-rank delta. Frozen or
//! deselected layers contribute nothing to the delta term.

use crate::data::gaussian_matrix;
use crate::error::{Error, Result};
use crate::model::{Activation, Batch, GatedLoraModel};
use crate::rng::Rng;
use crate::tensor::{mse_loss, mse_loss_grad, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Mean squared row norm of a batch, the ||x||^2 factor in every bound.
pub fn mean_row_norm_sq(x: &Tensor) -> f64 {
    if x.rows() == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for r in 0..x.rows() {
        acc += x.row(r).iter().fold(0.0, |s, &v| s + v * v);
    }
    acc / x.rows() as f64
}

const POWER_MAX_ITERS: usize = 1000;
const POWER_TOL: f64 = 1e-10;

/// Largest singular value by power iteration on W^T W, started from a
/// fixed internal stream so repeated calls agree to the bit. Converges when
/// successive estimates differ by at most 1e-10 (relative above 1, absolute
/// below); gives up after 1000 iterations.
pub fn spectral_norm(w: &Tensor) -> Result<f64> {
    if w.rank() != 2 {
        return Err(Error::Invalid(format!(
            "spectral norm of a rank-{} tensor",
            w.rank()
        )));
    }
    if w.max_abs() == 0.0 {
        return Ok(0.0);
    }
    let mut rng = Rng::from_seed(0x5ca1_ab1e).stream("power");
    let wt = w.transpose();
    let mut v = unit_column(w.cols(), &mut rng)?;
    let mut prev = -1.0;
    for _ in 0..POWER_MAX_ITERS {
        let u = w.matmul(&v)?;
        let sigma = u.frobenius_norm();
        if sigma == 0.0 {
            // v landed in the null space; a fresh draw escapes it.
            v = unit_column(w.cols(), &mut rng)?;
            continue;
        }
        let back = wt.matmul(&u)?;
        let back_norm = back.frobenius_norm();
        if back_norm == 0.0 {
            return Ok(sigma);
        }
        v = back.scale(1.0 / back_norm)?;
        if (sigma - prev).abs() <= POWER_TOL * sigma.max(1.0) {
            return Ok(sigma);
        }
        prev = sigma;
    }
    Err(Error::PowerIterationDiverged {
        max_iters: POWER_MAX_ITERS,
    })
}

fn unit_column(dim: usize, rng: &mut Rng) -> Result<Tensor> {
    loop {
        let v = gaussian_matrix(rng, dim, 1, 1.0);
        let n = v.frobenius_norm();
        if n > 0.0 {
            return v.scale(1.0 / n);
        }
    }
}

/// Which matrix norm stands in for lambda in the bounds. The proofs use the
/// operator norm; Frobenius is offered for sensitivity checks and is always
/// at least as large.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    Spectral,
    Frobenius,
}

pub fn layer_norm(w: &Tensor, kind: NormKind) -> Result<f64> {
    match kind {
        NormKind::Spectral => spectral_norm(w),
        NormKind::Frobenius => Ok(w.frobenius_norm()),
    }
}

/// How the probe point is displaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    /// `n_directions` random unit directions scaled by epsilon; the quotient
    /// is maximized over them.
    #[default]
    RandomDirections,
    /// Epsilon added to every entry, one evaluation, denominator
    /// epsilon * sqrt(P). Mirrors the habit of perturbing "by epsilon"
    /// without naming a direction.
    UniformShift,
}

/// What a probe report ranges over: layers of one model, or depths of a
/// generated chain family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    #[default]
    PerLayer,
    DepthSweep,
}

fn default_epsilon() -> f64 {
    1e-5
}

fn default_n_inputs() -> usize {
    10
}

fn default_n_directions() -> usize {
    8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothnessProbeConfig {
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_n_inputs")]
    pub n_inputs: usize,
    #[serde(default = "default_n_directions")]
    pub n_directions: usize,
    #[serde(default)]
    pub mode: ProbeMode,
    #[serde(default)]
    pub perturbation: Perturbation,
    #[serde(default)]
    pub norm: NormKind,
}

impl Default for SmoothnessProbeConfig {
    fn default() -> Self {
        SmoothnessProbeConfig {
            epsilon: default_epsilon(),
            n_inputs: default_n_inputs(),
            n_directions: default_n_directions(),
            mode: ProbeMode::default(),
            perturbation: Perturbation::default(),
            norm: NormKind::default(),
        }
    }
}

impl SmoothnessProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config {
                path: "probe.epsilon".into(),
                message: format!("must be a positive finite number, got {}", self.epsilon),
            });
        }
        if self.n_inputs == 0 {
            return Err(Error::Config {
                path: "probe.n_inputs".into(),
                message: "must be at least 1".into(),
            });
        }
        if self.n_directions == 0 {
            return Err(Error::Config {
                path: "probe.n_directions".into(),
                message: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// A plain chain of dense weight matrices under MSE, the model class the
/// closed-form bounds actually cover. Gated models project onto this via
/// [`to_dense_chain`].
#[derive(Debug, Clone, PartialEq)]
pub struct DenseChain {
    pub weights: Vec<Tensor>,
    pub activation: Activation,
}

impl DenseChain {
    pub fn new(weights: Vec<Tensor>, activation: Activation) -> Result<DenseChain> {
        if weights.is_empty() {
            return Err(Error::Invalid("chain needs at least one weight".into()));
        }
        for (i, w) in weights.iter().enumerate() {
            if w.rank() != 2 {
                return Err(Error::Invalid(format!("chain weight {i} is not a matrix")));
            }
            if i > 0 && weights[i - 1].rows() != w.cols() {
                return Err(Error::Invalid(format!(
                    "chain weight {i}: {} columns after {} outputs",
                    w.cols(),
                    weights[i - 1].rows()
                )));
            }
        }
        Ok(DenseChain { weights, activation })
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().unwrap().rows()
    }

    fn forward_trace(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut zs = Vec::with_capacity(self.depth() + 1);
        zs.push(x.clone());
        for w in &self.weights {
            let u = zs.last().unwrap().matmul(&w.transpose())?;
            zs.push(self.activation.apply(&u));
        }
        Ok(zs)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_trace(x)?.into_iter().last().unwrap())
    }

    pub fn loss(&self, x: &Tensor, y: &Tensor) -> Result<f64> {
        mse_loss(&self.forward(x)?, y)
    }

    /// Gradient of the MSE loss with respect to weight i alone.
    pub fn weight_grad(&self, i: usize, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        if i >= self.depth() {
            return Err(Error::LayerOutOfRange {
                index: i,
                layers: self.depth(),
            });
        }
        let zs = self.forward_trace(x)?;
        let mut dz = mse_loss_grad(zs.last().unwrap(), y)?;
        for j in (i..self.depth()).rev() {
            let phi_prime = self.activation.derivative_from_output(&zs[j + 1]);
            let du = dz.hadamard(&phi_prime)?;
            if j == i {
                return du.transpose().matmul(&zs[j]);
            }
            dz = du.matmul(&self.weights[j])?;
        }
        unreachable!("loop always returns at j == i");
    }
}

/// Materialize the chain a gated model currently computes: every layer
/// becomes its effective weight W + gate * B A, with frozen layers keeping
/// the bare base weight. The model must be headless; the dense view has no
/// notion of a classification head.
pub fn to_dense_chain(model: &GatedLoraModel, gates: &[f64]) -> Result<DenseChain> {
    if model.head().is_some() {
        return Err(Error::Invalid(
            "dense chain view covers headless models only".into(),
        ));
    }
    if gates.len() != model.n_layers() {
        return Err(Error::Invalid(format!(
            "{} gates for {} layers",
            gates.len(),
            model.n_layers()
        )));
    }
    let activation = model.layers()[0].activation;
    if model.layers().iter().any(|s| s.activation != activation) {
        return Err(Error::Invalid(
            "dense chain view needs a uniform activation".into(),
        ));
    }
    let weights = (0..model.n_layers())
        .map(|i| model.effective_weight(i, model.effective_gate(i, gates)))
        .collect::<Result<Vec<_>>>()?;
    DenseChain::new(weights, activation)
}

fn l2(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |s, &x| s + x * x).sqrt()
}

fn check_finite(v: &[f64], context: &str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: context.into(),
        });
    }
    Ok(())
}

/// The raw Lipschitz quotient of an arbitrary gradient map at w0. This is
/// the estimator's core, exposed so closed-form toy problems (a quadratic,
/// a scalar linear model) can certify it directly.
pub fn beta_quotient_fn<G>(
    mut grad_at: G,
    w0: &[f64],
    epsilon: f64,
    n_directions: usize,
    perturbation: Perturbation,
    rng: &mut Rng,
) -> Result<f64>
where
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if w0.is_empty() {
        return Err(Error::Invalid("beta probe over zero parameters".into()));
    }
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::Invalid(format!("beta probe epsilon {epsilon}")));
    }
    let g0 = grad_at(w0)?;
    if g0.len() != w0.len() {
        return Err(Error::Invalid(format!(
            "gradient length {} for {} parameters",
            g0.len(),
            w0.len()
        )));
    }
    check_finite(&g0, "beta probe gradient")?;
    let p = w0.len();
    let quotient = |g1: &[f64], step_norm: f64| -> f64 {
        let diff: Vec<f64> = g1.iter().zip(&g0).map(|(a, b)| a - b).collect();
        l2(&diff) / step_norm
    };
    match perturbation {
        Perturbation::UniformShift => {
            let w1: Vec<f64> = w0.iter().map(|&w| w + epsilon).collect();
            let g1 = grad_at(&w1)?;
            check_finite(&g1, "beta probe gradient")?;
            Ok(quotient(&g1, epsilon * (p as f64).sqrt()))
        }
        Perturbation::RandomDirections => {
            if n_directions == 0 {
                return Err(Error::Invalid("beta probe needs a direction".into()));
            }
            let mut best = 0.0_f64;
            for _ in 0..n_directions {
                let u = unit_direction(p, rng);
                let w1: Vec<f64> = w0
                    .iter()
                    .zip(&u)
                    .map(|(&w, &d)| w + epsilon * d)
                    .collect();
                let g1 = grad_at(&w1)?;
                check_finite(&g1, "beta probe gradient")?;
                best = best.max(quotient(&g1, epsilon));
            }
            Ok(best)
        }
    }
}

fn unit_direction(p: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let mut u: Vec<f64> = (0..p).map(|_| rng.next_normal()).collect();
        let n = l2(&u);
        if n > 0.0 {
            for x in &mut u {
                *x /= n;
            }
            return u;
        }
    }
}

/// Draw `n_inputs` distinct probe rows from a fixed stream of `seed`.
fn probe_rows(rows: usize, config: &SmoothnessProbeConfig, seed: u64) -> Result<Vec<usize>> {
    if rows == 0 {
        return Err(Error::EmptyDataset);
    }
    if config.n_inputs > rows {
        return Err(Error::BatchTooLarge {
            requested: config.n_inputs,
            available: rows,
        });
    }
    let mut rng = Rng::from_seed(seed).stream("probe-rows");
    Ok(rng.subset(rows, config.n_inputs))
}

/// Smoothness estimate for one weight block of a dense chain: the max over
/// directions of the quotient, averaged over the probe inputs. Each probe
/// input gets its own direction stream, so the estimate is independent of
/// evaluation order and of chain depth.
pub fn estimate_beta_chain(
    chain: &DenseChain,
    layer: usize,
    x: &Tensor,
    y: &Tensor,
    config: &SmoothnessProbeConfig,
    seed: u64,
) -> Result<f64> {
    config.validate()?;
    if layer >= chain.depth() {
        return Err(Error::LayerOutOfRange {
            index: layer,
            layers: chain.depth(),
        });
    }
    if x.rows() != y.rows() {
        return Err(Error::ShapeMismatch {
            op: "estimate_beta_chain",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let indices = probe_rows(x.rows(), config, seed)?;
    let root = Rng::from_seed(seed);
    let (r, c) = (chain.weights[layer].rows(), chain.weights[layer].cols());
    let w0 = chain.weights[layer].data().to_vec();
    let mut acc = 0.0;
    for (b, &idx) in indices.iter().enumerate() {
        let xb = x.take_rows(&[idx])?;
        let yb = y.take_rows(&[idx])?;
        let mut probe = chain.clone();
        let grad_at = |w: &[f64]| -> Result<Vec<f64>> {
            probe.weights[layer] = Tensor::matrix(r, c, w.to_vec())?;
            Ok(probe.weight_grad(layer, &xb, &yb)?.data().to_vec())
        };
        let mut dir_rng = root.stream_indexed("probe-dirs", b as u64);
        acc += beta_quotient_fn(
            grad_at,
            &w0,
            config.epsilon,
            config.n_directions,
            config.perturbation,
            &mut dir_rng,
        )?;
    }
    Ok(acc / indices.len() as f64)
}

/// Which parameters a gated-model probe perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeTarget {
    /// One layer's adapter pair (A then B, flattened).
    Layer(usize),
    /// Every unfrozen adapter, in [`GatedLoraModel::flatten_trainable`] order.
    Trainable,
}

/// Smoothness estimate for a gated model's adapter parameters at fixed gate
/// values, against the model's own loss (MSE or cross-entropy per the batch
/// targets).
pub fn estimate_beta(
    model: &GatedLoraModel,
    target: ProbeTarget,
    gates: &[f64],
    batch: &Batch,
    config: &SmoothnessProbeConfig,
    seed: u64,
) -> Result<f64> {
    config.validate()?;
    if let ProbeTarget::Layer(i) = target {
        if i >= model.n_layers() {
            return Err(Error::LayerOutOfRange {
                index: i,
                layers: model.n_layers(),
            });
        }
        if model.frozen_mask()[i] {
            return Err(Error::Invalid(format!(
                "probe target layer {i} is frozen; its gradients are identically zero"
            )));
        }
    }
    let w0 = match target {
        ProbeTarget::Layer(i) => {
            let ad = model.adapter(i);
            let mut w = ad.a.data().to_vec();
            w.extend_from_slice(ad.b.data());
            w
        }
        ProbeTarget::Trainable => model.flatten_trainable(),
    };
    if w0.is_empty() {
        return Err(Error::Invalid(
            "probe target has no trainable parameters".into(),
        ));
    }
    let indices = probe_rows(batch.len(), config, seed)?;
    let root = Rng::from_seed(seed);
    let mut acc = 0.0;
    for (b, &idx) in indices.iter().enumerate() {
        let row = batch.take_rows(&[idx])?;
        let mut probe = model.clone();
        let grad_at = |w: &[f64]| -> Result<Vec<f64>> {
            set_target(&mut probe, target, w)?;
            let (_, grads) = probe.loss_and_grads_at(&row, gates)?;
            Ok(match target {
                ProbeTarget::Layer(i) => {
                    let mut g = grads.adapters[i].a.data().to_vec();
                    g.extend_from_slice(grads.adapters[i].b.data());
                    g
                }
                ProbeTarget::Trainable => {
                    let mut g = Vec::new();
                    for (i, ad) in grads.adapters.iter().enumerate() {
                        if !probe.frozen_mask()[i] {
                            g.extend_from_slice(ad.a.data());
                            g.extend_from_slice(ad.b.data());
                        }
                    }
                    g
                }
            })
        };
        let mut dir_rng = root.stream_indexed("probe-dirs", b as u64);
        acc += beta_quotient_fn(
            grad_at,
            &w0,
            config.epsilon,
            config.n_directions,
            config.perturbation,
            &mut dir_rng,
        )?;
    }
    Ok(acc / indices.len() as f64)
}

fn set_target(model: &mut GatedLoraModel, target: ProbeTarget, w: &[f64]) -> Result<()> {
    match target {
        ProbeTarget::Layer(i) => {
            let spec = model.layers()[i];
            let na = spec.rank * spec.d_in;
            if w.len() != na + spec.d_out * spec.rank {
                return Err(Error::Invalid(format!(
                    "adapter {i}: {} parameters, expected {}",
                    w.len(),
                    na + spec.d_out * spec.rank
                )));
            }
            let a = Tensor::matrix(spec.rank, spec.d_in, w[..na].to_vec())?;
            let b = Tensor::matrix(spec.d_out, spec.rank, w[na..].to_vec())?;
            model.set_adapter(i, a, b)
        }
        ProbeTarget::Trainable => model.set_trainable(w),
    }
}

/// Operator norm of every chain weight, in layer order.
pub fn chain_lambdas(chain: &DenseChain, norm: NormKind) -> Result<Vec<f64>> {
    chain.weights.iter().map(|w| layer_norm(w, norm)).collect()
}

/// (prod of lambdas over j != skip)^2 * ||x||^2.
pub fn bound_from_lambdas(lambdas: &[f64], skip: usize, x_norm_sq: f64) -> f64 {
    let mut prod = 1.0;
    for (j, &l) in lambdas.iter().enumerate() {
        if j != skip {
            prod *= l;
        }
    }
    prod * prod * x_norm_sq
}

/// Closed-form smoothness bound for weight block i of an identity-activation
/// chain under MSE: the squared product of the other layers' spectral norms
/// times the mean squared input norm.
pub fn prop2_bound(chain: &DenseChain, x: &Tensor, i: usize) -> Result<f64> {
    if i >= chain.depth() {
        return Err(Error::LayerOutOfRange {
            index: i,
            layers: chain.depth(),
        });
    }
    let lambdas = chain_lambdas(chain, NormKind::Spectral)?;
    Ok(bound_from_lambdas(&lambdas, i, mean_row_norm_sq(x)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraBound {
    pub value: f64,
    /// True when some other layer has a zero base norm but a live adapter,
    /// where the factored form divides by zero; the value is then the plain
    /// product bound on the effective chain instead.
    pub degenerate: bool,
}

/// Factored smoothness bound for layer i of a gated model: each other layer
/// contributes its base norm lambda1 squared and an inflation factor
/// (1 + lambda2/lambda1)^2, lambda2 the norm of its gated delta. A layer
/// whose delta is zero (ungated, frozen, or simply empty) contributes factor
/// exactly 1, so with all adapters dead this reproduces the plain product
/// bound bit for bit.
pub fn lora_bound(model: &GatedLoraModel, gates: &[f64], x: &Tensor, i: usize) -> Result<LoraBound> {
    lora_bound_with(model, gates, x, i, NormKind::Spectral)
}

pub fn lora_bound_with(
    model: &GatedLoraModel,
    gates: &[f64],
    x: &Tensor,
    i: usize,
    norm: NormKind,
) -> Result<LoraBound> {
    let n = model.n_layers();
    if i >= n {
        return Err(Error::LayerOutOfRange { index: i, layers: n });
    }
    if gates.len() != n {
        return Err(Error::Invalid(format!("{} gates for {n} layers", gates.len())));
    }
    let x_norm_sq = mean_row_norm_sq(x);
    let mut base_prod = 1.0;
    let mut factor_prod = 1.0;
    let mut degenerate = false;
    for j in 0..n {
        if j == i {
            continue;
        }
        let lambda1 = layer_norm(model.base_weight(j), norm)?;
        let gate = model.effective_gate(j, gates);
        let lambda2 = layer_norm(&model.delta_matrix(j)?.scale(gate)?, norm)?;
        if lambda2 > 0.0 && lambda1 == 0.0 {
            degenerate = true;
            break;
        }
        base_prod *= lambda1;
        if lambda2 > 0.0 {
            factor_prod *= 1.0 + lambda2 / lambda1;
        }
    }
    if degenerate {
        // Fall back to the plain product bound over the effective weights,
        // which needs no division.
        let mut prod = 1.0;
        for j in 0..n {
            if j == i {
                continue;
            }
            let e = model.effective_weight(j, model.effective_gate(j, gates))?;
            prod *= layer_norm(&e, norm)?;
        }
        return Ok(LoraBound {
            value: prod * prod * x_norm_sq,
            degenerate: true,
        });
    }
    let prod = base_prod * factor_prod;
    Ok(LoraBound {
        value: prod * prod * x_norm_sq,
        degenerate: false,
    })
}

/// Random orthogonal matrix: Gram-Schmidt on a square Gaussian draw, with a
/// second orthogonalization pass for float hygiene.
pub fn random_orthogonal(dim: usize, rng: &mut Rng) -> Result<Tensor> {
    if dim == 0 {
        return Err(Error::Invalid("orthogonal matrix of dimension 0".into()));
    }
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(dim);
    for _ in 0..dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.next_normal()).collect();
        for _pass in 0..2 {
            for q in &cols {
                let r: f64 = q.iter().zip(&v).fold(0.0, |s, (&a, &b)| s + a * b);
                for (vi, qi) in v.iter_mut().zip(q) {
                    *vi -= r * qi;
                }
            }
        }
        let n = l2(&v);
        if n < 1e-12 {
            return Err(Error::Invalid(
                "degenerate Gaussian draw in orthogonalization".into(),
            ));
        }
        for x in &mut v {
            *x /= n;
        }
        cols.push(v);
    }
    let mut data = vec![0.0; dim * dim];
    for (c, col) in cols.iter().enumerate() {
        for (r, &v) in col.iter().enumerate() {
            data[r * dim + c] = v;
        }
    }
    Tensor::matrix(dim, dim, data)
}

/// Generator of identity-activation chains with every weight lambda times a
/// random orthogonal matrix, so each layer's spectral norm is exactly
/// lambda. Layer j draws from a stream keyed by j alone: the depth-d chain
/// is a prefix of the depth-(d+1) chain.
#[derive(Debug, Clone, Copy)]
pub struct ChainFamily {
    pub dim: usize,
    pub lambda: f64,
    pub seed: u64,
}

impl ChainFamily {
    pub fn chain(&self, depth: usize) -> Result<DenseChain> {
        if self.dim == 0 {
            return Err(Error::Invalid("chain family with dimension 0".into()));
        }
        if depth == 0 {
            return Err(Error::Invalid("chain of depth 0".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Invalid(format!(
                "chain family lambda {}",
                self.lambda
            )));
        }
        let root = Rng::from_seed(self.seed);
        let weights = (0..depth)
            .map(|j| {
                let q = random_orthogonal(self.dim, &mut root.stream_indexed("chain", j as u64))?;
                q.scale(self.lambda)
            })
            .collect::<Result<Vec<_>>>()?;
        DenseChain::new(weights, Activation::Identity)
    }
}

fn safe_ratio(beta: f64, bound: f64) -> f64 {
    if bound > 0.0 {
        beta / bound
    } else {
        0.0
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// One probed point: a layer index in per-layer mode, a depth in sweep mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaRow {
    pub index: usize,
    pub beta_hat: f64,
    pub bound: f64,
    pub ratio: f64,
    #[serde(default, skip_serializing_if = "is_false")]
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaReport {
    pub mode: ProbeMode,
    pub input_norm_sq: f64,
    pub rows: Vec<BetaRow>,
    /// Depth sweeps also report, per depth, the layer with the largest
    /// estimate; per-layer reports leave this empty.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub worst_rows: Option<Vec<BetaRow>>,
}

fn rows_to_csv(rows: &[BetaRow]) -> String {
    let mut out = String::from("index,beta_hat,bound,ratio\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e}\n",
            r.index, r.beta_hat, r.bound, r.ratio
        ));
    }
    out
}

impl BetaReport {
    pub fn to_csv_string(&self) -> String {
        rows_to_csv(&self.rows)
    }

    pub fn worst_to_csv_string(&self) -> Option<String> {
        self.worst_rows.as_deref().map(rows_to_csv)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<BetaReport> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Per-layer probe of a gated model. The estimate runs on the model's dense
/// linear view (effective weights, identity activation), which is the model
/// class the reported bounds cover; the bound column is the factored form.
/// Probe inputs and targets are Gaussian draws from streams of `seed`.
pub fn per_layer_report(
    model: &GatedLoraModel,
    gates: &[f64],
    config: &SmoothnessProbeConfig,
    seed: u64,
) -> Result<BetaReport> {
    config.validate()?;
    let mut chain = to_dense_chain(model, gates)?;
    chain.activation = Activation::Identity;
    let root = Rng::from_seed(seed);
    let x = gaussian_matrix(
        &mut root.stream("probe-x"),
        config.n_inputs,
        chain.input_dim(),
        1.0,
    );
    let y = gaussian_matrix(
        &mut root.stream("probe-y"),
        config.n_inputs,
        chain.output_dim(),
        1.0,
    );
    let x_norm_sq = mean_row_norm_sq(&x);
    let rows = (0..chain.depth())
        .into_par_iter()
        .map(|i| -> Result<BetaRow> {
            let beta_hat = estimate_beta_chain(&chain, i, &x, &y, config, seed)?;
            let lb = lora_bound_with(model, gates, &x, i, config.norm)?;
            Ok(BetaRow {
                index: i,
                beta_hat,
                bound: lb.value,
                ratio: safe_ratio(beta_hat, lb.value),
                degenerate: lb.degenerate,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BetaReport {
        mode: ProbeMode::PerLayer,
        input_norm_sq: x_norm_sq,
        rows,
        worst_rows: None,
    })
}

/// Probe a chain family at each depth: the first layer's estimate and bound
/// per depth, plus the worst layer per depth as a second series. The probe
/// sample is drawn once from the family seed, so depths share inputs and
/// directions.
pub fn depth_sweep(
    family: &ChainFamily,
    depths: &[usize],
    config: &SmoothnessProbeConfig,
) -> Result<BetaReport> {
    config.validate()?;
    if depths.is_empty() {
        return Err(Error::Invalid("depth sweep over no depths".into()));
    }
    let root = Rng::from_seed(family.seed);
    let x = gaussian_matrix(&mut root.stream("probe-x"), config.n_inputs, family.dim, 1.0);
    let y = gaussian_matrix(&mut root.stream("probe-y"), config.n_inputs, family.dim, 1.0);
    let x_norm_sq = mean_row_norm_sq(&x);
    let pairs = depths
        .par_iter()
        .map(|&d| -> Result<(BetaRow, BetaRow)> {
            let chain = family.chain(d)?;
            let lambdas = chain_lambdas(&chain, config.norm)?;
            let mut per_layer = Vec::with_capacity(d);
            for i in 0..d {
                let beta_hat = estimate_beta_chain(&chain, i, &x, &y, config, family.seed)?;
                let bound = bound_from_lambdas(&lambdas, i, x_norm_sq);
                per_layer.push(BetaRow {
                    index: d,
                    beta_hat,
                    bound,
                    ratio: safe_ratio(beta_hat, bound),
                    degenerate: false,
                });
            }
            let first = per_layer[0].clone();
            let worst = per_layer
                .into_iter()
                .max_by(|a, b| a.beta_hat.total_cmp(&b.beta_hat))
                .unwrap();
            Ok((first, worst))
        })
        .collect::<Result<Vec<_>>>()?;
    let (rows, worst_rows) = pairs.into_iter().unzip();
    Ok(BetaReport {
        mode: ProbeMode::DepthSweep,
        input_norm_sq: x_norm_sq,
        rows,
        worst_rows: Some(worst_rows),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerSpec, Targets};
    use approx::assert_relative_eq;

    fn scalar_chain(ws: &[f64]) -> DenseChain {
        let weights = ws
            .iter()
            .map(|&w| Tensor::matrix(1, 1, vec![w]).unwrap())
            .collect();
        DenseChain::new(weights, Activation::Identity).unwrap()
    }

    fn probe_config() -> SmoothnessProbeConfig {
        SmoothnessProbeConfig {
            n_inputs: 2,
            n_directions: 4,
            ..SmoothnessProbeConfig::default()
        }
    }

    #[test]
    fn spectral_norm_matches_known_matrices() {
        let d = Tensor::matrix(2, 2, vec![3.0, 0.0, 0.0, 2.0]).unwrap();
        assert_relative_eq!(spectral_norm(&d).unwrap(), 3.0, max_relative = 1e-9);

        assert_eq!(spectral_norm(&Tensor::zeros(&[3, 4])).unwrap(), 0.0);

        // Rank-one u v^T has a single singular value ||u|| ||v||.
        let u = [1.0, 2.0, 2.0];
        let v = [2.0, 1.0, 2.0];
        let outer = Tensor::matrix(
            3,
            3,
            u.iter().flat_map(|&a| v.iter().map(move |&b| a * b)).collect(),
        )
        .unwrap();
        assert_relative_eq!(spectral_norm(&outer).unwrap(), 9.0, max_relative = 1e-9);

        let wide = Tensor::matrix(1, 3, vec![1.0, 2.0, 2.0]).unwrap();
        assert_relative_eq!(spectral_norm(&wide).unwrap(), 3.0, max_relative = 1e-9);
    }

    #[test]
    fn random_orthogonal_is_orthogonal_with_unit_spectral_norm() {
        let mut rng = Rng::from_seed(7).stream("orth");
        for dim in [1usize, 3, 8] {
            let q = random_orthogonal(dim, &mut rng).unwrap();
            let gram = q.transpose().matmul(&q).unwrap();
            for r in 0..dim {
                for c in 0..dim {
                    let want = if r == c { 1.0 } else { 0.0 };
                    assert!((gram.get(r, c) - want).abs() < 1e-12, "gram({r},{c})");
                }
            }
            assert_relative_eq!(spectral_norm(&q).unwrap(), 1.0, max_relative = 1e-9);
        }
    }

    #[test]
    fn quadratic_quotient_recovers_the_hessian() {
        // f(w) = c/2 ||w||^2 has constant Hessian c I, so the quotient is c
        // in every direction and for the uniform shift alike.
        let c = 2.5;
        let grad = |w: &[f64]| Ok(w.iter().map(|&x| c * x).collect());
        let w0 = [0.3, -1.2, 0.7, 0.05];
        for pert in [Perturbation::RandomDirections, Perturbation::UniformShift] {
            let mut rng = Rng::from_seed(3).stream("dirs");
            let q = beta_quotient_fn(grad, &w0, 1e-5, 6, pert, &mut rng).unwrap();
            assert_relative_eq!(q, c, max_relative = 1e-8);
        }
    }

    #[test]
    fn one_layer_scalar_estimate_is_mean_squared_input() {
        // grad_W of 1/2 (Wx - y)^2 is (Wx - y)x: affine in W with slope x^2,
        // so each probe row contributes exactly its squared input.
        let chain = scalar_chain(&[0.7]);
        let x = Tensor::matrix(2, 1, vec![1.5, 0.5]).unwrap();
        let y = Tensor::matrix(2, 1, vec![0.3, -0.2]).unwrap();
        for pert in [Perturbation::RandomDirections, Perturbation::UniformShift] {
            let config = SmoothnessProbeConfig {
                perturbation: pert,
                ..probe_config()
            };
            let beta = estimate_beta_chain(&chain, 0, &x, &y, &config, 11).unwrap();
            assert_relative_eq!(beta, 1.25, max_relative = 1e-9);
        }
        assert_eq!(prop2_bound(&chain, &x, 0).unwrap(), 1.25);
    }

    #[test]
    fn two_layer_scalar_chain_meets_its_bound_exactly() {
        let chain = scalar_chain(&[2.0, 3.0]);
        let x = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let y = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        assert_eq!(prop2_bound(&chain, &x, 0).unwrap(), 9.0);
        assert_eq!(prop2_bound(&chain, &x, 1).unwrap(), 4.0);
        let config = SmoothnessProbeConfig {
            n_inputs: 1,
            ..probe_config()
        };
        let b0 = estimate_beta_chain(&chain, 0, &x, &y, &config, 5).unwrap();
        let b1 = estimate_beta_chain(&chain, 1, &x, &y, &config, 5).unwrap();
        assert_relative_eq!(b0, 9.0, max_relative = 1e-9);
        assert_relative_eq!(b1, 4.0, max_relative = 1e-9);
    }

    #[test]
    fn single_layer_bound_is_input_norm_alone() {
        let chain = scalar_chain(&[0.7]);
        let x = Tensor::matrix(2, 1, vec![1.5, 0.5]).unwrap();
        assert_eq!(prop2_bound(&chain, &x, 0).unwrap(), mean_row_norm_sq(&x));
    }

    #[test]
    fn estimate_stays_under_bound_on_random_chains() {
        for seed in 0..6u64 {
            let family = ChainFamily { dim: 4, lambda: 1.3, seed };
            let chain = family.chain(3).unwrap();
            let root = Rng::from_seed(seed);
            let x = gaussian_matrix(&mut root.stream("probe-x"), 4, 4, 1.0);
            let y = gaussian_matrix(&mut root.stream("probe-y"), 4, 4, 1.0);
            let config = SmoothnessProbeConfig {
                n_inputs: 4,
                ..probe_config()
            };
            for i in 0..3 {
                let beta = estimate_beta_chain(&chain, i, &x, &y, &config, seed).unwrap();
                let bound = prop2_bound(&chain, &x, i).unwrap();
                assert!(
                    beta <= bound * (1.0 + 1e-3),
                    "seed {seed} layer {i}: {beta} vs {bound}"
                );
            }
        }
    }

    fn scalar_lora_model(bases: &[f64]) -> GatedLoraModel {
        let layers = vec![
            LayerSpec {
                d_in: 1,
                d_out: 1,
                rank: 1,
                activation: Activation::Identity,
            };
            bases.len()
        ];
        let weights = bases
            .iter()
            .map(|&w| Tensor::matrix(1, 1, vec![w]).unwrap())
            .collect();
        GatedLoraModel::new(layers, weights, None).unwrap()
    }

    #[test]
    fn lora_bound_with_dead_adapters_equals_plain_bound_bit_for_bit() {
        let model = scalar_lora_model(&[2.0, 3.0]);
        let gates = [1.0, 1.0];
        let x = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let chain = to_dense_chain(&model, &gates).unwrap();
        for i in 0..2 {
            let lb = lora_bound(&model, &gates, &x, i).unwrap();
            assert!(!lb.degenerate);
            assert_eq!(lb.value, prop2_bound(&chain, &x, i).unwrap());
        }
    }

    #[test]
    fn equal_delta_norm_quadruples_the_bound() {
        let mut model = scalar_lora_model(&[2.0, 3.0]);
        model
            .set_adapter(
                1,
                Tensor::matrix(1, 1, vec![1.0]).unwrap(),
                Tensor::matrix(1, 1, vec![3.0]).unwrap(),
            )
            .unwrap();
        let gates = [1.0, 1.0];
        let x = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let lb = lora_bound(&model, &gates, &x, 0).unwrap();
        assert!(!lb.degenerate);
        assert_eq!(lb.value, 4.0 * 9.0);
        // The probed layer's own adapter does not enter its bound.
        let lb1 = lora_bound(&model, &gates, &x, 1).unwrap();
        assert_eq!(lb1.value, 4.0);
    }

    #[test]
    fn zero_base_with_live_adapter_degenerates_to_effective_chain_bound() {
        let mut model = scalar_lora_model(&[2.0, 0.0]);
        model
            .set_adapter(
                1,
                Tensor::matrix(1, 1, vec![1.0]).unwrap(),
                Tensor::matrix(1, 1, vec![3.0]).unwrap(),
            )
            .unwrap();
        let gates = [1.0, 1.0];
        let x = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let lb = lora_bound(&model, &gates, &x, 0).unwrap();
        assert!(lb.degenerate);
        assert_eq!(lb.value, 9.0);
        // Gate 0 kills the delta, and with it the degeneracy.
        let lb_off = lora_bound(&model, &[1.0, 0.0], &x, 0).unwrap();
        assert!(!lb_off.degenerate);
        assert_eq!(lb_off.value, 0.0);
    }

    #[test]
    fn dropping_a_gated_layer_never_raises_the_bound() {
        let root = Rng::from_seed(42);
        let dims = [3usize, 3, 3, 3];
        let layers: Vec<LayerSpec> = dims
            .iter()
            .map(|&d| LayerSpec {
                d_in: d,
                d_out: d,
                rank: 2,
                activation: Activation::Identity,
            })
            .collect();
        let weights: Vec<Tensor> = (0..dims.len())
            .map(|j| gaussian_matrix(&mut root.stream_indexed("base", j as u64), 3, 3, 0.5))
            .collect();
        let mut model = GatedLoraModel::new(layers, weights, None).unwrap();
        for j in 0..dims.len() {
            let a = gaussian_matrix(&mut root.stream_indexed("a", j as u64), 2, 3, 0.4);
            let b = gaussian_matrix(&mut root.stream_indexed("b", j as u64), 3, 2, 0.4);
            model.set_adapter(j, a, b).unwrap();
        }
        let x = gaussian_matrix(&mut root.stream("x"), 4, 3, 1.0);
        let on = [1.0; 4];
        for j in 0..4 {
            let mut off = on;
            off[j] = 0.0;
            for i in 0..4 {
                if i == j {
                    continue;
                }
                let b_on = lora_bound(&model, &on, &x, i).unwrap().value;
                let b_off = lora_bound(&model, &off, &x, i).unwrap().value;
                assert!(
                    b_off <= b_on * (1.0 + 1e-12),
                    "dropping {j} raised bound at {i}: {b_off} > {b_on}"
                );
            }
        }
    }

    #[test]
    fn frozen_layer_drops_out_of_the_dense_view() {
        let mut model = scalar_lora_model(&[2.0, 3.0]);
        model
            .set_adapter(
                0,
                Tensor::matrix(1, 1, vec![1.0]).unwrap(),
                Tensor::matrix(1, 1, vec![5.0]).unwrap(),
            )
            .unwrap();
        crate::model::freeze_unselected(&mut model, &[1]).unwrap();
        let chain = to_dense_chain(&model, &[1.0, 1.0]).unwrap();
        assert_eq!(chain.weights[0].get(0, 0), 2.0);
    }

    #[test]
    fn gated_model_probe_is_deterministic_and_respects_freezing() {
        let mut model = scalar_lora_model(&[0.8, 1.1, 0.9]);
        for j in 0..3 {
            model
                .set_adapter(
                    j,
                    Tensor::matrix(1, 1, vec![0.3 + j as f64 * 0.1]).unwrap(),
                    Tensor::matrix(1, 1, vec![0.2]).unwrap(),
                )
                .unwrap();
        }
        let root = Rng::from_seed(9);
        let x = gaussian_matrix(&mut root.stream("x"), 4, 1, 1.0);
        let y = gaussian_matrix(&mut root.stream("y"), 4, 1, 1.0);
        let batch = Batch::new(x, Targets::Regression(y)).unwrap();
        let gates = [1.0, 1.0, 1.0];
        let config = SmoothnessProbeConfig {
            n_inputs: 3,
            ..probe_config()
        };
        let b1 = estimate_beta(&model, ProbeTarget::Layer(1), &gates, &batch, &config, 2).unwrap();
        let b2 = estimate_beta(&model, ProbeTarget::Layer(1), &gates, &batch, &config, 2).unwrap();
        assert!(b1.is_finite() && b1 > 0.0);
        assert_eq!(b1, b2);

        let all = estimate_beta(&model, ProbeTarget::Trainable, &gates, &batch, &config, 2).unwrap();
        assert!(all.is_finite() && all > 0.0);

        crate::model::freeze_unselected(&mut model, &[0, 2]).unwrap();
        let err = estimate_beta(&model, ProbeTarget::Layer(1), &gates, &batch, &config, 2);
        assert!(matches!(err, Err(Error::Invalid(_))));
    }

    fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        cov / var
    }

    #[test]
    fn depth_sweep_grows_at_twice_the_log_norm() {
        let family = ChainFamily { dim: 4, lambda: 1.5, seed: 17 };
        let depths = [1usize, 2, 3, 4, 5, 6];
        let config = SmoothnessProbeConfig {
            n_inputs: 3,
            n_directions: 3,
            ..SmoothnessProbeConfig::default()
        };
        let report = depth_sweep(&family, &depths, &config).unwrap();
        assert_eq!(report.mode, ProbeMode::DepthSweep);
        assert_eq!(report.rows.len(), 6);
        let xs: Vec<f64> = depths.iter().map(|&d| d as f64).collect();
        let ys: Vec<f64> = report.rows.iter().map(|r| r.beta_hat.ln()).collect();
        let slope = fit_slope(&xs, &ys);
        let want = 2.0 * 1.5f64.ln();
        assert!(
            (slope - want).abs() <= 0.02 * want,
            "slope {slope} vs {want}"
        );
        for r in &report.rows {
            assert!(r.ratio <= 1.0 + 1e-3, "depth {}: ratio {}", r.index, r.ratio);
        }
        // Consecutive-depth growth matches lambda^2 almost exactly because
        // the probe inputs and directions are shared across depths.
        for w in report.rows.windows(2) {
            assert!(w[1].beta_hat / w[0].beta_hat >= 1.5 * 1.5 * (1.0 - 0.05));
        }
        let worst = report.worst_rows.as_ref().unwrap();
        assert_eq!(worst.len(), 6);
        for (f, w) in report.rows.iter().zip(worst) {
            assert!(w.beta_hat >= f.beta_hat * (1.0 - 1e-12));
        }
        // Pure probes: a rerun reproduces the report bit for bit.
        assert_eq!(depth_sweep(&family, &depths, &config).unwrap(), report);
    }

    #[test]
    fn unit_norm_chain_is_flat_and_contracting_chain_decays() {
        let config = SmoothnessProbeConfig {
            n_inputs: 3,
            n_directions: 2,
            ..SmoothnessProbeConfig::default()
        };
        let flat = depth_sweep(&ChainFamily { dim: 3, lambda: 1.0, seed: 4 }, &[1, 3, 5], &config)
            .unwrap();
        let b0 = flat.rows[0].beta_hat;
        for r in &flat.rows {
            assert_relative_eq!(r.beta_hat, b0, max_relative = 1e-9);
            assert_relative_eq!(r.bound, flat.input_norm_sq, max_relative = 1e-8);
        }
        let shrink =
            depth_sweep(&ChainFamily { dim: 3, lambda: 0.5, seed: 4 }, &[1, 2, 3], &config)
                .unwrap();
        assert!(shrink.rows[1].beta_hat < shrink.rows[0].beta_hat);
        assert!(shrink.rows[2].beta_hat < shrink.rows[1].beta_hat);
    }

    #[test]
    fn per_layer_report_covers_every_layer_under_its_bound() {
        let mut model = scalar_lora_model(&[1.2, 0.9, 1.1]);
        model
            .set_adapter(
                1,
                Tensor::matrix(1, 1, vec![0.5]).unwrap(),
                Tensor::matrix(1, 1, vec![0.4]).unwrap(),
            )
            .unwrap();
        let gates = [1.0, 1.0, 1.0];
        let config = SmoothnessProbeConfig {
            n_inputs: 4,
            n_directions: 3,
            ..SmoothnessProbeConfig::default()
        };
        let report = per_layer_report(&model, &gates, &config, 31).unwrap();
        assert_eq!(report.mode, ProbeMode::PerLayer);
        assert_eq!(report.rows.len(), 3);
        for r in &report.rows {
            assert!(r.beta_hat.is_finite());
            assert!(r.beta_hat <= r.bound * (1.0 + 1e-3), "layer {}", r.index);
            assert!(!r.degenerate);
        }
        let again = per_layer_report(&model, &gates, &config, 31).unwrap();
        assert_eq!(again, report);
    }

    #[test]
    fn report_serializes_to_csv_and_json() {
        let report = BetaReport {
            mode: ProbeMode::PerLayer,
            input_norm_sq: 1.5,
            rows: vec![BetaRow {
                index: 0,
                beta_hat: 2.0,
                bound: 4.0,
                ratio: 0.5,
                degenerate: false,
            }],
            worst_rows: None,
        };
        let csv = report.to_csv_string();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "index,beta_hat,bound,ratio");
        assert_eq!(
            lines.next().unwrap(),
            "0,2.0000000000000000e0,4.0000000000000000e0,5.0000000000000000e-1"
        );
        let back = BetaReport::from_json(&report.to_json().unwrap()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn probe_config_defaults_and_validation() {
        let config: SmoothnessProbeConfig = toml::from_str("").unwrap();
        assert_eq!(config, SmoothnessProbeConfig::default());
        assert_eq!(config.epsilon, 1e-5);
        assert_eq!(config.n_inputs, 10);
        assert_eq!(config.n_directions, 8);
        assert_eq!(config.mode, ProbeMode::PerLayer);
        assert_eq!(config.perturbation, Perturbation::RandomDirections);
        assert_eq!(config.norm, NormKind::Spectral);

        assert!(toml::from_str::<SmoothnessProbeConfig>("epsilom = 1e-4").is_err());

        let bad = SmoothnessProbeConfig {
            epsilon: 0.0,
            ..SmoothnessProbeConfig::default()
        };
        match bad.validate() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "probe.epsilon"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn probing_more_inputs_than_rows_is_rejected() {
        let chain = scalar_chain(&[1.0]);
        let x = Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap();
        let y = Tensor::matrix(2, 1, vec![0.0, 0.0]).unwrap();
        let config = SmoothnessProbeConfig {
            n_inputs: 5,
            ..SmoothnessProbeConfig::default()
        };
        match estimate_beta_chain(&chain, 0, &x, &y, &config, 0) {
            Err(Error::BatchTooLarge { requested, available }) => {
                assert_eq!((requested, available), (5, 2));
            }
            other => panic!("expected BatchTooLarge, got {other:?}"),
        }
    }

    #[test]
    fn frobenius_norm_option_gives_a_looser_bound() {
        let root = Rng::from_seed(3);
        let w = gaussian_matrix(&mut root.stream("w"), 3, 3, 1.0);
        let spec = layer_norm(&w, NormKind::Spectral).unwrap();
        let frob = layer_norm(&w, NormKind::Frobenius).unwrap();
        assert!(spec <= frob * (1.0 + 1e-12));
    }
}
