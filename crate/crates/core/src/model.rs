//! The gated low-rank-adapted chain model.
//!
//! A model is a stack of linear layers with frozen base weights W and a
//! trainable rank-r adapter (B, A) per layer. Layer i maps a batch Z
//! (rows are samples) to
//!
//! ```text
//! Z' = phi( Z W^T + gate_i * (Z A^T) B^T )
//! ```
//!
//! where `gate_i` comes from the softmax relaxation in [`crate::gating`].
//! An optional frozen linear head turns the last activation into class
//! logits. Base weights and the head never receive gradients; adapters do,
//! unless their layer is frozen. Backpropagation is written out by hand so
//! every reduction inherits the fixed summation order of
//! [`Tensor::matmul`].

use crate::error::{Error, Result};
use crate::gating::AlphaVector;
use crate::rng::Rng;
use crate::tensor::{
    cross_entropy, cross_entropy_grad, mse_loss, mse_loss_grad, Tensor,
};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(&self, u: &Tensor) -> Tensor {
        match self {
            Activation::Identity => u.clone(),
            Activation::Tanh => u.tanh(),
            Activation::Relu => u.relu(),
        }
    }

    /// phi'(u) recovered from z = phi(u). Works for all three variants:
    /// identity is 1, tanh' = 1 - z^2, and relu' is the indicator z > 0
    /// (the subgradient at the kink is taken as 0).
    pub(crate) fn derivative_from_output(&self, z: &Tensor) -> Tensor {
        let data: Vec<f64> = match self {
            Activation::Identity => vec![1.0; z.len()],
            Activation::Tanh => z.data().iter().map(|&v| 1.0 - v * v).collect(),
            Activation::Relu => z
                .data()
                .iter()
                .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
                .collect(),
        };
        Tensor::matrix(z.rows(), z.cols(), data).expect("derivative entries are finite")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    pub activation: Activation,
}

/// Low-rank adapter: the delta applied to a layer is B * A
/// (d_out x rank times rank x d_in).
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub a: Tensor,
    pub b: Tensor,
}

/// Per-layer adapter gradients plus the gradient of the loss with respect
/// to each relaxed gate value.
#[derive(Debug, Clone)]
pub struct GradBundle {
    pub adapters: Vec<Adapter>,
    pub gates: Vec<f64>,
}

/// Supervision for a batch: row-aligned regression targets or one class
/// label per row.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Regression(Tensor),
    Classes(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression(t) => t.rows(),
            Targets::Classes(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn take_rows(&self, idx: &[usize]) -> Result<Targets> {
        match self {
            Targets::Regression(t) => Ok(Targets::Regression(t.take_rows(idx)?)),
            Targets::Classes(l) => {
                let mut out = Vec::with_capacity(idx.len());
                for &i in idx {
                    let v = *l.get(i).ok_or_else(|| {
                        Error::Invalid(format!("take_rows: label {i} out of range"))
                    })?;
                    out.push(v);
                }
                Ok(Targets::Classes(out))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub targets: Targets,
}

impl Batch {
    pub fn new(inputs: Tensor, targets: Targets) -> Result<Batch> {
        if inputs.rows() != targets.len() {
            return Err(Error::Invalid(format!(
                "batch: {} input rows vs {} targets",
                inputs.rows(),
                targets.len()
            )));
        }
        Ok(Batch { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn take_rows(&self, idx: &[usize]) -> Result<Batch> {
        Ok(Batch {
            inputs: self.inputs.take_rows(idx)?,
            targets: self.targets.take_rows(idx)?,
        })
    }
}

struct Trace {
    /// zs[0] is the input; zs[i+1] the activation after layer i.
    zs: Vec<Tensor>,
    /// ps[i] = Z_i A_i^T, the rank-space projection.
    ps: Vec<Tensor>,
    /// qs[i] = ps[i] B_i^T, the ungated adapter contribution.
    qs: Vec<Tensor>,
    /// Head logits when a head is present.
    logits: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct GatedLoraModel {
    layers: Vec<LayerSpec>,
    base_weights: Vec<Tensor>,
    adapters: Vec<Adapter>,
    head: Option<Tensor>,
    frozen_mask: Vec<bool>,
}

impl GatedLoraModel {
    /// Build a model around frozen base weights. Adapters start at zero;
    /// call [`reinit_adapters`] to give A a random draw.
    pub fn new(
        layers: Vec<LayerSpec>,
        base_weights: Vec<Tensor>,
        head: Option<Tensor>,
    ) -> Result<GatedLoraModel> {
        if layers.is_empty() {
            return Err(Error::Invalid("model needs at least one layer".into()));
        }
        if base_weights.len() != layers.len() {
            return Err(Error::Invalid(format!(
                "{} base weights for {} layers",
                base_weights.len(),
                layers.len()
            )));
        }
        for (i, (spec, w)) in layers.iter().zip(&base_weights).enumerate() {
            if spec.rank == 0 {
                return Err(Error::Invalid(format!("layer {i}: rank must be at least 1")));
            }
            if w.shape() != [spec.d_out, spec.d_in] {
                return Err(Error::Invalid(format!(
                    "layer {i}: base weight shape {:?}, expected [{}, {}]",
                    w.shape(),
                    spec.d_out,
                    spec.d_in
                )));
            }
            if i > 0 && layers[i - 1].d_out != spec.d_in {
                return Err(Error::Invalid(format!(
                    "layer {i}: d_in {} does not match previous d_out {}",
                    spec.d_in,
                    layers[i - 1].d_out
                )));
            }
        }
        if let Some(h) = &head {
            let d_last = layers.last().unwrap().d_out;
            if h.rank() != 2 || h.cols() != d_last {
                return Err(Error::Invalid(format!(
                    "head shape {:?} does not map dimension {d_last}",
                    h.shape()
                )));
            }
        }
        let adapters = layers
            .iter()
            .map(|s| Adapter {
                a: Tensor::zeros(&[s.rank, s.d_in]),
                b: Tensor::zeros(&[s.d_out, s.rank]),
            })
            .collect();
        let n = layers.len();
        Ok(GatedLoraModel {
            layers,
            base_weights,
            adapters,
            head,
            frozen_mask: vec![false; n],
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn base_weight(&self, i: usize) -> &Tensor {
        &self.base_weights[i]
    }

    pub fn adapter(&self, i: usize) -> &Adapter {
        &self.adapters[i]
    }

    pub fn head(&self) -> Option<&Tensor> {
        self.head.as_ref()
    }

    pub fn frozen_mask(&self) -> &[bool] {
        &self.frozen_mask
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn output_dim(&self) -> usize {
        match &self.head {
            Some(h) => h.rows(),
            None => self.layers.last().unwrap().d_out,
        }
    }

    /// Replace one adapter. Shapes must match the layer spec.
    pub fn set_adapter(&mut self, i: usize, a: Tensor, b: Tensor) -> Result<()> {
        let spec = *self
            .layers
            .get(i)
            .ok_or(Error::LayerOutOfRange {
                index: i,
                layers: self.layers.len(),
            })?;
        if a.shape() != [spec.rank, spec.d_in] || b.shape() != [spec.d_out, spec.rank] {
            return Err(Error::Invalid(format!(
                "adapter {i}: shapes {:?}/{:?}, expected [{}, {}]/[{}, {}]",
                a.shape(),
                b.shape(),
                spec.rank,
                spec.d_in,
                spec.d_out,
                spec.rank
            )));
        }
        self.adapters[i] = Adapter { a, b };
        Ok(())
    }

    /// W_i + gate * B_i A_i, the linear map layer i actually applies.
    pub fn effective_weight(&self, i: usize, gate: f64) -> Result<Tensor> {
        let delta = self.adapters[i].b.matmul(&self.adapters[i].a)?;
        self.base_weights[i].add(&delta.scale(gate)?)
    }

    /// B_i A_i without the gate factor.
    pub fn delta_matrix(&self, i: usize) -> Result<Tensor> {
        self.adapters[i].b.matmul(&self.adapters[i].a)
    }

    /// Hash of everything contractually frozen: base weights and head.
    pub fn base_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for w in &self.base_weights {
            h ^= w.bits_hash();
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        if let Some(head) = &self.head {
            h ^= head.bits_hash();
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        h
    }

    /// A frozen layer's adapter drops out of the forward pass entirely, the
    /// discrete gate-zero semantics of deselection.
    pub fn effective_gate(&self, i: usize, gates: &[f64]) -> f64 {
        if self.frozen_mask[i] {
            0.0
        } else {
            gates[i]
        }
    }

    fn check_forward_input(&self, x: &Tensor, gates: &[f64]) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: x.shape().to_vec(),
                rhs: vec![x.rows(), self.input_dim()],
            });
        }
        if gates.len() != self.layers.len() {
            return Err(Error::Invalid(format!(
                "forward: {} gates for {} layers",
                gates.len(),
                self.layers.len()
            )));
        }
        Ok(())
    }

    fn forward_trace(&self, x: &Tensor, gates: &[f64]) -> Result<Trace> {
        self.check_forward_input(x, gates)?;
        let mut zs = Vec::with_capacity(self.layers.len() + 1);
        let mut ps = Vec::with_capacity(self.layers.len());
        let mut qs = Vec::with_capacity(self.layers.len());
        zs.push(x.clone());
        for (i, spec) in self.layers.iter().enumerate() {
            let gate = self.effective_gate(i, gates);
            let z = zs.last().unwrap();
            let p = z.matmul(&self.adapters[i].a.transpose())?;
            let q = p.matmul(&self.adapters[i].b.transpose())?;
            let u = z
                .matmul(&self.base_weights[i].transpose())?
                .add(&q.scale(gate)?)?;
            let z_next = spec.activation.apply(&u);
            ps.push(p);
            qs.push(q);
            zs.push(z_next);
        }
        let logits = match &self.head {
            Some(h) => Some(zs.last().unwrap().matmul(&h.transpose())?),
            None => None,
        };
        Ok(Trace { zs, ps, qs, logits })
    }

    /// Run the chain on a batch of row samples. Returns head logits when a
    /// head is present, otherwise the last layer's activation.
    pub fn forward(&self, x: &Tensor, gates: &[f64]) -> Result<Tensor> {
        let trace = self.forward_trace(x, gates)?;
        Ok(match trace.logits {
            Some(l) => l,
            None => trace.zs.into_iter().last().unwrap(),
        })
    }

    /// Loss on a batch without gradients.
    pub fn loss(&self, batch: &Batch, gates: &[f64]) -> Result<f64> {
        let out = self.forward(&batch.inputs, gates)?;
        match (&batch.targets, &self.head) {
            (Targets::Regression(y), None) => mse_loss(&out, y),
            (Targets::Classes(labels), Some(_)) => cross_entropy(&out, labels),
            (Targets::Regression(_), Some(_)) => Err(Error::Invalid(
                "regression targets on a model with a classification head".into(),
            )),
            (Targets::Classes(_), None) => {
                Err(Error::Invalid("class labels on a model without a head".into()))
            }
        }
    }

    /// Loss plus gradients for every adapter and every gate. Frozen layers
    /// report zero adapter gradients; gate gradients are always real since
    /// gate training is a separate decision from adapter training.
    pub fn loss_and_grads(&self, batch: &Batch, alpha: &AlphaVector) -> Result<(f64, GradBundle)> {
        if alpha.n() != self.layers.len() {
            return Err(Error::Invalid(format!(
                "{} gate logits for {} layers",
                alpha.n(),
                self.layers.len()
            )));
        }
        self.loss_and_grads_at(batch, &alpha.relaxed())
    }

    /// [`Self::loss_and_grads`] at explicit relaxed-gate values.
    pub fn loss_and_grads_at(&self, batch: &Batch, gates: &[f64]) -> Result<(f64, GradBundle)> {
        let trace = self.forward_trace(&batch.inputs, gates)?;
        let z_last = trace.zs.last().unwrap();

        let (loss, mut dz) = match (&batch.targets, &self.head) {
            (Targets::Regression(y), None) => (mse_loss(z_last, y)?, mse_loss_grad(z_last, y)?),
            (Targets::Classes(labels), Some(h)) => {
                let logits = trace.logits.as_ref().unwrap();
                let loss = cross_entropy(logits, labels)?;
                let dz = cross_entropy_grad(logits, labels)?.matmul(h)?;
                (loss, dz)
            }
            (Targets::Regression(_), Some(_)) => {
                return Err(Error::Invalid(
                    "regression targets on a model with a classification head".into(),
                ))
            }
            (Targets::Classes(_), None) => {
                return Err(Error::Invalid("class labels on a model without a head".into()))
            }
        };

        let n = self.layers.len();
        let mut grads: Vec<Option<Adapter>> = (0..n).map(|_| None).collect();
        let mut gate_grads = vec![0.0; n];
        for i in (0..n).rev() {
            let phi_prime = self.layers[i]
                .activation
                .derivative_from_output(&trace.zs[i + 1]);
            let du = dz.hadamard(&phi_prime)?;
            gate_grads[i] = du.dot(&trace.qs[i])?;
            let gate = self.effective_gate(i, gates);
            let dp = du.matmul(&self.adapters[i].b)?.scale(gate)?;
            if self.frozen_mask[i] {
                grads[i] = Some(Adapter {
                    a: Tensor::zeros(self.adapters[i].a.shape()),
                    b: Tensor::zeros(self.adapters[i].b.shape()),
                });
            } else {
                let db = du.transpose().matmul(&trace.ps[i])?.scale(gate)?;
                let da = dp.transpose().matmul(&trace.zs[i])?;
                grads[i] = Some(Adapter { a: da, b: db });
            }
            if i > 0 {
                dz = du.matmul(&self.base_weights[i])?.add(&dp.matmul(&self.adapters[i].a)?)?;
            }
        }
        Ok((
            loss,
            GradBundle {
                adapters: grads.into_iter().map(|g| g.unwrap()).collect(),
                gates: gate_grads,
            },
        ))
    }

    /// One SGD step on the unfrozen adapters. Base weights, the head, and
    /// frozen adapters are untouched.
    pub fn apply_sgd(&mut self, grads: &GradBundle, eta: f64) -> Result<()> {
        if grads.adapters.len() != self.layers.len() {
            return Err(Error::Invalid(format!(
                "{} gradients for {} layers",
                grads.adapters.len(),
                self.layers.len()
            )));
        }
        for i in 0..self.layers.len() {
            if self.frozen_mask[i] {
                continue;
            }
            let g = &grads.adapters[i];
            self.adapters[i].a = self.adapters[i].a.sub(&g.a.scale(eta)?)?;
            self.adapters[i].b = self.adapters[i].b.sub(&g.b.scale(eta)?)?;
        }
        Ok(())
    }

    /// Concatenated trainable parameters: for each unfrozen layer in
    /// ascending order, A's entries then B's.
    pub fn flatten_trainable(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (i, ad) in self.adapters.iter().enumerate() {
            if self.frozen_mask[i] {
                continue;
            }
            out.extend_from_slice(ad.a.data());
            out.extend_from_slice(ad.b.data());
        }
        out
    }

    /// Inverse of [`flatten_trainable`].
    pub fn set_trainable(&mut self, params: &[f64]) -> Result<()> {
        let mut offset = 0;
        for i in 0..self.layers.len() {
            if self.frozen_mask[i] {
                continue;
            }
            let (ra, ca) = (self.adapters[i].a.rows(), self.adapters[i].a.cols());
            let (rb, cb) = (self.adapters[i].b.rows(), self.adapters[i].b.cols());
            let need = ra * ca + rb * cb;
            if offset + need > params.len() {
                return Err(Error::Invalid(format!(
                    "set_trainable: {} parameters is too few",
                    params.len()
                )));
            }
            let a = Tensor::matrix(ra, ca, params[offset..offset + ra * ca].to_vec())?;
            let b = Tensor::matrix(rb, cb, params[offset + ra * ca..offset + need].to_vec())?;
            self.adapters[i] = Adapter { a, b };
            offset += need;
        }
        if offset != params.len() {
            return Err(Error::Invalid(format!(
                "set_trainable: {} parameters, expected {offset}",
                params.len()
            )));
        }
        Ok(())
    }

    /// Number of trainable scalars: sum of rank * (d_in + d_out) over
    /// unfrozen layers.
    pub fn trainable_param_count(&self) -> usize {
        self.layers
            .iter()
            .zip(&self.frozen_mask)
            .filter(|(_, &frozen)| !frozen)
            .map(|(s, _)| s.rank * (s.d_in + s.d_out))
            .sum()
    }

}

/// Redraw the adapters of the named layers: A gets independent normal
/// entries with variance 1/d_in (fan-in scaled, so the read A x starts at
/// unit scale no matter how wide the layer's input is), B starts at zero
/// so the delta is zero and the first forward pass matches the base model
/// exactly.
///
/// Each layer draws from its own stream keyed by the layer index, so a
/// layer's initialization is identical whether it is reinitialized alone or
/// as part of any subset.
pub fn reinit_adapters(model: &mut GatedLoraModel, layers: &[usize], seed: u64) -> Result<()> {
    let root = Rng::from_seed(seed);
    for &i in layers {
        if i >= model.layers.len() {
            return Err(Error::LayerOutOfRange {
                index: i,
                layers: model.layers.len(),
            });
        }
        let spec = model.layers[i];
        let mut rng = root.stream_indexed("init", i as u64);
        let std = 1.0 / (spec.d_in as f64).sqrt();
        let a_data: Vec<f64> = (0..spec.rank * spec.d_in)
            .map(|_| rng.next_normal() * std)
            .collect();
        model.adapters[i] = Adapter {
            a: Tensor::matrix(spec.rank, spec.d_in, a_data)?,
            b: Tensor::zeros(&[spec.d_out, spec.rank]),
        };
    }
    Ok(())
}

/// Freeze every adapter whose layer is not in `selected`.
pub fn freeze_unselected(model: &mut GatedLoraModel, selected: &[usize]) -> Result<()> {
    for &i in selected {
        if i >= model.layers.len() {
            return Err(Error::LayerOutOfRange {
                index: i,
                layers: model.layers.len(),
            });
        }
    }
    for i in 0..model.layers.len() {
        model.frozen_mask[i] = !selected.contains(&i);
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    layers: Vec<LayerSpec>,
    rank: usize,
    seed: u64,
    frozen_mask: Vec<bool>,
}

/// Write the model to a directory: a JSON manifest plus one CSV file per
/// tensor. The seed is recorded for provenance only.
pub fn save_checkpoint(model: &GatedLoraModel, dir: &Path, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let manifest = Manifest {
        layers: model.layers.clone(),
        rank: model.layers[0].rank,
        seed,
        frozen_mask: model.frozen_mask.clone(),
    };
    let write = |name: &str, contents: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, contents)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    };
    write(
        "manifest.json",
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    for i in 0..model.layers.len() {
        write(&format!("base_{i}.csv"), model.base_weights[i].to_csv_string())?;
        write(&format!("adapter_a_{i}.csv"), model.adapters[i].a.to_csv_string())?;
        write(&format!("adapter_b_{i}.csv"), model.adapters[i].b.to_csv_string())?;
    }
    if let Some(h) = &model.head {
        write("head.csv", h.to_csv_string())?;
    }
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`]. Returns the model and
/// the recorded seed.
pub fn load_checkpoint(dir: &Path) -> Result<(GatedLoraModel, u64)> {
    let read = |name: &str| -> Result<String> {
        let path = dir.join(name);
        std::fs::read_to_string(&path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))
    };
    let read_tensor = |name: &str, shape: [usize; 2]| -> Result<Tensor> {
        let t = Tensor::from_csv_str(&read(name)?).map_err(|e| Error::MalformedData {
            path: dir.join(name).display().to_string(),
            detail: e.to_string(),
        })?;
        t.reshape(&shape).map_err(|_| Error::MalformedData {
            path: dir.join(name).display().to_string(),
            detail: format!("shape {:?} does not reshape to {shape:?}", t.shape()),
        })
    };
    let manifest: Manifest =
        serde_json::from_str(&read("manifest.json")?).map_err(|e| Error::MalformedData {
            path: dir.join("manifest.json").display().to_string(),
            detail: e.to_string(),
        })?;
    let mut base_weights = Vec::new();
    let mut adapters = Vec::new();
    for (i, spec) in manifest.layers.iter().enumerate() {
        base_weights.push(read_tensor(&format!("base_{i}.csv"), [spec.d_out, spec.d_in])?);
        adapters.push(Adapter {
            a: read_tensor(&format!("adapter_a_{i}.csv"), [spec.rank, spec.d_in])?,
            b: read_tensor(&format!("adapter_b_{i}.csv"), [spec.d_out, spec.rank])?,
        });
    }
    let head = if dir.join("head.csv").exists() {
        let s = read("head.csv")?;
        let t = Tensor::from_csv_str(&s).map_err(|e| Error::MalformedData {
            path: dir.join("head.csv").display().to_string(),
            detail: e.to_string(),
        })?;
        Some(t)
    } else {
        None
    };
    let mut model = GatedLoraModel::new(manifest.layers, base_weights, head)?;
    if manifest.frozen_mask.len() != model.layers.len() {
        return Err(Error::MalformedData {
            path: dir.join("manifest.json").display().to_string(),
            detail: "frozen_mask length does not match layers".into(),
        });
    }
    for (i, ad) in adapters.into_iter().enumerate() {
        model.set_adapter(i, ad.a, ad.b)?;
    }
    model.frozen_mask = manifest.frozen_mask;
    Ok((model, manifest.seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_spec(n: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec {
                d_in: 1,
                d_out: 1,
                rank: 1,
                activation: Activation::Identity,
            };
            n
        ]
    }

    fn scalar_tensor(v: f64) -> Tensor {
        Tensor::matrix(1, 1, vec![v]).unwrap()
    }

    fn small_model(activation: Activation, head: bool) -> GatedLoraModel {
        let dims = [4usize, 3, 3, 2];
        let layers: Vec<LayerSpec> = (0..3)
            .map(|i| LayerSpec {
                d_in: dims[i],
                d_out: dims[i + 1],
                rank: 2,
                activation,
            })
            .collect();
        let mut rng = Rng::from_seed(7);
        let base: Vec<Tensor> = layers
            .iter()
            .map(|s| {
                Tensor::matrix(
                    s.d_out,
                    s.d_in,
                    (0..s.d_out * s.d_in).map(|_| rng.next_normal() * 0.5).collect(),
                )
                .unwrap()
            })
            .collect();
        let head_t = head.then(|| {
            Tensor::matrix(3, 2, (0..6).map(|_| rng.next_normal() * 0.5).collect()).unwrap()
        });
        let mut model = GatedLoraModel::new(layers.clone(), base, head_t).unwrap();
        // both factors nonzero so every gradient path is exercised
        for (i, s) in layers.iter().enumerate() {
            let a = Tensor::matrix(
                s.rank,
                s.d_in,
                (0..s.rank * s.d_in).map(|_| rng.next_normal() * 0.3).collect(),
            )
            .unwrap();
            let b = Tensor::matrix(
                s.d_out,
                s.rank,
                (0..s.d_out * s.rank).map(|_| rng.next_normal() * 0.3).collect(),
            )
            .unwrap();
            model.set_adapter(i, a, b).unwrap();
        }
        model
    }

    fn regression_batch(model: &GatedLoraModel, rows: usize, seed: u64) -> Batch {
        let mut rng = Rng::from_seed(seed);
        let x = Tensor::matrix(
            rows,
            model.input_dim(),
            (0..rows * model.input_dim()).map(|_| rng.next_normal()).collect(),
        )
        .unwrap();
        let y = Tensor::matrix(
            rows,
            model.output_dim(),
            (0..rows * model.output_dim()).map(|_| rng.next_normal()).collect(),
        )
        .unwrap();
        Batch::new(x, Targets::Regression(y)).unwrap()
    }

    #[test]
    fn scalar_chain_forward_oracle() {
        // W = 2, 3 with unit adapters and unit gates: (2+1)*(3+1) = 12
        let mut model = GatedLoraModel::new(
            scalar_spec(2),
            vec![scalar_tensor(2.0), scalar_tensor(3.0)],
            None,
        )
        .unwrap();
        for i in 0..2 {
            model.set_adapter(i, scalar_tensor(1.0), scalar_tensor(1.0)).unwrap();
        }
        let out = model.forward(&scalar_tensor(1.0), &[1.0, 1.0]).unwrap();
        assert_eq!(out.data(), &[12.0]);
    }

    #[test]
    fn depth_one_loss_and_gate_grad_oracle() {
        // W = 0, B = A = 1, gate = 1, x = 1, y = 0:
        // prediction 1, loss 1/2, dL/dgate = 1
        let mut model =
            GatedLoraModel::new(scalar_spec(1), vec![scalar_tensor(0.0)], None).unwrap();
        model.set_adapter(0, scalar_tensor(1.0), scalar_tensor(1.0)).unwrap();
        let batch = Batch::new(scalar_tensor(1.0), Targets::Regression(scalar_tensor(0.0))).unwrap();
        let alpha = AlphaVector::zeros(1).unwrap();
        let (loss, grads) = model.loss_and_grads(&batch, &alpha).unwrap();
        assert_eq!(loss, 0.5);
        assert_eq!(grads.gates, vec![1.0]);
    }

    #[test]
    fn zero_delta_matches_base_chain() {
        let mut model = small_model(Activation::Tanh, false);
        reinit_adapters(&mut model, &[0, 1, 2], 11).unwrap();
        let batch = regression_batch(&model, 5, 3);
        let gated = model.forward(&batch.inputs, &[1.3, 0.7, 1.0]).unwrap();
        // manual base-only chain
        let mut z = batch.inputs.clone();
        for i in 0..3 {
            z = z.matmul(&model.base_weight(i).transpose()).unwrap().tanh();
        }
        assert_eq!(gated, z);
    }

    #[test]
    fn zero_gate_disables_adapter() {
        let model = small_model(Activation::Tanh, false);
        let mut stripped = model.clone();
        let spec = stripped.layers()[1];
        stripped
            .set_adapter(
                1,
                Tensor::zeros(&[spec.rank, spec.d_in]),
                Tensor::zeros(&[spec.d_out, spec.rank]),
            )
            .unwrap();
        let batch = regression_batch(&model, 4, 5);
        let a = model.forward(&batch.inputs, &[1.0, 0.0, 1.0]).unwrap();
        let b = stripped.forward(&batch.inputs, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(a, b);
    }

    fn adapter_grad_check(activation: Activation, head: bool, seed: u64) -> f64 {
        let model = small_model(activation, head);
        let batch = if head {
            let mut rng = Rng::from_seed(seed);
            let x = Tensor::matrix(
                6,
                model.input_dim(),
                (0..6 * model.input_dim()).map(|_| rng.next_normal()).collect(),
            )
            .unwrap();
            let labels: Vec<usize> = (0..6).map(|_| rng.next_below(3) as usize).collect();
            Batch::new(x, Targets::Classes(labels)).unwrap()
        } else {
            regression_batch(&model, 6, seed)
        };
        let alpha = AlphaVector::from_raw(vec![0.2, -0.4, 0.1]).unwrap();
        let (_, grads) = model.loss_and_grads(&batch, &alpha).unwrap();
        let mut flat_grads = Vec::new();
        for g in &grads.adapters {
            flat_grads.extend_from_slice(g.a.data());
            flat_grads.extend_from_slice(g.b.data());
        }
        let params = model.flatten_trainable();
        let f = |p: &[f64]| {
            let mut m = model.clone();
            m.set_trainable(p)?;
            m.loss(&batch, &alpha.relaxed())
        };
        crate::tensor::grad_check(f, &params, &flat_grads, 1e-5).unwrap()
    }

    #[test]
    fn adapter_grads_match_finite_differences_tanh() {
        let err = adapter_grad_check(Activation::Tanh, false, 21);
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn adapter_grads_match_finite_differences_identity() {
        let err = adapter_grad_check(Activation::Identity, false, 22);
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn adapter_grads_match_finite_differences_classification() {
        let err = adapter_grad_check(Activation::Tanh, true, 23);
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn gate_grads_match_finite_differences() {
        let model = small_model(Activation::Tanh, false);
        let batch = regression_batch(&model, 6, 31);
        let alpha = AlphaVector::from_raw(vec![0.3, -0.2, 0.5]).unwrap();
        let gates = alpha.relaxed();
        let (_, grads) = model.loss_and_grads(&batch, &alpha).unwrap();
        let eps = 1e-6;
        for i in 0..3 {
            let mut up = gates.clone();
            let mut down = gates.clone();
            up[i] += eps;
            down[i] -= eps;
            let numeric =
                (model.loss(&batch, &up).unwrap() - model.loss(&batch, &down).unwrap()) / (2.0 * eps);
            assert!(
                (grads.gates[i] - numeric).abs() < 1e-6,
                "gate {i}: {} vs {numeric}",
                grads.gates[i]
            );
        }
    }

    #[test]
    fn frozen_layers_do_not_move() {
        let mut model = small_model(Activation::Tanh, false);
        freeze_unselected(&mut model, &[1]).unwrap();
        assert_eq!(model.frozen_mask(), &[true, false, true]);
        let before_0 = model.adapter(0).clone();
        let before_2 = model.adapter(2).clone();
        let checksum = model.base_checksum();
        let batch = regression_batch(&model, 4, 41);
        let alpha = AlphaVector::zeros(3).unwrap();
        let (_, grads) = model.loss_and_grads(&batch, &alpha).unwrap();
        assert_eq!(grads.adapters[0].a.max_abs(), 0.0);
        assert_eq!(grads.adapters[2].b.max_abs(), 0.0);
        assert!(grads.adapters[1].a.max_abs() > 0.0);
        model.apply_sgd(&grads, 0.1).unwrap();
        assert_eq!(model.adapter(0), &before_0);
        assert_eq!(model.adapter(2), &before_2);
        assert_eq!(model.base_checksum(), checksum);
    }

    #[test]
    fn frozen_adapters_drop_out_of_the_forward_pass() {
        let model = small_model(Activation::Tanh, false);
        let batch = regression_batch(&model, 4, 55);

        let mut none_selected = model.clone();
        freeze_unselected(&mut none_selected, &[]).unwrap();
        let frozen_out = none_selected.forward(&batch.inputs, &[1.0; 3]).unwrap();
        let mut z = batch.inputs.clone();
        for i in 0..3 {
            z = z.matmul(&model.base_weight(i).transpose()).unwrap().tanh();
        }
        assert_eq!(frozen_out, z, "fully frozen model must equal the base chain");

        let mut partial = model.clone();
        freeze_unselected(&mut partial, &[1]).unwrap();
        let a = partial.forward(&batch.inputs, &[0.9, 1.2, 1.1]).unwrap();
        let b = model.forward(&batch.inputs, &[0.0, 1.2, 0.0]).unwrap();
        assert_eq!(a, b, "freezing must match explicit zero gates");
    }

    #[test]
    fn trainable_param_count_closed_form() {
        let mut model = small_model(Activation::Tanh, false);
        // layers: 2*(4+3) + 2*(3+3) + 2*(3+2) = 14 + 12 + 10
        assert_eq!(model.trainable_param_count(), 36);
        freeze_unselected(&mut model, &[0, 2]).unwrap();
        assert_eq!(model.trainable_param_count(), 24);
        assert_eq!(model.flatten_trainable().len(), 24);
    }

    #[test]
    fn flatten_set_round_trip() {
        let mut model = small_model(Activation::Tanh, false);
        let flat = model.flatten_trainable();
        let mut other = small_model(Activation::Identity, false);
        other.set_trainable(&flat).unwrap();
        for i in 0..3 {
            assert_eq!(model.adapter(i), other.adapter(i));
        }
        assert!(model.set_trainable(&flat[1..]).is_err());
    }

    #[test]
    fn reinit_is_per_layer_deterministic() {
        let mut all = small_model(Activation::Tanh, false);
        let mut one = small_model(Activation::Tanh, false);
        reinit_adapters(&mut all, &[0, 1, 2], 99).unwrap();
        reinit_adapters(&mut one, &[1], 99).unwrap();
        assert_eq!(all.adapter(1), one.adapter(1));
        assert_eq!(all.adapter(1).b.max_abs(), 0.0);
        assert!(all.adapter(1).a.max_abs() > 0.0);
    }

    #[test]
    fn reinit_variance_scales_with_rank() {
        let layers = vec![LayerSpec {
            d_in: 400,
            d_out: 4,
            rank: 4,
            activation: Activation::Identity,
        }];
        let base = vec![Tensor::zeros(&[4, 400])];
        let mut model = GatedLoraModel::new(layers, base, None).unwrap();
        reinit_adapters(&mut model, &[0], 5).unwrap();
        let a = &model.adapter(0).a;
        let var = a.norm_sq() / a.len() as f64;
        assert!((var - 0.25).abs() < 0.05, "sample variance {var}");
    }

    #[test]
    fn freeze_rejects_bad_index() {
        let mut model = small_model(Activation::Tanh, false);
        assert!(matches!(
            freeze_unselected(&mut model, &[3]),
            Err(Error::LayerOutOfRange { index: 3, layers: 3 })
        ));
    }

    #[test]
    fn constructor_rejects_mismatched_chain() {
        let layers = vec![
            LayerSpec { d_in: 2, d_out: 3, rank: 1, activation: Activation::Identity },
            LayerSpec { d_in: 4, d_out: 2, rank: 1, activation: Activation::Identity },
        ];
        let base = vec![Tensor::zeros(&[3, 2]), Tensor::zeros(&[2, 4])];
        assert!(GatedLoraModel::new(layers, base, None).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        for head in [false, true] {
            let mut model = small_model(Activation::Tanh, head);
            freeze_unselected(&mut model, &[0, 2]).unwrap();
            save_checkpoint(&model, dir.path(), 1234).unwrap();
            let (loaded, seed) = load_checkpoint(dir.path()).unwrap();
            assert_eq!(seed, 1234);
            assert_eq!(loaded.frozen_mask(), model.frozen_mask());
            assert_eq!(loaded.layers(), model.layers());
            let batch = regression_batch(&model, 3, 77);
            let a = model.forward(&batch.inputs, &[1.0, 1.0, 1.0]).unwrap();
            let b = loaded.forward(&batch.inputs, &[1.0, 1.0, 1.0]).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            // remove head.csv between iterations so the headless case stays headless
            let _ = std::fs::remove_file(dir.path().join("head.csv"));
        }
    }

    #[test]
    fn effective_weight_combines_base_and_delta() {
        let mut model =
            GatedLoraModel::new(scalar_spec(1), vec![scalar_tensor(2.0)], None).unwrap();
        model.set_adapter(0, scalar_tensor(3.0), scalar_tensor(4.0)).unwrap();
        let e = model.effective_weight(0, 0.5).unwrap();
        assert_eq!(e.data(), &[2.0 + 0.5 * 12.0]);
    }
}
