//! Dense rank-1/rank-2 tensors over f64.
//!
//! This is the sole numeric carrier of the crate. Two invariants hold for
//! every value that leaves this module: the data length equals the product
//! of the shape, and every entry is finite. Reductions use a fixed
//! left-to-right summation order so results are bit-reproducible; golden
//! files depend on this.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn ensure_finite(data: &[f64], context: &str) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: context.to_string(),
        })
    }
}

impl Tensor {
    /// Rank-1 tensor from raw values.
    pub fn vector(data: Vec<f64>) -> Result<Tensor> {
        ensure_finite(&data, "vector")?;
        Ok(Tensor {
            shape: vec![data.len()],
            data,
        })
    }

    /// Rank-2 tensor from row-major values.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        if data.len() != rows * cols {
            return Err(Error::Invalid(format!(
                "matrix: {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        ensure_finite(&data, "matrix")?;
        Ok(Tensor {
            shape: vec![rows, cols],
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        assert!(
            shape.len() == 1 || shape.len() == 2,
            "tensor rank must be 1 or 2"
        );
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::Invalid("from_rows: no rows".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Invalid("from_rows: ragged rows".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count; a rank-1 tensor counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Column count; for rank-1 this is the length.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// Gather rows of a rank-2 tensor by index, in the order given.
    pub fn take_rows(&self, idx: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::Invalid("take_rows: rank-2 tensor required".into()));
        }
        let cols = self.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &r in idx {
            if r >= self.rows() {
                return Err(Error::Invalid(format!(
                    "take_rows: row {r} out of range for {} rows",
                    self.rows()
                )));
            }
            data.extend_from_slice(self.row(r));
        }
        Tensor::matrix(idx.len(), cols, data)
    }

    /// Reinterpret the data under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.data.len() || shape.is_empty() || shape.len() > 2
        {
            return Err(Error::Invalid(format!(
                "reshape: cannot view {:?} as {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn transpose(&self) -> Tensor {
        match self.shape.len() {
            1 => self.clone(),
            _ => {
                let (r, c) = (self.shape[0], self.shape[1]);
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = self.data[i * c + j];
                    }
                }
                Tensor {
                    shape: vec![c, r],
                    data: out,
                }
            }
        }
    }

    /// Matrix product. Each output entry accumulates over the inner
    /// dimension in ascending order starting from zero, matching the naive
    /// triple loop bit for bit.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        ensure_finite(&out, "matmul")?;
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        ensure_finite(&data, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data.iter().map(|&x| x * c).collect();
        ensure_finite(&data, "scale")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn tanh(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| x.tanh()).collect(),
        }
    }

    /// Rectifier; the subgradient at 0 is taken as 0.
    pub fn relu(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
        }
    }

    /// Left-to-right sum of all entries.
    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &x| acc + x)
    }

    /// Frobenius inner product, accumulated left to right.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "dot",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc, (&a, &b)| acc + a * b))
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &x| acc + x * x)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m: f64, &x| m.max(x.abs()))
    }

    /// FNV-1a over the raw bit patterns; used to detect mutation of weights
    /// that are contractually frozen.
    pub fn bits_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for d in &self.shape {
            for b in (*d as u64).to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        }
        for x in &self.data {
            for b in x.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }

    /// CSV encoding: one line per row-major row, 17 significant digits,
    /// enough to round-trip every f64 exactly.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        for r in 0..self.rows() {
            let row = self.row(r);
            for (j, x) in row.iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                out.push_str(&format!("{x:.16e}"));
            }
            out.push('\n');
        }
        out
    }

    /// Parse the CSV encoding back into a rank-2 tensor (reshape to recover
    /// rank-1 values).
    pub fn from_csv_str(s: &str) -> Result<Tensor> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in s.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut row = Vec::new();
            for field in line.split(',') {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::Invalid(format!("tensor csv: bad number `{field}` on line {}", lineno + 1))
                })?;
                row.push(v);
            }
            rows.push(row);
        }
        Tensor::from_rows(&rows)
    }
}

/// Mean over the batch of the half squared error. A rank-1 tensor is one
/// sample; rank-2 tensors are batches of row samples.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "mse_loss",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let batch = pred.rows() as f64;
    let total = pred
        .data()
        .iter()
        .zip(target.data())
        .fold(0.0, |acc, (&p, &t)| {
            let d = p - t;
            acc + d * d * 0.5
        });
    let loss = total / batch;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "mse_loss".into(),
        });
    }
    Ok(loss)
}

/// Gradient of [`mse_loss`] with respect to `pred`.
pub fn mse_loss_grad(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let diff = pred.sub(target)?;
    diff.scale(1.0 / pred.rows() as f64)
}

/// Mean negative log-softmax of the true class, computed with
/// max-subtraction for stability.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.rank() != 2 || logits.rows() != labels.len() {
        return Err(Error::Invalid(format!(
            "cross_entropy: logits {:?} vs {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let classes = logits.cols();
    let mut total = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange {
                label,
                classes,
                row: b,
            });
        }
        let row = logits.row(b);
        let m = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let log_sum = row.iter().fold(0.0, |acc, &x| acc + (x - m).exp()).ln();
        total += log_sum - (row[label] - m);
    }
    let loss = total / labels.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "cross_entropy".into(),
        });
    }
    Ok(loss)
}

/// Gradient of [`cross_entropy`] with respect to the logits:
/// (softmax - onehot) / batch.
pub fn cross_entropy_grad(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (batch, classes) = (logits.rows(), logits.cols());
    let mut data = Vec::with_capacity(batch * classes);
    for (b, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange {
                label,
                classes,
                row: b,
            });
        }
        let row = logits.row(b);
        let m = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let sum: f64 = row.iter().fold(0.0, |acc, &x| acc + (x - m).exp());
        for (c, &x) in row.iter().enumerate() {
            let p = (x - m).exp() / sum;
            let onehot = if c == label { 1.0 } else { 0.0 };
            data.push((p - onehot) / batch as f64);
        }
    }
    Tensor::matrix(batch, classes, data)
}

/// Compare an analytic gradient against central finite differences.
///
/// Returns the max over parameters of
/// `|analytic - numeric| / max(1, |analytic|)`. The function must be
/// twice continuously differentiable at `params`; callers keep relu away
/// from its kink.
pub fn grad_check<F>(mut f: F, params: &[f64], analytic: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::Invalid("grad_check: eps must be positive".into()));
    }
    if params.len() != analytic.len() {
        return Err(Error::Invalid(format!(
            "grad_check: {} params vs {} gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        work[i] = params[i] + eps;
        let up = f(&work)?;
        work[i] = params[i] - eps;
        let down = f(&work)?;
        work[i] = params[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite {
                context: format!("grad_check at parameter {i}"),
            });
        }
        let numeric = (up - down) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
