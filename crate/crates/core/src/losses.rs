//! Cross-entropy plus the two Gram-matrix regularizers that discourage
//! concept collapse.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Floor applied to the true-class probability before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Overall regularization weight.
    pub lambda1: f64,
    /// Share of the contrastive term; the diversity term gets `1 - lambda2`.
    pub lambda2: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(Error::Config(format!("lambda1 must be >= 0, got {}", self.lambda1)));
        }
        if !(0.0..=1.0).contains(&self.lambda2) {
            return Err(Error::Config(format!(
                "lambda2 must lie in [0, 1], got {}",
                self.lambda2
            )));
        }
        Ok(())
    }

    pub fn contrastive_weight(&self) -> f64 {
        self.lambda1 * self.lambda2
    }

    pub fn diversity_weight(&self) -> f64 {
        self.lambda1 * (1.0 - self.lambda2)
    }
}

/// Row-major dense matrix used for the regularizer inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }
}

/// `-ln(max(p[label], 1e-12))` for a probability vector.
pub fn classification_loss<T: Scalar>(probs: &[T], label: usize) -> Result<T> {
    let total: f64 = probs.iter().map(|p| p.as_f64()).sum();
    if (total - 1.0).abs() > 1e-4 || probs.iter().any(|p| !(p.as_f64() >= 0.0)) {
        return Err(Error::InvalidInput(format!(
            "prediction is not a probability vector (sum {total})"
        )));
    }
    let p = probs
        .get(label)
        .ok_or_else(|| Error::InvalidInput(format!("label {label} out of range for {} classes", probs.len())))?;
    Ok(T::of(floored_nll(p.as_f64())))
}

/// `-ln(max(p, 1e-12))`, keeping NaN so a diverged model is reported
/// instead of scored at the floor.
pub fn floored_nll(p: f64) -> f64 {
    if p.is_nan() {
        p
    } else {
        -p.max(PROB_FLOOR).ln()
    }
}

/// Same as [`classification_loss`] with a one-hot target.
pub fn classification_loss_one_hot<T: Scalar>(probs: &[T], one_hot: &[T]) -> Result<T> {
    let hot: Vec<usize> = one_hot
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != T::zero())
        .map(|(i, _)| i)
        .collect();
    if hot.len() != 1 || one_hot[hot[0]] != T::one() || one_hot.len() != probs.len() {
        return Err(Error::InvalidInput("target is not one-hot".into()));
    }
    classification_loss(probs, hot[0])
}

/// `||M M^T - I||_F` over the rows of an `rows x cols` matrix and its gradient.
pub fn row_gram_penalty<T: Scalar>(m: &[T], rows: usize, cols: usize) -> (T, Vec<T>) {
    let mut resid = vec![T::zero(); rows * rows];
    for i in 0..rows {
        let ri = &m[i * cols..(i + 1) * cols];
        for j in i..rows {
            let rj = &m[j * cols..(j + 1) * cols];
            let mut g = crate::scalar::dot(ri, rj);
            if i == j {
                g = g - T::one();
            }
            resid[i * rows + j] = g;
            resid[j * rows + i] = g;
        }
    }
    let norm = resid.iter().map(|&v| v * v).sum::<T>().sqrt();
    let mut grad = vec![T::zero(); rows * cols];
    if norm > T::zero() {
        let scale = T::of(2.0) / norm;
        for i in 0..rows {
            for j in 0..rows {
                let w = resid[i * rows + j] * scale;
                if w == T::zero() {
                    continue;
                }
                for c in 0..cols {
                    grad[i * cols + c] = grad[i * cols + c] + w * m[j * cols + c];
                }
            }
        }
    }
    (norm, grad)
}

/// `||M^T M - I||_F` over the columns of an `rows x cols` matrix and its gradient.
pub fn column_gram_penalty<T: Scalar>(m: &[T], rows: usize, cols: usize) -> (T, Vec<T>) {
    let mut t = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for c in 0..cols {
            t[c * rows + i] = m[i * cols + c];
        }
    }
    let (norm, gt) = row_gram_penalty(&t, cols, rows);
    let mut grad = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for c in 0..cols {
            grad[i * cols + c] = gt[c * rows + i];
        }
    }
    (norm, grad)
}

/// Sum over modalities of `||P_m P_m^T - I||_F`, where each `P_m` stacks
/// the `N` recalibration vectors as rows.
pub fn diversity_loss<T: Scalar>(p: &[Matrix<T>]) -> Result<T> {
    let mut total = T::zero();
    for m in p {
        if m.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite recalibration vectors".into()));
        }
        total = total + row_gram_penalty(&m.data, m.rows, m.cols).0;
    }
    Ok(total)
}

/// Sum over modalities of `||R_m^T R_m - I||_F` for batch matrices `B x d_m`.
pub fn contrastive_loss<T: Scalar>(r: &[Matrix<T>]) -> Result<T> {
    let mut total = T::zero();
    for m in r {
        if m.rows == 0 {
            return Err(Error::InvalidInput(
                "contrastive loss needs a batch of at least one".into(),
            ));
        }
        total = total + column_gram_penalty(&m.data, m.rows, m.cols).0;
    }
    Ok(total)
}

/// `L_cls + lambda1 (lambda2 L_cont + (1 - lambda2) L_div)`.
pub fn total_loss<T: Scalar>(cls: T, cont: T, div: T, cfg: &LossConfig) -> T {
    let l1 = T::of(cfg.lambda1);
    let l2 = T::of(cfg.lambda2);
    cls + l1 * (l2 * cont + (T::one() - l2) * div)
}
