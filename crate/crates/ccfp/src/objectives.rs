//! Training objectives: the Gram-matrix domain discrepancy, the semantic
//! consistency loss between the two streams, and the combined total.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};

/// Strengths of the discrepancy and semantic-consistency terms.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub lambda_dis: f64,
    pub lambda_sem: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_dis: 1.0, lambda_sem: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda_dis.is_finite() || self.lambda_dis < 0.0 {
            return Err(Error::config(format!("lambda_dis must be finite and >= 0, got {}", self.lambda_dis)));
        }
        if !self.lambda_sem.is_finite() || self.lambda_sem < 0.0 {
            return Err(Error::config(format!("lambda_sem must be finite and >= 0, got {}", self.lambda_sem)));
        }
        Ok(())
    }
}

/// Per-sample Gram matrix of the features, `[B,C,H,W] -> [B,C,C]`, normalized
/// by `C*H*W`.
pub fn gram_matrix<T: Real>(features: &Tensor<T>) -> Result<Tensor<T>> {
    features.gram()
}

/// Non-negative Gram discrepancy between the two streams' tap activations:
/// the batch mean of the per-sample sum over sites of the Frobenius distance
/// between Gram matrices. The signed training loss is the negation, applied
/// by the trainer.
pub fn discrepancy<T: Real>(taps_o: &[Tensor<T>], taps_p: &[Tensor<T>]) -> Result<Tensor<T>> {
    if taps_o.len() != taps_p.len() {
        return Err(Error::shape(format!(
            "discrepancy: {} original taps vs {} perturbed taps",
            taps_o.len(),
            taps_p.len()
        )));
    }
    if taps_o.is_empty() {
        return Err(Error::shape("discrepancy: no tap activations"));
    }
    let mut total: Option<Tensor<T>> = None;
    for (o, p) in taps_o.iter().zip(taps_p) {
        if o.shape() != p.shape() {
            return Err(Error::shape(format!(
                "discrepancy: tap shapes {:?} and {:?} differ",
                o.shape(),
                p.shape()
            )));
        }
        let diff = gram_matrix(o)?.sub(&gram_matrix(p)?)?;
        let per_sample = diff.batch_frobenius_norm()?.mean_all();
        total = Some(match total {
            Some(t) => t.add(&per_sample)?,
            None => per_sample,
        });
    }
    Ok(total.unwrap())
}

/// Which outputs the semantic-consistency loss compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemVariant {
    /// Final classifier predictions (default).
    Classifier,
    /// Pooled backbone features.
    Feature,
}

/// Batch-mean squared L2 distance between the two streams' outputs.
pub fn semantic_loss<T: Real>(out_o: &Tensor<T>, out_p: &Tensor<T>) -> Result<Tensor<T>> {
    if out_o.shape() != out_p.shape() {
        return Err(Error::shape(format!(
            "semantic_loss: shapes {:?} and {:?} differ",
            out_o.shape(),
            out_p.shape()
        )));
    }
    let batch = out_o.shape().first().copied().unwrap_or(1).max(1);
    let sq = out_o.l2_squared(out_p)?;
    Ok(sq.scale(T::from_f64(1.0 / batch as f64)))
}

/// `cls1 + cls2 + lambda_dis * (-d) + lambda_sem * sem`, reported for logging;
/// the trainer optimizes its stage-specific decomposition.
pub fn total_loss<T: Real>(
    cls1: &Tensor<T>,
    cls2: &Tensor<T>,
    d: &Tensor<T>,
    sem: &Tensor<T>,
    w: &LossWeights,
) -> Result<Tensor<T>> {
    w.validate()?;
    let dis_term = d.scale(T::from_f64(-w.lambda_dis));
    let sem_term = sem.scale(T::from_f64(w.lambda_sem));
    cls1.add(cls2)?.add(&dis_term)?.add(&sem_term)
}
