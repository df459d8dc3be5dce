//! Training objectives: softmax cross-entropy, the region-biased attention
//! hinge and the correlation hinge between region and aggregate confidences.
//!
//! Every loss comes with its gradient so the network can backpropagate
//! without an autodiff engine. Hinges take a zero subgradient at the kink.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum LossError {
    #[error("label {0} outside {1} classes")]
    LabelOutOfRange(usize, usize),
    #[error("batch of {0} logit rows but {1} labels")]
    BatchMismatch(usize, usize),
    #[error("empty batch")]
    EmptyBatch,
}

/// Margin and weights of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Required lead of the best crop's attention over the full face.
    pub beta: f64,
    /// Weight of the region-biased loss.
    pub lambda1: f64,
    /// Weight of the correlation loss.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 0.02,
            lambda1: 1.0,
            lambda2: 0.2,
        }
    }
}

/// `-log softmax(logits)[label]` and its gradient w.r.t. the logits.
pub fn cross_entropy_single(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>), LossError> {
    if label >= logits.len() {
        return Err(LossError::LabelOutOfRange(label, logits.len()));
    }
    let lse = math::log_sum_exp(logits);
    let loss = lse - logits[label];
    let mut grad: Vec<f64> = logits.iter().map(|&z| math::exp(z - lse)).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Mean cross-entropy over a batch.
pub fn cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64, LossError> {
    if logits.len() != labels.len() {
        return Err(LossError::BatchMismatch(logits.len(), labels.len()));
    }
    if logits.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let mut sum = 0.0;
    for (z, &y) in logits.iter().zip(labels) {
        sum += cross_entropy_single(z, y)?.0;
    }
    Ok(sum / labels.len() as f64)
}

/// `max(0, beta - (max_{k>=1} alpha_k - alpha_0))` and its gradient w.r.t. alpha.
pub fn rb_loss_with_grad(alpha: &[f64], beta: f64) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; alpha.len()];
    if alpha.len() < 2 {
        return (0.0, grad);
    }
    let (best, best_value) = alpha
        .iter()
        .enumerate()
        .skip(1)
        .fold((1, f64::NEG_INFINITY), |acc, (k, &a)| if a > acc.1 { (k, a) } else { acc });
    let slack = beta - (best_value - alpha[0]);
    if slack > 0.0 {
        grad[best] = -1.0;
        grad[0] = 1.0;
        (slack, grad)
    } else {
        (0.0, grad)
    }
}

pub fn rb_loss(alpha: &[f64], beta: f64) -> f64 {
    rb_loss_with_grad(alpha, beta).0
}

/// Gradients of [`cor_loss_with_grad`].
#[derive(Clone, Debug, PartialEq)]
pub struct CorGrad {
    pub region_logits: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

/// `sum_k max(0, log P_k(y) - log P_a(y))` where `P_k` is the softmax of
/// region `k`'s logits and `P_a` the softmax of the aggregate logits.
pub fn cor_loss_with_grad(region_logits: &[Vec<f64>], logits: &[f64], label: usize) -> Result<(f64, CorGrad), LossError> {
    if label >= logits.len() {
        return Err(LossError::LabelOutOfRange(label, logits.len()));
    }
    let log_pa = logits[label] - math::log_sum_exp(logits);
    let pa = math::softmax(logits);
    let mut grad = CorGrad {
        region_logits: region_logits.iter().map(|r| vec![0.0; r.len()]).collect(),
        logits: vec![0.0; logits.len()],
    };
    let mut loss = 0.0;
    for (k, region) in region_logits.iter().enumerate() {
        if label >= region.len() {
            return Err(LossError::LabelOutOfRange(label, region.len()));
        }
        let log_pk = region[label] - math::log_sum_exp(region);
        let gap = log_pk - log_pa;
        if gap > 0.0 {
            loss += gap;
            let pk = math::softmax(region);
            for (j, g) in grad.region_logits[k].iter_mut().enumerate() {
                *g = if j == label { 1.0 } else { 0.0 } - pk[j];
            }
            for (j, g) in grad.logits.iter_mut().enumerate() {
                *g -= if j == label { 1.0 } else { 0.0 } - pa[j];
            }
        }
    }
    Ok((loss, grad))
}

pub fn cor_loss(region_logits: &[Vec<f64>], logits: &[f64], label: usize) -> Result<f64, LossError> {
    Ok(cor_loss_with_grad(region_logits, logits, label)?.0)
}

/// The three loss terms of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub cls: f64,
    pub rb: f64,
    pub cor: f64,
}

impl LossComponents {
    pub fn is_finite(&self) -> bool {
        self.cls.is_finite() && self.rb.is_finite() && self.cor.is_finite()
    }
}

/// `L_cls + lambda1 * L_rb + lambda2 * L_cor`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    c.cls + w.lambda1 * c.rb + w.lambda2 * c.cor
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits() {
        let l = cross_entropy(&[vec![0.3; 5]], &[2]).unwrap();
        assert!((l - libm::log(5.0)).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits() {
        let l = cross_entropy(&[vec![0.0, 1000.0, 0.0, 0.0, 0.0]], &[1]).unwrap();
        assert!(l.abs() < 1e-12);
        let (far, _) = cross_entropy_single(&[0.0, 1000.0, 0.0, 0.0, 0.0], 0).unwrap();
        assert!((far - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn label_out_of_range() {
        assert_eq!(cross_entropy(&[vec![0.0; 5]], &[5]), Err(LossError::LabelOutOfRange(5, 5)));
        assert_eq!(cross_entropy(&[vec![0.0; 5]], &[]), Err(LossError::BatchMismatch(1, 0)));
    }

    #[test]
    fn rb_examples() {
        assert_eq!(rb_loss(&[0.3, 0.5, 0.2, 0.2, 0.2, 0.2], 0.02), 0.0);
        assert_eq!(rb_loss(&[0.4, 0.4, 0.1, 0.2, 0.3, 0.0], 0.02), 0.02);
        assert!((rb_loss(&[0.30, 0.31, 0.1, 0.1, 0.1, 0.1], 0.02) - 0.01).abs() < 1e-9);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        let c = LossComponents { cls: 1.0, rb: 0.02, cor: 0.1 };
        assert!((total_loss(&c, &w) - 1.04).abs() < 1e-12);
        assert_eq!(total_loss(&LossComponents::default(), &w), 0.0);
        let zero = LossWeights { lambda1: 0.0, lambda2: 0.0, ..w };
        assert_eq!(total_loss(&c, &zero), 1.0);
    }

    #[test]
    fn cor_zero_when_aggregate_dominates() {
        let logits = [3.0, 0.0, 0.0, 0.0, 0.0];
        let regions = vec![vec![1.0, 0.0, 0.0, 0.0, 0.0]; 6];
        assert_eq!(cor_loss(&regions, &logits, 0).unwrap(), 0.0);
        let same = vec![logits.to_vec(); 6];
        assert_eq!(cor_loss(&same, &logits, 0).unwrap(), 0.0);
    }
}
