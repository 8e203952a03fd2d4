use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Softmax cross-entropy against integer class labels.
    CrossEntropy,
    /// Mean squared error, averaged over the output elements of a sample.
    Mse,
    /// Huber loss with beta = 1, averaged over the output elements.
    SmoothL1,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Labels(Vec<usize>),
    /// Batched target values, same shape as the head output.
    Values(Tensor),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Labels(l) => l.len(),
            Targets::Values(t) => t.shape().first().copied().unwrap_or(0),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Labels(l) => Targets::Labels(idx.iter().map(|&i| l[i]).collect()),
            Targets::Values(t) => Targets::Values(select_rows(t, idx)),
        }
    }
}

pub(crate) fn select_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let per: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    let mut data = Vec::with_capacity(per * idx.len());
    for &i in idx {
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    Tensor::new(shape, data).expect("sized")
}

/// Loss of every sample, in `f64`.
pub fn per_sample_loss(kind: LossKind, output: &Tensor, targets: &Targets) -> Result<Vec<f64>> {
    let n = output.shape()[0];
    let per: usize = output.shape()[1..].iter().product();
    if targets.len() != n {
        return Err(Error::Dataset(format!("{} targets for a batch of {n}", targets.len())));
    }
    let rows = output.data().chunks(per);
    match (kind, targets) {
        (LossKind::CrossEntropy, Targets::Labels(labels)) => rows
            .zip(labels)
            .map(|(logits, &y)| {
                if y >= per {
                    return Err(Error::Dataset(format!("label {y} out of range for {per} classes")));
                }
                let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v)));
                let lse = max + logits.iter().map(|&v| (f64::from(v) - max).exp()).sum::<f64>().ln();
                Ok(lse - f64::from(logits[y]))
            })
            .collect(),
        (LossKind::Mse | LossKind::SmoothL1, Targets::Values(t)) => {
            if t.shape() != output.shape() {
                return Err(Error::Dataset(format!(
                    "target shape {:?} differs from output shape {:?}",
                    t.shape(),
                    output.shape()
                )));
            }
            Ok(rows
                .zip(t.data().chunks(per))
                .map(|(o, y)| {
                    let sum: f64 = o
                        .iter()
                        .zip(y)
                        .map(|(&a, &b)| {
                            let d = f64::from(a) - f64::from(b);
                            match kind {
                                LossKind::Mse => d * d,
                                _ if d.abs() < 1.0 => 0.5 * d * d,
                                _ => d.abs() - 0.5,
                            }
                        })
                        .sum();
                    sum / per as f64
                })
                .collect())
        }
        (kind, _) => Err(Error::Dataset(format!("targets do not match loss kind {kind:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_off_by_one_is_one() {
        let o = Tensor::new(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let t = Tensor::new(vec![2, 3], o.data().iter().map(|v| v + 1.0).collect()).unwrap();
        assert_eq!(per_sample_loss(LossKind::Mse, &o, &Targets::Values(t)).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn smooth_l1_branches() {
        let o = Tensor::new(vec![1, 2], vec![0.5, 3.0]).unwrap();
        let t = Tensor::zeros(vec![1, 2]);
        let l = per_sample_loss(LossKind::SmoothL1, &o, &Targets::Values(t)).unwrap();
        assert!((l[0] - (0.125 + 2.5) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let o = Tensor::zeros(vec![1, 4]);
        let l = per_sample_loss(LossKind::CrossEntropy, &o, &Targets::Labels(vec![2])).unwrap();
        assert!((l[0] - 4f64.ln()).abs() < 1e-12);
        assert!(per_sample_loss(LossKind::CrossEntropy, &o, &Targets::Labels(vec![4])).is_err());
    }
}
