//! Class-weighted losses and the combined training objective.
//!
//! The per-class weight is the inverse class proportion, `total / (C *
//! count_c)`, so the weight of an average sample is exactly 1. The cosine
//! term uses the positive convention `w * (1 - cos(y, p))`, which is zero at
//! a perfect prediction and positive otherwise, so minimizing increases
//! similarity.

use thiserror::Error;

use crate::ingest::Stage;
use crate::model::{NetForward, SequenceBatch};
use crate::tensor::ops::{pick_class, row_norm};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("class {0} has zero samples in the training set")]
    EmptyClass(String),
    #[error("probability vector has zero norm")]
    ZeroNormProbs,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Loss coefficients and class weights.
#[derive(Clone, Debug)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub lambda_t: f64,
    /// Per-stage weights, length C.
    pub class_weights: Vec<f64>,
    /// Steady/transition weights, length 2.
    pub transition_weights: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_c: 2.0,
            lambda_s: 2.0,
            lambda_t: 0.2,
            class_weights: vec![1.0; 5],
            transition_weights: vec![1.0; 2],
        }
    }
}

/// Inverse-proportion class weights: `w_c = total / (C * counts_c)`.
/// The expectation of `w` over samples is exactly 1.
pub fn class_weights(counts: &[usize]) -> Result<Vec<f64>> {
    let total: usize = counts.iter().sum();
    let c = counts.len();
    counts
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            if n == 0 {
                let name = Stage::from_index(i)
                    .map(|s| s.name().to_string())
                    .unwrap_or_else(|| format!("#{i}"));
                Err(TrainError::EmptyClass(name))
            } else {
                Ok(total as f64 / (c as f64 * n as f64))
            }
        })
        .collect()
}

fn weight_tensor(labels: &[usize], weights: &[f64]) -> Result<Tensor> {
    let w: Vec<f64> = labels
        .iter()
        .map(|&l| {
            weights.get(l).copied().ok_or_else(|| {
                TrainError::Config(format!("label {l} outside weight table of {}", weights.len()))
            })
        })
        .collect::<Result<_>>()?;
    Ok(Tensor::new(vec![labels.len()], w)?)
}

/// Batched class-weighted cross-entropy:
/// `mean_b( -w[y_b] * ln(max(p[b, y_b], 1e-12)) )`.
/// A zero probability at the true class is clamped, not an error.
pub fn wce_batch(probs: &Tensor, labels: &[usize], weights: &[f64]) -> Result<Tensor> {
    let picked = pick_class(probs, labels)?;
    let logp = picked.clamp_min(1e-12).ln();
    let w = weight_tensor(labels, weights)?;
    Ok(logp.mul(&w)?.mean_all().scale(-1.0))
}

/// Batched class-weighted cosine dissimilarity:
/// `mean_b( w[y_b] * (1 - p[b, y_b] / ||p_b||) )`.
pub fn wcs_batch(probs: &Tensor, labels: &[usize], weights: &[f64]) -> Result<Tensor> {
    {
        let shape = probs.shape();
        let c = shape[1];
        let data = probs.data();
        for b in 0..shape[0] {
            if data[b * c..(b + 1) * c].iter().all(|&v| v == 0.0) {
                return Err(TrainError::ZeroNormProbs);
            }
        }
    }
    let picked = pick_class(probs, labels)?;
    let norms = row_norm(probs)?;
    let cos = crate::tensor::ops::div(&picked, &norms)?;
    let w = weight_tensor(labels, weights)?;
    let ones = Tensor::full(vec![labels.len()], 1.0);
    Ok(ones.sub(&cos)?.mul(&w)?.mean_all())
}

fn one_hot_index(y: &[f64]) -> Result<usize> {
    let ones = y.iter().filter(|&&v| v == 1.0).count();
    let zeros = y.iter().filter(|&&v| v == 0.0).count();
    if ones != 1 || ones + zeros != y.len() {
        return Err(TrainError::Config(format!("not a one-hot vector: {y:?}")));
    }
    Ok(y.iter().position(|&v| v == 1.0).unwrap())
}

/// Single-example weighted cross-entropy on a probability row `[C]`.
pub fn wce(y_one_hot: &[f64], probs: &Tensor, weights: &[f64]) -> Result<Tensor> {
    let label = one_hot_index(y_one_hot)?;
    let p = crate::tensor::ops::reshape(probs, vec![1, probs.numel()])?;
    wce_batch(&p, &[label], weights)
}

/// Single-example weighted cosine dissimilarity.
pub fn wcs(y_one_hot: &[f64], probs: &Tensor, weights: &[f64]) -> Result<Tensor> {
    let label = one_hot_index(y_one_hot)?;
    let p = crate::tensor::ops::reshape(probs, vec![1, probs.numel()])?;
    wcs_batch(&p, &[label], weights)
}

/// Which auxiliary objectives participate in the total loss.
#[derive(Clone, Copy, Debug)]
pub struct AuxFlags {
    pub stage: bool,
    pub transition: bool,
}

impl Default for AuxFlags {
    fn default() -> Self {
        AuxFlags {
            stage: true,
            transition: true,
        }
    }
}

/// The combined objective plus detached component values.
pub struct LossOutput {
    /// Differentiable total.
    pub total: Tensor,
    pub loss_c: f64,
    pub loss_s: f64,
    pub loss_t: f64,
}

/// `L = L_c + lambda_s * L_s + lambda_t * L_t` where `L_c` averages
/// `WCE + lambda_c * WCS` over the sequence, `L_s` is the auxiliary head's
/// WCE over single epochs, and `L_t` the transition head's WCE. Disabled
/// auxiliary flags zero their component out of the objective entirely.
pub fn total_loss(
    out: &NetForward,
    batch: &SequenceBatch,
    weights: &LossWeights,
    flags: AuxFlags,
) -> Result<LossOutput> {
    let (s, n) = (batch.n_sequences, batch.seq_len);
    debug_assert_eq!(out.stage_probs.len(), n);

    let mut loss_c: Option<Tensor> = None;
    for (tau, probs) in out.stage_probs.iter().enumerate() {
        let labels: Vec<usize> = (0..s).map(|si| batch.stage_labels[si * n + tau]).collect();
        let ce = wce_batch(probs, &labels, &weights.class_weights)?;
        let cs = wcs_batch(probs, &labels, &weights.class_weights)?;
        let step = ce.add(&cs.scale(weights.lambda_c))?;
        loss_c = Some(match loss_c {
            Some(acc) => acc.add(&step)?,
            None => step,
        });
    }
    let loss_c = loss_c.expect("non-empty sequence").scale(1.0 / n as f64);

    let mut total = loss_c.clone();
    let mut loss_s_val = 0.0;
    if flags.stage {
        let loss_s = wce_batch(&out.confusion, &batch.stage_labels, &weights.class_weights)?;
        loss_s_val = loss_s.item();
        total = total.add(&loss_s.scale(weights.lambda_s))?;
    }
    let mut loss_t_val = 0.0;
    if flags.transition {
        let mut loss_t: Option<Tensor> = None;
        for (tau, probs) in out.transition_probs.iter().enumerate() {
            let labels: Vec<usize> = (0..s)
                .map(|si| batch.transition_labels[si * n + tau])
                .collect();
            let step = wce_batch(probs, &labels, &weights.transition_weights)?;
            loss_t = Some(match loss_t {
                Some(acc) => acc.add(&step)?,
                None => step,
            });
        }
        let loss_t = loss_t.expect("non-empty sequence").scale(1.0 / n as f64);
        loss_t_val = loss_t.item();
        total = total.add(&loss_t.scale(weights.lambda_t))?;
    }

    Ok(LossOutput {
        loss_c: loss_c.item(),
        loss_s: loss_s_val,
        loss_t: loss_t_val,
        total,
    })
}
