//! Context encoder: a Bi-LSTM over the sequence of gated features with a
//! residual connection, a per-step transition head, and the final stage
//! head. Original and gated features are consumed together (concatenated
//! per step by default), projected to the LSTM width, and the projection
//! also feeds the residual around the Bi-LSTM.

use rand_chacha::ChaCha8Rng;

use crate::ingest::Stage;
use crate::tensor::adam::ModelParams;
use crate::tensor::lstm::{bilstm, LstmParams};
use crate::tensor::ops::{concat_last, dropout, softmax_last, Mode};
use crate::tensor::{Result, Tensor, TensorError};

use super::amf::Linear;
use super::{init, FeatureCombine, NetConfig};

pub struct CeModule {
    proj: Linear,
    lstm_fwd: LstmParams,
    lstm_bwd: LstmParams,
    transition_head: Linear,
    stage_head: Linear,
}

/// Per-step outputs over a sequence batch.
pub struct CeForward {
    /// Per step `[S, C]` stage probability rows.
    pub stage_probs: Vec<Tensor>,
    /// Per step `[S, 2]` transition probability rows.
    pub transition_probs: Vec<Tensor>,
    /// Per step `[S, 2H]` Bi-LSTM hidden states.
    pub hidden: Vec<Tensor>,
}

fn init_lstm(
    params: &mut ModelParams,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut ChaCha8Rng,
) -> LstmParams {
    let weight = params.register(
        &format!("{prefix}.weight"),
        init::fan_in_uniform(vec![4 * hidden, input + hidden], input + hidden, rng),
        true,
    );
    // forget-gate bias starts at +1 (gate order i, f, g, o)
    let mut bias = vec![0.0; 4 * hidden];
    bias[hidden..2 * hidden].fill(1.0);
    let bias = params.register(
        &format!("{prefix}.bias"),
        Tensor::new(vec![4 * hidden], bias).unwrap(),
        true,
    );
    LstmParams { weight, bias }
}

impl CeModule {
    pub(crate) fn init(params: &mut ModelParams, cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let feature = cfg.feature_dim();
        let proj_in = match cfg.combine {
            FeatureCombine::Concat => 2 * feature,
            FeatureCombine::Sum => feature,
        };
        let width = 2 * cfg.hidden;
        CeModule {
            proj: Linear::init(params, "ce.proj", width, proj_in, rng),
            lstm_fwd: init_lstm(params, "ce.lstm.fwd", width, cfg.hidden, rng),
            lstm_bwd: init_lstm(params, "ce.lstm.bwd", width, cfg.hidden, rng),
            transition_head: Linear::init(params, "ce.transition", 2, width, rng),
            stage_head: Linear::init(params, "ce.stage", cfg.classes, width, rng),
        }
    }

    /// `original` and `gated` hold one `[S, F]` tensor per sequence step.
    pub fn forward(
        &self,
        original: &[Tensor],
        gated: &[Tensor],
        cfg: &NetConfig,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<CeForward> {
        if original.len() != gated.len() {
            return Err(TensorError::Contract {
                op: "ce_forward",
                msg: format!(
                    "feature sequences differ in length: {} vs {}",
                    original.len(),
                    gated.len()
                ),
            });
        }
        if original.is_empty() {
            return Err(TensorError::Contract {
                op: "ce_forward",
                msg: "empty sequence".into(),
            });
        }

        let mut projected = Vec::with_capacity(original.len());
        for (f, ft) in original.iter().zip(gated) {
            let x = match cfg.combine {
                FeatureCombine::Concat => concat_last(&[f, ft])?,
                FeatureCombine::Sum => f.add(ft)?,
            };
            projected.push(self.proj.forward(&x)?);
        }
        let lstm_in: Vec<Tensor> = projected
            .iter()
            .map(|p| dropout(p, cfg.dropout, mode, rng))
            .collect::<Result<_>>()?;
        let hidden = bilstm(&lstm_in, &self.lstm_fwd, &self.lstm_bwd)?;

        let mut stage_probs = Vec::with_capacity(hidden.len());
        let mut transition_probs = Vec::with_capacity(hidden.len());
        for (h, p) in hidden.iter().zip(&projected) {
            transition_probs.push(softmax_last(&self.transition_head.forward(h)?)?);
            let res = dropout(&h.add(p)?, cfg.dropout, mode, rng)?;
            stage_probs.push(softmax_last(&self.stage_head.forward(&res)?)?);
        }
        Ok(CeForward {
            stage_probs,
            transition_probs,
            hidden,
        })
    }
}

/// Transition labels from a stage sequence: an epoch is non-transitioning
/// (0) only when its stage matches both neighbors; at the boundaries the
/// missing neighbor comparison is skipped.
pub fn derive_transition_labels(labels: &[Stage]) -> Result<Vec<u8>> {
    if labels.is_empty() {
        return Err(TensorError::Contract {
            op: "derive_transition_labels",
            msg: "empty sequence".into(),
        });
    }
    let n = labels.len();
    Ok((0..n)
        .map(|t| {
            let prev_differs = t > 0 && labels[t - 1] != labels[t];
            let next_differs = t + 1 < n && labels[t + 1] != labels[t];
            u8::from(prev_differs || next_differs)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Stage::*;

    #[test]
    fn steady_middle_epoch_is_zero() {
        assert_eq!(derive_transition_labels(&[N2, N2, N2]).unwrap(), [0, 0, 0]);
    }

    #[test]
    fn change_marks_neighboring_epochs() {
        assert_eq!(derive_transition_labels(&[N2, N3, N3]).unwrap(), [1, 1, 0]);
    }

    #[test]
    fn constant_sequence_is_all_zero() {
        assert_eq!(
            derive_transition_labels(&[Rem; 25]).unwrap(),
            vec![0u8; 25]
        );
    }

    #[test]
    fn empty_sequence_is_an_error() {
        assert!(derive_transition_labels(&[]).is_err());
    }

    #[test]
    fn single_epoch_has_no_transition() {
        assert_eq!(derive_transition_labels(&[W]).unwrap(), [0]);
    }
}
