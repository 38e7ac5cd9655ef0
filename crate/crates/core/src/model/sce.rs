//! Stage-confusion estimator: squeeze the epoch feature into class
//! probabilities through the auxiliary head `g`, excite them back to feature
//! width through `q`, and gate the feature elementwise. The gated feature
//! carries both the waveform content and the head's confusion pattern.

use rand_chacha::ChaCha8Rng;

use crate::tensor::adam::ModelParams;
use crate::tensor::ops::softmax_last;
use crate::tensor::{Result, Tensor};

use super::amf::Linear;

pub struct SceModule {
    g: Linear,
    q: Linear,
}

/// All three SCE products for one batch of epoch features.
pub struct SceForward {
    /// Class probabilities `[B, C]`; rows sum to 1.
    pub confusion: Tensor,
    /// Gate values `[B, F]`, every entry strictly inside (0, 1).
    pub attention: Tensor,
    /// Gated feature `[B, F]`.
    pub gated: Tensor,
}

impl SceModule {
    pub(crate) fn init(
        params: &mut ModelParams,
        feature_dim: usize,
        classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        SceModule {
            g: Linear::init(params, "sce.g", classes, feature_dim, rng),
            q: Linear::init(params, "sce.q", feature_dim, classes, rng),
        }
    }

    /// Squeeze: FC to class logits, softmax. The feature is already a
    /// vector, so the pooling in front of `g` is the identity.
    pub fn estimate_confusion(&self, feature: &Tensor) -> Result<Tensor> {
        softmax_last(&self.g.forward(feature)?)
    }

    /// Excite: FC back to feature width, sigmoid.
    pub fn excite(&self, confusion: &Tensor) -> Result<Tensor> {
        Ok(self.q.forward(confusion)?.sigmoid())
    }

    /// Hadamard gate.
    pub fn gate(feature: &Tensor, attention: &Tensor) -> Result<Tensor> {
        feature.mul(attention)
    }

    pub fn forward(&self, feature: &Tensor) -> Result<SceForward> {
        let confusion = self.estimate_confusion(feature)?;
        let attention = self.excite(&confusion)?;
        let gated = SceModule::gate(feature, &attention)?;
        Ok(SceForward {
            confusion,
            attention,
            gated,
        })
    }
}
