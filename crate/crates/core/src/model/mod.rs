//! Network configuration and the assembled staging model.

pub mod amf;
pub mod ce;
pub mod sce;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ingest::EpochRecord;
use crate::tensor::adam::ModelParams;
use crate::tensor::ops::{select_rows, Mode};
use crate::tensor::{Result, Tensor, TensorError};

pub use amf::{AmfForward, AmfModule};
pub use ce::{derive_transition_labels, CeForward, CeModule};
pub use sce::{SceForward, SceModule};

pub const BN_EPSILON: f64 = 1e-5;

/// Nonlinearity between convolution/FC blocks. The architecture does not
/// hinge on the choice; GELU is the default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(&self, x: &Tensor) -> Tensor {
        match self {
            Activation::Gelu => x.gelu(),
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh_act(),
        }
    }
}

/// How the context encoder consumes original and gated features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureCombine {
    Concat,
    Sum,
}

/// Feature-extractor hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AmfConfig {
    pub sample_rate_hz: f64,
    pub epoch_samples: usize,
    pub stride: usize,
    /// Wide spectral kernel (2 * fs), path A.
    pub spectral_kernel_a: usize,
    /// Narrow spectral kernel (fs / 2), path B.
    pub spectral_kernel_b: usize,
    pub temporal_kernels_a: [usize; 3],
    pub temporal_kernels_b: [usize; 3],
    pub width0: usize,
    pub widths: [usize; 3],
    pub heads: usize,
    pub pooled_len: usize,
    pub eta_positional_encoding: bool,
    /// Disabled = single-scale ablation: global average of the final block
    /// replaces the attention-pooled multi-scale taps.
    pub eta_enabled: bool,
}

impl Default for AmfConfig {
    fn default() -> Self {
        AmfConfig {
            sample_rate_hz: 100.0,
            epoch_samples: 3000,
            stride: 2,
            spectral_kernel_a: 200,
            spectral_kernel_b: 50,
            temporal_kernels_a: [11, 7, 3],
            temporal_kernels_b: [15, 9, 5],
            width0: 4,
            widths: [16, 32, 64],
            heads: 4,
            pooled_len: 16,
            eta_positional_encoding: true,
            eta_enabled: true,
        }
    }
}

impl AmfConfig {
    /// Scaled-down variant for gradient checks and fast tests: 8 Hz input,
    /// narrow widths, full structure.
    pub fn toy() -> Self {
        AmfConfig {
            sample_rate_hz: 8.0,
            epoch_samples: 240,
            spectral_kernel_a: 16,
            spectral_kernel_b: 4,
            width0: 2,
            widths: [4, 6, 8],
            heads: 2,
            pooled_len: 6,
            ..AmfConfig::default()
        }
    }

    /// Per-path feature width (the sum of the tapped widths).
    pub fn path_dim(&self) -> usize {
        self.widths.iter().sum()
    }
}

/// Whole-network configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetConfig {
    pub amf: AmfConfig,
    pub classes: usize,
    /// Sequence length consumed by the context encoder.
    pub seq_len: usize,
    /// Bi-LSTM hidden size per direction.
    pub hidden: usize,
    pub dropout: f64,
    pub combine: FeatureCombine,
    pub activation: Activation,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            amf: AmfConfig::default(),
            classes: 5,
            seq_len: 25,
            hidden: 128,
            dropout: 0.5,
            combine: FeatureCombine::Concat,
            activation: Activation::Gelu,
        }
    }
}

impl NetConfig {
    pub fn toy() -> Self {
        NetConfig {
            amf: AmfConfig::toy(),
            seq_len: 4,
            hidden: 8,
            ..NetConfig::default()
        }
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.amf.path_dim()
    }
}

pub(crate) mod init {
    use super::*;
    use rand::Rng;

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weight tensor.
    pub fn fan_in_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let limit = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
        Tensor::new(shape, data).unwrap()
    }
}

/// A training/inference unit: S sequences of N consecutive epochs from one
/// or more subjects, with stage and derived transition labels, flattened
/// row-major as `s * N + tau`.
pub struct SequenceBatch {
    pub n_sequences: usize,
    pub seq_len: usize,
    pub epoch_samples: usize,
    pub inputs: Vec<f64>,
    pub stage_labels: Vec<usize>,
    pub transition_labels: Vec<usize>,
}

impl SequenceBatch {
    /// Builds a batch from per-sequence epoch slices. Every slice must hold
    /// the same number of epochs; transition labels are derived from the
    /// stage labels of each sequence independently.
    pub fn from_sequences(sequences: &[&[EpochRecord]]) -> Result<SequenceBatch> {
        if sequences.is_empty() {
            return Err(TensorError::Contract {
                op: "sequence_batch",
                msg: "no sequences".into(),
            });
        }
        let seq_len = sequences[0].len();
        let epoch_samples = sequences[0][0].samples.len();
        let mut inputs = Vec::with_capacity(sequences.len() * seq_len * epoch_samples);
        let mut stage_labels = Vec::with_capacity(sequences.len() * seq_len);
        let mut transition_labels = Vec::with_capacity(sequences.len() * seq_len);
        for (i, seq) in sequences.iter().enumerate() {
            if seq.len() != seq_len {
                return Err(TensorError::Contract {
                    op: "sequence_batch",
                    msg: format!(
                        "sequence {i} has {} epochs, expected {seq_len}",
                        seq.len()
                    ),
                });
            }
            let stages: Vec<_> = seq.iter().map(|e| e.label).collect();
            let transitions = derive_transition_labels(&stages)?;
            for (e, t) in seq.iter().zip(transitions) {
                inputs.extend(e.samples.iter().map(|&v| v as f64));
                stage_labels.push(e.label.index());
                transition_labels.push(t as usize);
            }
        }
        Ok(SequenceBatch {
            n_sequences: sequences.len(),
            seq_len,
            epoch_samples,
            inputs,
            stage_labels,
            transition_labels,
        })
    }
}

/// Everything the loss needs from one forward pass over a sequence batch.
pub struct NetForward {
    /// `[S*N, F]` epoch features.
    pub feature: Tensor,
    /// `[S*N, C]` auxiliary-head probabilities.
    pub confusion: Tensor,
    /// `[S*N, F]` gate values.
    pub gate: Tensor,
    /// `[S*N, F]` gated features.
    pub gated: Tensor,
    /// Per step `[S, C]`.
    pub stage_probs: Vec<Tensor>,
    /// Per step `[S, 2]`.
    pub transition_probs: Vec<Tensor>,
}

/// The assembled model: feature extractor, confusion estimator, context
/// encoder, and the shared parameter registry.
pub struct SleepNet {
    pub cfg: NetConfig,
    pub params: ModelParams,
    amf: AmfModule,
    sce: SceModule,
    ce: CeModule,
}

impl SleepNet {
    pub fn init(cfg: NetConfig, seed: u64) -> SleepNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::new();
        let amf = AmfModule::init(&mut params, &cfg.amf, &mut rng);
        let sce = SceModule::init(&mut params, cfg.feature_dim(), cfg.classes, &mut rng);
        let ce = CeModule::init(&mut params, &cfg, &mut rng);
        SleepNet {
            cfg,
            params,
            amf,
            sce,
            ce,
        }
    }

    pub fn amf(&self) -> &AmfModule {
        &self.amf
    }

    pub fn sce(&self) -> &SceModule {
        &self.sce
    }

    pub fn ce(&self) -> &CeModule {
        &self.ce
    }

    /// Epoch-level forward (AMF + SCE) over a flat `[B * L]` buffer.
    pub fn forward_epochs(&self, inputs: &[f64], mode: Mode) -> Result<(Tensor, SceForward)> {
        let l = self.cfg.amf.epoch_samples;
        if inputs.is_empty() || inputs.len() % l != 0 {
            return Err(TensorError::Contract {
                op: "forward_epochs",
                msg: format!("input length {} is not a multiple of {l}", inputs.len()),
            });
        }
        let b = inputs.len() / l;
        let x = Tensor::new(vec![b, l], inputs.to_vec())?;
        let feature = self.amf.forward(&x, &self.cfg, mode)?;
        let sce = self.sce.forward(&feature)?;
        Ok((feature, sce))
    }

    /// Full forward over a sequence batch.
    pub fn forward_batch(
        &self,
        batch: &SequenceBatch,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NetForward> {
        let (s, n, l) = (batch.n_sequences, batch.seq_len, batch.epoch_samples);
        let x = Tensor::new(vec![s * n, l], batch.inputs.clone())?;
        self.forward_batch_tensor(&x, batch, mode, rng)
    }

    /// Like [`SleepNet::forward_batch`] but over a caller-supplied
    /// `[S*N, L]` input tensor, so gradients with respect to the raw input
    /// can be requested.
    pub fn forward_batch_tensor(
        &self,
        x: &Tensor,
        batch: &SequenceBatch,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NetForward> {
        let (s, n, l) = (batch.n_sequences, batch.seq_len, batch.epoch_samples);
        if l != self.cfg.amf.epoch_samples {
            return Err(TensorError::Contract {
                op: "forward_batch",
                msg: format!("epoch length {l}, expected {}", self.cfg.amf.epoch_samples),
            });
        }
        if x.shape() != vec![s * n, l] {
            return Err(TensorError::Contract {
                op: "forward_batch",
                msg: format!("input tensor shape {:?}, expected [{}, {l}]", x.shape(), s * n),
            });
        }
        let feature = self.amf.forward(x, &self.cfg, mode)?;
        let sce = self.sce.forward(&feature)?;

        let mut f_steps = Vec::with_capacity(n);
        let mut g_steps = Vec::with_capacity(n);
        for tau in 0..n {
            let rows: Vec<usize> = (0..s).map(|si| si * n + tau).collect();
            f_steps.push(select_rows(&feature, &rows)?);
            g_steps.push(select_rows(&sce.gated, &rows)?);
        }
        let ce = self.ce.forward(&f_steps, &g_steps, &self.cfg, mode, rng)?;

        Ok(NetForward {
            feature,
            confusion: sce.confusion,
            gate: sce.attention,
            gated: sce.gated,
            stage_probs: ce.stage_probs,
            transition_probs: ce.transition_probs,
        })
    }
}
