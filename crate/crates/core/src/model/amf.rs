//! Attention-based multi-scale feature extractor.
//!
//! Two convolution paths: path A opens with a wide spectral kernel
//! (2 * fs taps) for low-frequency content, path B with a narrow one
//! (fs / 2) for fast rhythms. Each path stacks three separable temporal
//! convolutions; the output of every temporal block is tapped, pooled,
//! position-encoded, passed through multi-head self-attention and averaged
//! (the epoch-level temporal attention block). The three per-scale vectors
//! concatenate to the path feature, finished by two fully connected layers.
//! With the attention block disabled, only the final block's global average
//! survives, which is the single-scale ablation.

use rand_chacha::ChaCha8Rng;

use crate::tensor::adam::ModelParams;
use crate::tensor::ops::{
    self, adaptive_avg_pool, add_broadcast, batch_norm1d, conv1d, global_avg_pool,
    multi_head_self_attention, positional_encoding, same_padding, separable_conv1d, transpose_cl,
    MhsaParams, Mode,
};
use crate::tensor::{Result, Tensor, TensorError};

use super::{init, AmfConfig, NetConfig};

pub(crate) struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm {
    pub(crate) fn init(params: &mut ModelParams, prefix: &str, channels: usize) -> BatchNorm {
        BatchNorm {
            gamma: params.register(
                &format!("{prefix}.gamma"),
                Tensor::full(vec![channels], 1.0),
                true,
            ),
            beta: params.register(
                &format!("{prefix}.beta"),
                Tensor::zeros(vec![channels]),
                true,
            ),
            running_mean: params.register(
                &format!("{prefix}.running_mean"),
                Tensor::zeros(vec![channels]),
                false,
            ),
            running_var: params.register(
                &format!("{prefix}.running_var"),
                Tensor::full(vec![channels], 1.0),
                false,
            ),
        }
    }

    pub(crate) fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        batch_norm1d(
            x,
            &self.gamma,
            &self.beta,
            mode,
            Some((&self.running_mean, &self.running_var)),
            super::BN_EPSILON,
        )
    }
}

pub(crate) struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub(crate) fn init(
        params: &mut ModelParams,
        prefix: &str,
        out: usize,
        inp: usize,
        rng: &mut ChaCha8Rng,
    ) -> Linear {
        Linear {
            weight: params.register(
                &format!("{prefix}.weight"),
                init::fan_in_uniform(vec![out, inp], inp, rng),
                true,
            ),
            bias: params.register(&format!("{prefix}.bias"), Tensor::zeros(vec![out]), true),
        }
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::linear(x, &self.weight, Some(&self.bias))
    }
}

fn init_mhsa(
    params: &mut ModelParams,
    prefix: &str,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> MhsaParams {
    let mut proj = |name: &str, rng: &mut ChaCha8Rng| {
        (
            params.register(
                &format!("{prefix}.{name}.weight"),
                init::fan_in_uniform(vec![d, d], d, rng),
                true,
            ),
            params.register(
                &format!("{prefix}.{name}.bias"),
                Tensor::zeros(vec![d]),
                true,
            ),
        )
    };
    let (wq, bq) = proj("wq", rng);
    let (wk, bk) = proj("wk", rng);
    let (wv, bv) = proj("wv", rng);
    let (wo, bo) = proj("wo", rng);
    MhsaParams {
        wq,
        bq,
        wk,
        bk,
        wv,
        bv,
        wo,
        bo,
    }
}

struct SeparableBlock {
    depthwise: Tensor,
    pointwise: Tensor,
    bn: BatchNorm,
    kernel: usize,
}

struct EtaBlock {
    attention: MhsaParams,
    width: usize,
}

pub(crate) struct AmfPath {
    spec_weight: Tensor,
    spec_bias: Tensor,
    spec_bn: BatchNorm,
    spec_kernel: usize,
    blocks: Vec<SeparableBlock>,
    eta: Vec<EtaBlock>,
    fc1: Linear,
    fc2: Linear,
}

/// Per-path forward details: the multi-scale vector before the FC stack and
/// the attention matrices of every ETA block (one `[B, P, P]` per head).
pub struct PathForward {
    pub output: Tensor,
    pub pre_fc: Tensor,
    pub attention: Vec<Tensor>,
}

impl AmfPath {
    fn init(
        params: &mut ModelParams,
        prefix: &str,
        cfg: &AmfConfig,
        spectral_kernel: usize,
        temporal_kernels: [usize; 3],
        rng: &mut ChaCha8Rng,
    ) -> AmfPath {
        let spec_weight = params.register(
            &format!("{prefix}.spec.weight"),
            init::fan_in_uniform(vec![cfg.width0, 1, spectral_kernel], spectral_kernel, rng),
            true,
        );
        let spec_bias = params.register(
            &format!("{prefix}.spec.bias"),
            Tensor::zeros(vec![cfg.width0]),
            true,
        );
        let spec_bn = BatchNorm::init(params, &format!("{prefix}.bn0"), cfg.width0);

        let mut blocks = Vec::new();
        let mut c_in = cfg.width0;
        for (k, (&width, &kernel)) in cfg.widths.iter().zip(&temporal_kernels).enumerate() {
            let depthwise = params.register(
                &format!("{prefix}.sep{}.depthwise", k + 1),
                init::fan_in_uniform(vec![c_in, 1, kernel], kernel, rng),
                true,
            );
            let pointwise = params.register(
                &format!("{prefix}.sep{}.pointwise", k + 1),
                init::fan_in_uniform(vec![width, c_in, 1], c_in, rng),
                true,
            );
            let bn = BatchNorm::init(params, &format!("{prefix}.bn{}", k + 1), width);
            blocks.push(SeparableBlock {
                depthwise,
                pointwise,
                bn,
                kernel,
            });
            c_in = width;
        }

        let eta = if cfg.eta_enabled {
            cfg.widths
                .iter()
                .enumerate()
                .map(|(k, &width)| EtaBlock {
                    attention: init_mhsa(params, &format!("{prefix}.eta{}", k + 1), width, rng),
                    width,
                })
                .collect()
        } else {
            Vec::new()
        };

        let path_out: usize = cfg.widths.iter().sum();
        let fc_in = if cfg.eta_enabled {
            path_out
        } else {
            *cfg.widths.last().unwrap()
        };
        let fc1 = Linear::init(params, &format!("{prefix}.fc1"), path_out, fc_in, rng);
        let fc2 = Linear::init(params, &format!("{prefix}.fc2"), path_out, path_out, rng);

        AmfPath {
            spec_weight,
            spec_bias,
            spec_bn,
            spec_kernel: spectral_kernel,
            blocks,
            eta,
            fc1,
            fc2,
        }
    }

    fn forward(&self, x: &Tensor, cfg: &NetConfig, mode: Mode) -> Result<PathForward> {
        let act = cfg.activation;
        let pad = same_padding(self.spec_kernel, cfg.amf.stride);
        let mut h = conv1d(x, &self.spec_weight, Some(&self.spec_bias), cfg.amf.stride, pad)?;
        h = act.apply(&self.spec_bn.forward(&h, mode)?);

        let mut taps = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let pad = same_padding(block.kernel, cfg.amf.stride);
            h = separable_conv1d(&h, &block.depthwise, &block.pointwise, cfg.amf.stride, pad)?;
            h = act.apply(&block.bn.forward(&h, mode)?);
            taps.push(h.clone());
        }

        let mut attention = Vec::new();
        let pre_fc = if cfg.amf.eta_enabled {
            let mut scale_vecs = Vec::with_capacity(taps.len());
            for (tap, eta) in taps.iter().zip(&self.eta) {
                let (vec_k, mut attn) = eta_block(tap, &eta.attention, eta.width, &cfg.amf)?;
                scale_vecs.push(vec_k);
                attention.append(&mut attn);
            }
            let refs: Vec<&Tensor> = scale_vecs.iter().collect();
            ops::concat_last(&refs)?
        } else {
            global_avg_pool(taps.last().expect("at least one temporal block"))?
        };

        let output = self.fc2.forward(&act.apply(&self.fc1.forward(&pre_fc)?))?;
        Ok(PathForward {
            output,
            pre_fc,
            attention,
        })
    }
}

/// Pool to a short sequence, add positions, attend, average:
/// `[B, F, L]` -> `[B, F]`. Returns the per-head attention matrices.
pub fn eta_block(
    features: &Tensor,
    attention: &MhsaParams,
    width: usize,
    cfg: &AmfConfig,
) -> Result<(Tensor, Vec<Tensor>)> {
    let pooled = adaptive_avg_pool(features, cfg.pooled_len)?;
    let mut seq = transpose_cl(&pooled)?;
    if cfg.eta_positional_encoding {
        let pe = positional_encoding(cfg.pooled_len, width)?;
        seq = add_broadcast(&seq, &pe)?;
    }
    let attn = multi_head_self_attention(&seq, cfg.heads, attention)?;
    let out = ops::mean_rows(&attn.output)?;
    Ok((out, attn.weights))
}

/// Both convolution paths plus the shared plumbing.
pub struct AmfModule {
    path_a: AmfPath,
    path_b: AmfPath,
}

/// Full forward details for inspection.
pub struct AmfForward {
    /// `[B, F]` with `F = 2 * sum(widths)`.
    pub feature: Tensor,
    pub path_a: PathForward,
    pub path_b: PathForward,
}

impl AmfModule {
    pub(crate) fn init(params: &mut ModelParams, cfg: &AmfConfig, rng: &mut ChaCha8Rng) -> Self {
        AmfModule {
            path_a: AmfPath::init(
                params,
                "amf.pathA",
                cfg,
                cfg.spectral_kernel_a,
                cfg.temporal_kernels_a,
                rng,
            ),
            path_b: AmfPath::init(
                params,
                "amf.pathB",
                cfg,
                cfg.spectral_kernel_b,
                cfg.temporal_kernels_b,
                rng,
            ),
        }
    }

    /// `[B, 1, L]` (or `[B, L]`) -> feature `[B, F]`.
    pub fn forward(&self, epochs: &Tensor, cfg: &NetConfig, mode: Mode) -> Result<Tensor> {
        Ok(self.forward_detailed(epochs, cfg, mode)?.feature)
    }

    pub fn forward_detailed(
        &self,
        epochs: &Tensor,
        cfg: &NetConfig,
        mode: Mode,
    ) -> Result<AmfForward> {
        let shape = epochs.shape();
        let x = match shape.len() {
            2 => ops::reshape(epochs, vec![shape[0], 1, shape[1]])?,
            3 if shape[1] == 1 => epochs.clone(),
            _ => {
                return Err(TensorError::RankMismatch {
                    op: "amf_forward",
                    expected: 2,
                    got: shape,
                })
            }
        };
        let got = x.shape()[2];
        if got != cfg.amf.epoch_samples {
            return Err(TensorError::Contract {
                op: "amf_forward",
                msg: format!("epoch length {got}, expected {}", cfg.amf.epoch_samples),
            });
        }
        let path_a = self.path_a.forward(&x, cfg, mode)?;
        let path_b = self.path_b.forward(&x, cfg, mode)?;
        let feature = ops::concat_last(&[&path_a.output, &path_b.output])?;
        Ok(AmfForward {
            feature,
            path_a,
            path_b,
        })
    }
}
