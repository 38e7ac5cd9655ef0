//! LSTM cell and bidirectional sequence wrapper.
//!
//! Gates follow the standard formulation: input/forget/output gates with
//! sigmoid, candidate with tanh, zero initial hidden and cell states. The
//! packed weight is `[4H, D + H]` acting on `concat(x_t, h_{t-1})` with gate
//! order `i, f, g, o`.

use super::ops::{concat_last, linear, slice_last};
use super::{Result, Tensor, TensorError};

pub struct LstmParams {
    /// Packed gate weights `[4H, D + H]`.
    pub weight: Tensor,
    /// Packed gate biases `[4H]`.
    pub bias: Tensor,
}

impl LstmParams {
    pub fn hidden_size(&self) -> usize {
        self.weight.shape()[0] / 4
    }

    pub fn input_size(&self) -> usize {
        let s = self.weight.shape();
        s[1] - s[0] / 4
    }
}

fn run_direction(inputs: &[&Tensor], params: &LstmParams, reverse: bool) -> Result<Vec<Tensor>> {
    let h_size = params.hidden_size();
    let batch = inputs[0].shape()[0];
    let mut h = Tensor::zeros(vec![batch, h_size]);
    let mut c = Tensor::zeros(vec![batch, h_size]);
    let mut outs: Vec<Option<Tensor>> = vec![None; inputs.len()];
    let order: Vec<usize> = if reverse {
        (0..inputs.len()).rev().collect()
    } else {
        (0..inputs.len()).collect()
    };
    for t in order {
        let cat = concat_last(&[inputs[t], &h])?;
        let gates = linear(&cat, &params.weight, Some(&params.bias))?;
        let i = slice_last(&gates, 0, h_size)?.sigmoid();
        let f = slice_last(&gates, h_size, h_size)?.sigmoid();
        let g = slice_last(&gates, 2 * h_size, h_size)?.tanh_act();
        let o = slice_last(&gates, 3 * h_size, h_size)?.sigmoid();
        c = f.mul(&c)?.add(&i.mul(&g)?)?;
        h = o.mul(&c.tanh_act())?;
        outs[t] = Some(h.clone());
    }
    Ok(outs.into_iter().map(|o| o.unwrap()).collect())
}

/// Runs a single-direction LSTM over per-step `[B, D]` tensors, returning
/// one `[B, H]` hidden state per step.
pub fn lstm(inputs: &[&Tensor], params: &LstmParams, reverse: bool) -> Result<Vec<Tensor>> {
    if inputs.is_empty() {
        return Err(TensorError::Contract {
            op: "lstm",
            msg: "empty sequence".into(),
        });
    }
    let d = params.input_size();
    for (t, x) in inputs.iter().enumerate() {
        let s = x.shape();
        if s.len() != 2 || s[1] != d {
            return Err(TensorError::Contract {
                op: "lstm",
                msg: format!("step {t}: expected [B, {d}], got {s:?}"),
            });
        }
    }
    run_direction(inputs, params, reverse)
}

/// Forward and backward passes concatenated per step: `[B, D]` -> `[B, 2H]`.
///
/// Rank-1 inputs (`[D]`) are treated as a batch of one and produce `[2H]`
/// outputs.
pub fn bilstm(
    inputs: &[Tensor],
    forward: &LstmParams,
    backward: &LstmParams,
) -> Result<Vec<Tensor>> {
    if inputs.is_empty() {
        return Err(TensorError::Contract {
            op: "bilstm",
            msg: "empty sequence".into(),
        });
    }
    let rank1 = inputs[0].shape().len() == 1;
    let lifted: Vec<Tensor>;
    let refs: Vec<&Tensor> = if rank1 {
        lifted = inputs
            .iter()
            .map(|t| super::ops::reshape(t, vec![1, t.numel()]))
            .collect::<Result<_>>()?;
        lifted.iter().collect()
    } else {
        inputs.iter().collect()
    };
    let fwd = lstm(&refs, forward, false)?;
    let bwd = lstm(&refs, backward, true)?;
    let mut out = Vec::with_capacity(inputs.len());
    for (f, b) in fwd.iter().zip(&bwd) {
        let cat = concat_last(&[f, b])?;
        out.push(if rank1 {
            super::ops::reshape(&cat, vec![cat.numel()])?
        } else {
            cat
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn zero_params(d: usize, h: usize) -> LstmParams {
        LstmParams {
            weight: Tensor::zeros(vec![4 * h, d + h]),
            bias: Tensor::zeros(vec![4 * h]),
        }
    }

    fn random_params(d: usize, h: usize, rng: &mut rand_chacha::ChaCha8Rng) -> LstmParams {
        let w: Vec<f64> = (0..4 * h * (d + h)).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let b: Vec<f64> = (0..4 * h).map(|_| rng.gen_range(-0.5..0.5)).collect();
        LstmParams {
            weight: Tensor::new(vec![4 * h, d + h], w).unwrap(),
            bias: Tensor::new(vec![4 * h], b).unwrap(),
        }
    }

    #[test]
    fn zero_everything_gives_zero_outputs() {
        let inputs: Vec<Tensor> = (0..4).map(|_| Tensor::zeros(vec![1, 3])).collect();
        let out = bilstm(&inputs, &zero_params(3, 2), &zero_params(3, 2)).unwrap();
        for o in out {
            assert!(o.to_vec().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn sequence_of_25_yields_25_double_width_outputs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let (d, h) = (6, 4);
        let inputs: Vec<Tensor> = (0..25)
            .map(|_| {
                Tensor::new(vec![1, d], (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
            })
            .collect();
        let fwd = random_params(d, h, &mut rng);
        let bwd = random_params(d, h, &mut rng);
        let out = bilstm(&inputs, &fwd, &bwd).unwrap();
        assert_eq!(out.len(), 25);
        for o in &out {
            assert_eq!(o.shape(), vec![1, 2 * h]);
        }
    }

    #[test]
    fn backward_direction_equals_forward_on_reversed_input() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let (d, h, n) = (3, 2, 7);
        let params = random_params(d, h, &mut rng);
        let seq: Vec<Tensor> = (0..n)
            .map(|_| {
                Tensor::new(vec![1, d], (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
            })
            .collect();
        let refs: Vec<&Tensor> = seq.iter().collect();
        let bwd_out = lstm(&refs, &params, true).unwrap();

        let rev: Vec<&Tensor> = seq.iter().rev().collect();
        let fwd_on_rev = lstm(&rev, &params, false).unwrap();
        for t in 0..n {
            let a = bwd_out[t].to_vec();
            let b = fwd_on_rev[n - 1 - t].to_vec();
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rank1_inputs_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (d, h) = (3, 2);
        let inputs: Vec<Tensor> = (0..4)
            .map(|_| {
                Tensor::new(vec![d], (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
            })
            .collect();
        let fwd = random_params(d, h, &mut rng);
        let bwd = random_params(d, h, &mut rng);
        let out = bilstm(&inputs, &fwd, &bwd).unwrap();
        assert_eq!(out[0].shape(), vec![2 * h]);
    }
}
