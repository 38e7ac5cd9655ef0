//! Named parameter registry and the Adam optimizer.

use std::collections::HashMap;

use super::{Result, Tensor, TensorError};

/// One named tensor in the registry. Non-trainable entries (batch-norm
/// running statistics) are checkpointed but skipped by the optimizer.
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// The complete set of model tensors, addressable by hierarchical name.
/// Registration order is fixed, which keeps checkpoints and optimizer state
/// deterministic.
#[derive(Default)]
pub struct ModelParams {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor and returns a shared handle to it.
    pub fn register(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Tensor {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        if trainable {
            tensor.clone().with_grad();
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            tensor: tensor.clone(),
            trainable,
        });
        tensor
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for e in &self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Deep copy of all values, for best-snapshot bookkeeping.
    pub fn snapshot(&self) -> Vec<(String, Vec<f64>)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.tensor.to_vec()))
            .collect()
    }

    pub fn restore(&self, snapshot: &[(String, Vec<f64>)]) -> Result<()> {
        for (name, data) in snapshot {
            let t = self.get(name).ok_or_else(|| TensorError::Contract {
                op: "restore",
                msg: format!("unknown parameter '{name}'"),
            })?;
            t.set_data(data)?;
        }
        Ok(())
    }
}

/// Adam hyperparameters. Defaults follow the training protocol: lr 1e-3,
/// betas (0.9, 0.999), eps 1e-8, ridge weight decay 1e-3.
#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

/// Per-parameter first/second moment buffers plus the shared step counter.
pub struct AdamState {
    pub hyper: AdamHyper,
    t: u64,
    moments: Vec<Moment>,
}

struct Moment {
    name: String,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(params: &ModelParams, hyper: AdamHyper) -> Self {
        let moments = params
            .iter()
            .filter(|e| e.trainable)
            .map(|e| Moment {
                name: e.name.clone(),
                m: vec![0.0; e.tensor.numel()],
                v: vec![0.0; e.tensor.numel()],
            })
            .collect();
        AdamState {
            hyper,
            t: 0,
            moments,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update over every trainable parameter. The ridge
/// term `weight_decay * theta` is added to the gradient before the moment
/// update. Gradients are left in place; callers clear them.
pub fn adam_step(params: &ModelParams, state: &mut AdamState) -> Result<()> {
    state.t += 1;
    let h = state.hyper;
    let bc1 = 1.0 - h.beta1.powi(state.t as i32);
    let bc2 = 1.0 - h.beta2.powi(state.t as i32);
    let mut mi = 0;
    for e in params.iter() {
        if !e.trainable {
            continue;
        }
        let grad = e
            .tensor
            .grad()
            .ok_or_else(|| TensorError::MissingGrad(e.name.clone()))?;
        let moment = &mut state.moments[mi];
        debug_assert_eq!(moment.name, e.name);
        mi += 1;
        let mut data = e.tensor.to_vec();
        for i in 0..data.len() {
            let g = grad[i] + h.weight_decay * data[i];
            moment.m[i] = h.beta1 * moment.m[i] + (1.0 - h.beta1) * g;
            moment.v[i] = h.beta2 * moment.v[i] + (1.0 - h.beta2) * g * g;
            let mhat = moment.m[i] / bc1;
            let vhat = moment.v[i] / bc2;
            data[i] -= h.lr * mhat / (vhat.sqrt() + h.epsilon);
        }
        e.tensor.set_data(&data)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(v: f64) -> (ModelParams, Tensor) {
        let mut p = ModelParams::new();
        let t = p.register("w", Tensor::new(vec![1], vec![v]).unwrap(), true);
        (p, t)
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_params_unchanged() {
        let (params, t) = single_param(1.5);
        t.accum_grad(&[0.0]);
        let mut st = AdamState::new(
            &params,
            AdamHyper {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        adam_step(&params, &mut st).unwrap();
        assert_eq!(t.to_vec(), vec![1.5]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (params, t) = single_param(0.0);
        t.accum_grad(&[0.37]);
        let hyper = AdamHyper {
            lr: 1e-3,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = AdamState::new(&params, hyper);
        adam_step(&params, &mut st).unwrap();
        let moved = -t.to_vec()[0];
        // bias-corrected mhat/sqrt(vhat) == sign(g) on the first step
        assert!((moved - 1e-3).abs() < 1e-6, "step size {moved}");
    }

    #[test]
    fn step_counter_increments_once_per_step() {
        let (params, t) = single_param(1.0);
        let mut st = AdamState::new(&params, AdamHyper::default());
        assert_eq!(st.step_count(), 0);
        t.accum_grad(&[0.1]);
        adam_step(&params, &mut st).unwrap();
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut p = ModelParams::new();
        let a = p.register("layer.weight", Tensor::zeros(vec![2]), true);
        p.register("layer.bias", Tensor::zeros(vec![2]), true);
        a.accum_grad(&[0.1, 0.1]);
        let mut st = AdamState::new(&p, AdamHyper::default());
        let err = adam_step(&p, &mut st).unwrap_err();
        assert!(err.to_string().contains("layer.bias"), "{err}");
    }

    #[test]
    fn snapshot_restore_round_trip() {
        let (params, t) = single_param(2.0);
        let snap = params.snapshot();
        t.set_data(&[9.0]).unwrap();
        params.restore(&snap).unwrap();
        assert_eq!(t.to_vec(), vec![2.0]);
    }
}
