//! Loss construction and the training loop: shuffled batches of
//! fixed-length sequences, the combined objective, Adam with ridge decay,
//! per-pass validation, and early stopping on validation MF1 with a
//! best-snapshot restore.

pub mod losses;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ingest::{EpochRecord, SubjectDataset, NUM_STAGES};
use crate::model::{NetConfig, SequenceBatch, SleepNet};
use crate::tensor::adam::{adam_step, AdamHyper, AdamState};
use crate::tensor::ops::Mode;

pub use losses::{
    class_weights, total_loss, wce, wce_batch, wcs, wcs_batch, AuxFlags, LossOutput, LossWeights,
    TrainError,
};

pub type Result<T> = std::result::Result<T, TrainError>;

/// Optimization protocol and ablation switches.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Ridge coefficient applied through the optimizer.
    pub weight_decay: f64,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    /// Maximum passes over the training sequences.
    pub max_epochs: usize,
    /// Passes without validation-MF1 improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub lambda_t: f64,
    /// Epoch-level temporal attention on (off = single-scale ablation).
    pub eta: bool,
    /// Auxiliary epoch-level stage classification loss on.
    pub aux_stage: bool,
    /// Auxiliary stage-transition detection loss on.
    pub aux_transition: bool,
    /// Sequences per forward/backward graph; gradients accumulate across
    /// micro-batches within one optimizer step to bound peak memory.
    pub micro_batch: usize,
    /// Sample overlapping windows (stride 1) instead of disjoint ones.
    pub overlap_windows: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-3,
            batch_size: 32,
            max_epochs: 150,
            patience: 20,
            seed: 1,
            lambda_c: 2.0,
            lambda_s: 2.0,
            lambda_t: 0.2,
            eta: true,
            aux_stage: true,
            aux_transition: true,
            micro_batch: 2,
            overlap_windows: false,
        }
    }
}

impl TrainConfig {
    pub fn aux_flags(&self) -> AuxFlags {
        AuxFlags {
            stage: self.aux_stage,
            transition: self.aux_transition,
        }
    }

    fn adam_hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

/// One row of the training history.
#[derive(Clone, Copy, Debug, Default)]
pub struct EpochStats {
    pub loss_c: f64,
    pub loss_s: f64,
    pub loss_t: f64,
    /// Accuracy of the training-pass outputs (dropout active).
    pub train_acc: f64,
    pub val_acc: f64,
    pub val_mf1: f64,
    /// Transition-head loss on the validation sequences, eval mode.
    pub val_loss_t: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainHistory {
    pub passes: Vec<EpochStats>,
}

impl TrainHistory {
    /// CSV export: `epoch,loss_c,loss_s,loss_t,val_acc,val_mf1`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "epoch,loss_c,loss_s,loss_t,val_acc,val_mf1")?;
        for (i, s) in self.passes.iter().enumerate() {
            writeln!(
                f,
                "{},{},{},{},{},{}",
                i + 1,
                s.loss_c,
                s.loss_s,
                s.loss_t,
                s.val_acc,
                s.val_mf1
            )?;
        }
        Ok(())
    }
}

pub struct TrainOutcome {
    /// Model with the best-validation snapshot restored.
    pub net: SleepNet,
    pub history: TrainHistory,
    pub best_pass: usize,
    pub best_val_mf1: f64,
    pub warnings: Vec<String>,
}

/// Observer verdict after each pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PassDecision {
    Continue,
    Stop,
}

#[derive(Clone, Copy)]
struct WindowRef {
    subject: usize,
    start: usize,
}

fn collect_windows(
    subjects: &[&SubjectDataset],
    n: usize,
    overlap: bool,
    warnings: &mut Vec<String>,
) -> Vec<WindowRef> {
    let mut windows = Vec::new();
    for (si, ds) in subjects.iter().enumerate() {
        let mut found = false;
        for run in ds.contiguous_runs() {
            if run.end - run.start < n {
                continue;
            }
            let step = if overlap { 1 } else { n };
            for start in (run.start..=run.end - n).step_by(step) {
                windows.push(WindowRef { subject: si, start });
                found = true;
            }
        }
        if !found {
            let msg = format!(
                "subject {} has no run of {n} epochs; skipped",
                ds.subject_id
            );
            eprintln!("warning: {msg}");
            warnings.push(msg);
        }
    }
    windows
}

fn window_slice<'a>(subjects: &[&'a SubjectDataset], w: WindowRef, n: usize) -> &'a [EpochRecord] {
    &subjects[w.subject].epochs[w.start..w.start + n]
}

/// Average transition-head loss over a dataset's sequences, eval mode.
fn transition_loss_eval(
    net: &SleepNet,
    subjects: &[&SubjectDataset],
    weights: &LossWeights,
) -> Result<f64> {
    let n = net.cfg.seq_len;
    let mut warnings = Vec::new();
    let windows = collect_windows(subjects, n, false, &mut warnings);
    if windows.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in windows.chunks(8) {
        let seqs: Vec<&[EpochRecord]> =
            chunk.iter().map(|&w| window_slice(subjects, w, n)).collect();
        let batch = SequenceBatch::from_sequences(&seqs)?;
        let fwd =
            crate::tensor::no_grad(|| net.forward_batch(&batch, Mode::Eval, &mut rng))?;
        let loss = crate::tensor::no_grad(|| {
            total_loss(
                &fwd,
                &batch,
                weights,
                AuxFlags {
                    stage: false,
                    transition: true,
                },
            )
        })?;
        total += loss.loss_t * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count as f64)
}

/// Trains on `train_set` with early stopping on `val_set` MF1.
pub fn train(
    train_set: &[&SubjectDataset],
    val_set: &[&SubjectDataset],
    net_cfg: NetConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_observer(train_set, val_set, net_cfg, cfg, |_, _, _| {
        PassDecision::Continue
    })
}

/// Like [`train`] but invokes `observer` after every pass; returning
/// [`PassDecision::Stop`] ends training (the best snapshot is still kept).
pub fn train_with_observer(
    train_set: &[&SubjectDataset],
    val_set: &[&SubjectDataset],
    mut net_cfg: NetConfig,
    cfg: &TrainConfig,
    mut observer: impl FnMut(usize, &SleepNet, &EpochStats) -> PassDecision,
) -> Result<TrainOutcome> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::Config(
            "training needs at least one training and one validation subject".into(),
        ));
    }
    if cfg.patience >= cfg.max_epochs {
        return Err(TrainError::Config(format!(
            "patience {} must be below max_epochs {}",
            cfg.patience, cfg.max_epochs
        )));
    }
    if cfg.batch_size == 0 || cfg.micro_batch == 0 {
        return Err(TrainError::Config("batch sizes must be positive".into()));
    }
    net_cfg.amf.eta_enabled = cfg.eta;

    let mut warnings = Vec::new();
    let n = net_cfg.seq_len;
    let windows = collect_windows(train_set, n, cfg.overlap_windows, &mut warnings);
    if windows.is_empty() {
        return Err(TrainError::Config(format!(
            "no training subject provides a full {n}-epoch sequence"
        )));
    }

    // class weights from the epochs the loss will actually see
    let mut class_counts = [0usize; NUM_STAGES];
    let mut transition_counts = [0usize; 2];
    for &w in &windows {
        let slice = window_slice(train_set, w, n);
        let stages: Vec<_> = slice.iter().map(|e| e.label).collect();
        for s in &stages {
            class_counts[s.index()] += 1;
        }
        for t in crate::model::derive_transition_labels(&stages)? {
            transition_counts[t as usize] += 1;
        }
    }
    let weights = LossWeights {
        lambda_c: cfg.lambda_c,
        lambda_s: cfg.lambda_s,
        lambda_t: cfg.lambda_t,
        class_weights: class_weights(&class_counts)?,
        transition_weights: class_weights(&transition_counts)?,
    };
    let flags = cfg.aux_flags();

    let net = SleepNet::init(net_cfg, cfg.seed);
    let mut adam = AdamState::new(&net.params, cfg.adam_hyper());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut history = TrainHistory::default();
    let mut best: Option<(usize, f64, Vec<(String, Vec<f64>)>)> = None;

    let mut order: Vec<WindowRef> = windows.clone();
    for pass in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut stats = EpochStats::default();
        let mut seen_batches = 0.0;
        let mut correct = 0usize;
        let mut counted = 0usize;

        for batch_windows in order.chunks(cfg.batch_size) {
            let batch_len = batch_windows.len();
            net.params.zero_grads();
            for micro in batch_windows.chunks(cfg.micro_batch) {
                let seqs: Vec<&[EpochRecord]> = micro
                    .iter()
                    .map(|&w| window_slice(train_set, w, n))
                    .collect();
                let sbatch = SequenceBatch::from_sequences(&seqs)?;
                let fwd = net.forward_batch(&sbatch, Mode::Train, &mut rng)?;
                let loss = total_loss(&fwd, &sbatch, &weights, flags)?;
                let frac = micro.len() as f64 / batch_len as f64;
                loss.total.scale(frac).backward()?;
                stats.loss_c += loss.loss_c * frac;
                stats.loss_s += loss.loss_s * frac;
                stats.loss_t += loss.loss_t * frac;

                let s = sbatch.n_sequences;
                for (tau, probs) in fwd.stage_probs.iter().enumerate() {
                    let rows = probs.to_vec();
                    let c = net.cfg.classes;
                    for si in 0..s {
                        let row = &rows[si * c..(si + 1) * c];
                        let arg = (0..c)
                            .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                            .unwrap();
                        if arg == sbatch.stage_labels[si * n + tau] {
                            correct += 1;
                        }
                        counted += 1;
                    }
                }
            }
            // with the transition task ablated its head sits on no loss
            // path; give it an explicit zero gradient (ridge decay still
            // applies, every other missing gradient stays a hard error)
            if !cfg.aux_transition {
                for name in ["ce.transition.weight", "ce.transition.bias"] {
                    if let Some(t) = net.params.get(name) {
                        if t.grad().is_none() {
                            t.accum_grad(&vec![0.0; t.numel()]);
                        }
                    }
                }
            }
            adam_step(&net.params, &mut adam)?;
            net.params.zero_grads();
            seen_batches += 1.0;
        }
        stats.loss_c /= seen_batches;
        stats.loss_s /= seen_batches;
        stats.loss_t /= seen_batches;
        stats.train_acc = correct as f64 / counted.max(1) as f64;

        // validation
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        for ds in val_set {
            let (mut p, mut l) = crate::eval::predict_pairs(&net, ds)
                .map_err(|e| TrainError::Config(format!("validation failed: {e}")))?;
            preds.append(&mut p);
            labels.append(&mut l);
        }
        if !preds.is_empty() {
            let report = crate::eval::metrics(&preds, &labels)
                .map_err(|e| TrainError::Config(format!("validation metrics failed: {e}")))?;
            stats.val_acc = report.acc;
            stats.val_mf1 = report.mf1;
        }
        stats.val_loss_t = transition_loss_eval(&net, val_set, &weights)?;
        history.passes.push(stats);

        let improved = best
            .as_ref()
            .map(|(_, mf1, _)| stats.val_mf1 > *mf1)
            .unwrap_or(true);
        if improved {
            best = Some((pass, stats.val_mf1, net.params.snapshot()));
        }

        if observer(pass, &net, &stats) == PassDecision::Stop {
            break;
        }
        let best_pass = best.as_ref().map(|(p, _, _)| *p).unwrap_or(0);
        if pass - best_pass >= cfg.patience {
            break;
        }
    }

    let (best_pass, best_val_mf1, snapshot) = best.expect("at least one pass ran");
    net.params.restore(&snapshot)?;
    Ok(TrainOutcome {
        net,
        history,
        best_pass,
        best_val_mf1,
        warnings,
    })
}
