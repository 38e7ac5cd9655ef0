//! Evaluation harness: fold planning, classification metrics, transition
//! error analysis, hypnogram export, and cross-validation orchestration.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Stage, SubjectDataset, NUM_STAGES};
use crate::model::{derive_transition_labels, NetConfig, SequenceBatch, SleepNet};
use crate::tensor::ops::Mode;
use crate::tensor::TensorError;
use crate::train::{self, TrainConfig, TrainHistory};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<EvalError>,
    },
}

pub type Result<T> = std::result::Result<T, EvalError>;

// ---------------------------------------------------------------------------
// Fold planning
// ---------------------------------------------------------------------------

/// Assignment of every subject to exactly one test fold.
#[derive(Clone, Debug)]
pub struct FoldPlan {
    pub k: usize,
    assignments: Vec<(String, usize)>,
}

impl FoldPlan {
    pub fn test_subjects(&self, fold: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, f)| *f == fold)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    pub fn train_subjects(&self, fold: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, f)| *f != fold)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    pub fn assignments(&self) -> &[(String, usize)] {
        &self.assignments
    }
}

/// Deterministic k-fold split; `k == subjects` is leave-one-subject-out.
pub fn kfold_split(subject_ids: &[String], k: usize, seed: u64) -> Result<FoldPlan> {
    if k > subject_ids.len() {
        return Err(EvalError::Config(format!(
            "k = {k} exceeds {} subjects",
            subject_ids.len()
        )));
    }
    if k < 2 {
        return Err(EvalError::Config(
            "k must be at least 2 (one test fold would leave no training data)".into(),
        ));
    }
    let mut ids = subject_ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let assignments = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, i % k))
        .collect();
    Ok(FoldPlan { k, assignments })
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Misclassification rate and population share of one epoch partition.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct RateShare {
    pub rate: f64,
    pub share: f64,
}

/// Aggregate classification report. Serialized field order matches the
/// report JSON contract.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc: f64,
    pub mf1: f64,
    pub per_class_f1: PerClassF1,
    pub confusion: Vec<Vec<usize>>,
    pub transition: RateShare,
    pub non_transition: RateShare,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct PerClassF1 {
    pub W: f64,
    pub N1: f64,
    pub N2: f64,
    pub N3: f64,
    pub REM: f64,
}

impl PerClassF1 {
    pub fn as_array(&self) -> [f64; NUM_STAGES] {
        [self.W, self.N1, self.N2, self.N3, self.REM]
    }

    fn from_array(a: [f64; NUM_STAGES]) -> Self {
        PerClassF1 {
            W: a[0],
            N1: a[1],
            N2: a[2],
            N3: a[3],
            REM: a[4],
        }
    }
}

/// Per-class one-vs-rest F1, macro-averaged F1, accuracy, and the confusion
/// matrix (rows = truth, columns = prediction). A class absent from both
/// predictions and labels scores F1 = 0 and stays in the macro mean, with a
/// warning.
pub fn metrics(preds: &[Stage], labels: &[Stage]) -> Result<EvalReport> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(EvalError::Config(format!(
            "metrics needs equal non-empty sequences, got {} predictions and {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut confusion = vec![vec![0usize; NUM_STAGES]; NUM_STAGES];
    for (&p, &l) in preds.iter().zip(labels) {
        confusion[l.index()][p.index()] += 1;
    }
    let total = preds.len();
    let mut correct = 0;
    let mut f1 = [0.0; NUM_STAGES];
    let mut warnings = Vec::new();
    for c in 0..NUM_STAGES {
        let tp = confusion[c][c];
        correct += tp;
        let fp: usize = (0..NUM_STAGES).filter(|&r| r != c).map(|r| confusion[r][c]).sum();
        let fn_: usize = (0..NUM_STAGES).filter(|&p| p != c).map(|p| confusion[c][p]).sum();
        if tp + fp + fn_ == 0 {
            warnings.push(format!(
                "class {} absent from predictions and labels; F1 counted as 0",
                Stage::ALL[c]
            ));
            f1[c] = 0.0;
        } else {
            f1[c] = 2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64);
        }
    }
    Ok(EvalReport {
        acc: correct as f64 / total as f64,
        mf1: f1.iter().sum::<f64>() / NUM_STAGES as f64,
        per_class_f1: PerClassF1::from_array(f1),
        confusion,
        transition: RateShare::default(),
        non_transition: RateShare::default(),
        warnings,
    })
}

/// Splits epochs into transitioning and non-transitioning partitions (by
/// the true labels of each contiguous per-subject sequence) and reports the
/// misclassification rate and population share of each.
pub fn transition_analysis(
    per_subject: &[(Vec<Stage>, Vec<Stage>)],
) -> Result<(RateShare, RateShare)> {
    let mut counts = [0usize; 2];
    let mut errors = [0usize; 2];
    for (preds, labels) in per_subject {
        if preds.len() != labels.len() {
            return Err(EvalError::Config(
                "transition_analysis: prediction/label length mismatch".into(),
            ));
        }
        if labels.is_empty() {
            continue;
        }
        let flags = derive_transition_labels(labels)?;
        for ((&p, &l), &t) in preds.iter().zip(labels).zip(&flags) {
            counts[t as usize] += 1;
            if p != l {
                errors[t as usize] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    let rate = |part: usize| {
        if counts[part] == 0 {
            0.0
        } else {
            errors[part] as f64 / counts[part] as f64
        }
    };
    let share = |part: usize| {
        if total == 0 {
            0.0
        } else {
            counts[part] as f64 / total as f64
        }
    };
    Ok((
        RateShare {
            rate: rate(1),
            share: share(1),
        },
        RateShare {
            rate: rate(0),
            share: share(0),
        },
    ))
}

// ---------------------------------------------------------------------------
// Hypnogram export
// ---------------------------------------------------------------------------

/// Vertical plot order, top to bottom.
const HYPNOGRAM_ORDER: [Stage; NUM_STAGES] =
    [Stage::W, Stage::Rem, Stage::N1, Stage::N2, Stage::N3];

fn hypnogram_y(stage: Stage) -> usize {
    HYPNOGRAM_ORDER.iter().position(|&s| s == stage).unwrap()
}

/// Writes `<stem>.csv` (epoch_index, true_stage, predicted_stage) and
/// `<stem>.svg` (two step polylines, truth above prediction color-coded).
/// Returns the two paths.
pub fn hypnogram_export(
    preds: &[Stage],
    labels: &[Stage],
    stem: &Path,
) -> Result<(PathBuf, PathBuf)> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(EvalError::Config(
            "hypnogram export needs equal non-empty sequences".into(),
        ));
    }
    let csv_path = stem.with_extension("csv");
    let svg_path = stem.with_extension("svg");

    let mut csv = std::fs::File::create(&csv_path)?;
    writeln!(csv, "epoch_index,true_stage,predicted_stage")?;
    for (i, (&p, &l)) in preds.iter().zip(labels).enumerate() {
        writeln!(csv, "{i},{l},{p}")?;
    }

    let n = preds.len();
    let (px, row_h, margin) = (4usize, 24usize, 30usize);
    let width = margin * 2 + n * px;
    let height = margin * 2 + row_h * NUM_STAGES;
    let polyline = |seq: &[Stage]| {
        let mut pts = String::new();
        for (i, &s) in seq.iter().enumerate() {
            let y = margin + hypnogram_y(s) * row_h;
            let x0 = margin + i * px;
            let x1 = margin + (i + 1) * px;
            pts.push_str(&format!("{x0},{y} {x1},{y} "));
        }
        pts.trim_end().to_string()
    };
    let mut svg = std::fs::File::create(&svg_path)?;
    writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">"
    )?;
    for (i, s) in HYPNOGRAM_ORDER.iter().enumerate() {
        let y = margin + i * row_h;
        writeln!(
            svg,
            "  <text x=\"4\" y=\"{}\" font-size=\"10\" font-family=\"monospace\">{s}</text>",
            y + 3
        )?;
    }
    writeln!(
        svg,
        "  <polyline fill=\"none\" stroke=\"#444444\" stroke-width=\"1\" points=\"{}\"/>",
        polyline(labels)
    )?;
    writeln!(
        svg,
        "  <polyline fill=\"none\" stroke=\"#cc3311\" stroke-width=\"1\" points=\"{}\"/>",
        polyline(preds)
    )?;
    writeln!(svg, "</svg>")?;
    Ok((csv_path, svg_path))
}

/// Reads back a hypnogram CSV as (epoch_index, truth, prediction) rows.
pub fn read_hypnogram_csv(path: &Path) -> Result<Vec<(usize, Stage, Stage)>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        let mut parts = line.split(',');
        let parse_stage = |s: Option<&str>| {
            s.and_then(|name| Stage::ALL.iter().find(|st| st.name() == name).copied())
        };
        let idx: usize = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| EvalError::Config(format!("{path:?}:{lineno}: bad index")))?;
        let truth = parse_stage(parts.next())
            .ok_or_else(|| EvalError::Config(format!("{path:?}:{lineno}: bad true stage")))?;
        let pred = parse_stage(parts.next())
            .ok_or_else(|| EvalError::Config(format!("{path:?}:{lineno}: bad predicted stage")))?;
        rows.push((idx, truth, pred));
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// Stage predictions for every epoch of a subject, or `None` where a
/// contiguous run is shorter than the sequence length. Runs are covered by
/// non-overlapping windows plus a final window anchored at the run end;
/// later windows overwrite earlier ones on overlap.
pub fn predict_dataset(net: &SleepNet, dataset: &SubjectDataset) -> Result<Vec<Option<Stage>>> {
    let n = net.cfg.seq_len;
    let mut out: Vec<Option<Stage>> = vec![None; dataset.len()];
    const WINDOW_CHUNK: usize = 16;

    for run in dataset.contiguous_runs() {
        let len = run.end - run.start;
        if len < n {
            continue;
        }
        let mut starts: Vec<usize> = (run.start..=run.end - n).step_by(n).collect();
        if (run.end - run.start) % n != 0 {
            starts.push(run.end - n);
        }
        for chunk in starts.chunks(WINDOW_CHUNK) {
            let seqs: Vec<&[crate::ingest::EpochRecord]> = chunk
                .iter()
                .map(|&s| &dataset.epochs[s..s + n])
                .collect();
            let batch = SequenceBatch::from_sequences(&seqs)?;
            let mut rng = ChaCha8Rng::seed_from_u64(0); // eval mode: unused
            let fwd = crate::tensor::no_grad(|| net.forward_batch(&batch, Mode::Eval, &mut rng))?;
            for (tau, probs) in fwd.stage_probs.iter().enumerate() {
                let rows = probs.to_vec();
                let c = net.cfg.classes;
                for (wi, &start) in chunk.iter().enumerate() {
                    let row = &rows[wi * c..(wi + 1) * c];
                    let arg = (0..c)
                        .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                        .unwrap();
                    out[start + tau] = Stage::from_index(arg);
                }
            }
        }
    }
    Ok(out)
}

/// Pooled (prediction, label) pairs over all covered epochs of a dataset.
pub fn predict_pairs(net: &SleepNet, dataset: &SubjectDataset) -> Result<(Vec<Stage>, Vec<Stage>)> {
    let preds = predict_dataset(net, dataset)?;
    let mut p = Vec::new();
    let mut l = Vec::new();
    for (pred, epoch) in preds.iter().zip(&dataset.epochs) {
        if let Some(stage) = pred {
            p.push(*stage);
            l.push(epoch.label);
        }
    }
    Ok((p, l))
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

pub struct FoldReport {
    pub fold: usize,
    pub test_subjects: Vec<String>,
    pub report: EvalReport,
    pub history: TrainHistory,
}

pub struct CvOutcome {
    pub folds: Vec<FoldReport>,
    pub aggregate: EvalReport,
}

/// Derives the per-fold RNG stream from the base seed.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_add((fold as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Trains one fold (holding out one training subject for validation) and
/// evaluates on the fold's test subjects. Returns the fold report plus the
/// per-subject prediction/label sequences for pooling.
#[allow(clippy::type_complexity)]
pub fn run_fold(
    datasets: &[SubjectDataset],
    net_cfg: &NetConfig,
    train_cfg: &TrainConfig,
    plan: &FoldPlan,
    fold: usize,
) -> Result<(FoldReport, Vec<(Vec<Stage>, Vec<Stage>)>)> {
    let wrap = |e: EvalError| EvalError::Fold {
        fold,
        source: Box::new(e),
    };
    let test_ids = plan.test_subjects(fold);
    let train_ids = plan.train_subjects(fold);
    if test_ids.is_empty() || train_ids.len() < 2 {
        return Err(wrap(EvalError::Config(
            "fold needs at least one test and two non-test subjects".into(),
        )));
    }
    let by_id = |id: &str| datasets.iter().find(|d| d.subject_id == id);

    // hold out one training subject for validation, fold-deterministically
    let mut rng = ChaCha8Rng::seed_from_u64(fold_seed(train_cfg.seed, fold));
    let mut pool: Vec<&str> = train_ids.clone();
    pool.shuffle(&mut rng);
    let (val_ids, fit_ids) = pool.split_at(1);

    let fit: Vec<&SubjectDataset> = fit_ids.iter().filter_map(|id| by_id(id)).collect();
    let val: Vec<&SubjectDataset> = val_ids.iter().filter_map(|id| by_id(id)).collect();
    let mut cfg = train_cfg.clone();
    cfg.seed = fold_seed(train_cfg.seed, fold);
    let outcome = train::train(&fit, &val, net_cfg.clone(), &cfg).map_err(|e| wrap(e.into()))?;

    let mut per_subject = Vec::new();
    for id in &test_ids {
        let ds = by_id(id).ok_or_else(|| {
            wrap(EvalError::Config(format!("unknown test subject '{id}'")))
        })?;
        let pairs = predict_pairs(&outcome.net, ds).map_err(wrap)?;
        per_subject.push(pairs);
    }
    let preds: Vec<Stage> = per_subject.iter().flat_map(|(p, _)| p.clone()).collect();
    let labels: Vec<Stage> = per_subject.iter().flat_map(|(_, l)| l.clone()).collect();
    let mut report = metrics(&preds, &labels).map_err(wrap)?;
    let (t, nt) = transition_analysis(&per_subject).map_err(wrap)?;
    report.transition = t;
    report.non_transition = nt;
    Ok((
        FoldReport {
            fold,
            test_subjects: test_ids.iter().map(|s| s.to_string()).collect(),
            report,
            history: outcome.history,
        },
        per_subject,
    ))
}

/// Trains and evaluates every fold, pooling all test predictions before
/// computing the aggregate report.
pub fn run_cv(
    datasets: &[SubjectDataset],
    net_cfg: &NetConfig,
    train_cfg: &TrainConfig,
    plan: &FoldPlan,
) -> Result<CvOutcome> {
    let mut folds = Vec::new();
    let mut pooled: Vec<(Vec<Stage>, Vec<Stage>)> = Vec::new();
    for fold in 0..plan.k {
        let (report, mut per_subject) = run_fold(datasets, net_cfg, train_cfg, plan, fold)?;
        folds.push(report);
        pooled.append(&mut per_subject);
    }
    let preds: Vec<Stage> = pooled.iter().flat_map(|(p, _)| p.clone()).collect();
    let labels: Vec<Stage> = pooled.iter().flat_map(|(_, l)| l.clone()).collect();
    let mut aggregate = metrics(&preds, &labels)?;
    let (t, nt) = transition_analysis(&pooled)?;
    aggregate.transition = t;
    aggregate.non_transition = nt;
    Ok(CvOutcome { folds, aggregate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Stage::*;

    #[test]
    fn loso_plan_tests_each_subject_once() {
        let ids: Vec<String> = (0..20).map(|i| format!("s{i:02}")).collect();
        let plan = kfold_split(&ids, 20, 7).unwrap();
        for fold in 0..20 {
            assert_eq!(plan.test_subjects(fold).len(), 1);
        }
        let plan2 = kfold_split(&ids, 20, 7).unwrap();
        assert_eq!(plan.assignments(), plan2.assignments());
    }

    #[test]
    fn degenerate_fold_counts_are_rejected() {
        let ids: Vec<String> = (0..4).map(|i| format!("s{i}")).collect();
        assert!(kfold_split(&ids, 1, 0).is_err());
        assert!(kfold_split(&ids, 5, 0).is_err());
    }

    #[test]
    fn perfect_predictions_score_one() {
        let labels = vec![W, N1, N2, N3, Rem, N2, N2];
        let r = metrics(&labels, &labels).unwrap();
        assert_eq!(r.acc, 1.0);
        assert_eq!(r.mf1, 1.0);
    }

    #[test]
    fn hand_computed_small_case() {
        let labels = vec![W, W, N1, N1];
        let preds = vec![W, N1, N1, N1];
        let r = metrics(&preds, &labels).unwrap();
        assert!((r.acc - 0.75).abs() < 1e-12);
        let f1 = r.per_class_f1.as_array();
        assert!((f1[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((f1[1] - 0.8).abs() < 1e-12);
        assert_eq!(f1[2], 0.0);
        // absent classes stay in the macro mean
        assert!((r.mf1 - (2.0 / 3.0 + 0.8) / 5.0).abs() < 1e-12);
        assert_eq!(r.warnings.len(), 3);
    }

    #[test]
    fn acc_equals_trace_over_total() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let labels: Vec<Stage> = (0..500).map(|_| Stage::ALL[rng.gen_range(0..5)]).collect();
        let preds: Vec<Stage> = (0..500).map(|_| Stage::ALL[rng.gen_range(0..5)]).collect();
        let r = metrics(&preds, &labels).unwrap();
        let trace: usize = (0..5).map(|i| r.confusion[i][i]).sum();
        let total: usize = r.confusion.iter().flatten().sum();
        assert_eq!(total, 500);
        assert!((r.acc - trace as f64 / total as f64).abs() < 1e-15);
    }

    #[test]
    fn transition_partition_shares_sum_to_one() {
        let labels = vec![W, W, N1, N1, N2, N2, N2, N3];
        let preds = vec![W, N1, N1, N1, N2, N2, N3, N3];
        let (t, nt) = transition_analysis(&[(preds, labels)]).unwrap();
        assert!((t.share + nt.share - 1.0).abs() < 1e-12);
        assert!(t.rate >= 0.0 && t.rate <= 1.0);
    }

    #[test]
    fn perfect_predictions_have_zero_error_rates() {
        let labels = vec![W, N1, N1, N2, N2, N2];
        let (t, nt) = transition_analysis(&[(labels.clone(), labels)]).unwrap();
        assert_eq!(t.rate, 0.0);
        assert_eq!(nt.rate, 0.0);
    }

    #[test]
    fn hypnogram_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("subject0");
        let labels = vec![W, N1, N2];
        let preds = vec![W, W, N2];
        let (csv, svg) = hypnogram_export(&preds, &labels, &stem).unwrap();

        let text = std::fs::read_to_string(&csv).unwrap();
        assert_eq!(text.lines().count(), 4); // header + 3 rows

        let svg_text = std::fs::read_to_string(&svg).unwrap();
        assert_eq!(svg_text.matches("<polyline").count(), 2);

        let rows = read_hypnogram_csv(&csv).unwrap();
        let preds_back: Vec<Stage> = rows.iter().map(|&(_, _, p)| p).collect();
        assert_eq!(preds_back, preds);
    }

    #[test]
    fn mf1_is_permutation_invariant() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let labels: Vec<Stage> = (0..300).map(|_| Stage::ALL[rng.gen_range(0..5)]).collect();
        let preds: Vec<Stage> = (0..300).map(|_| Stage::ALL[rng.gen_range(0..5)]).collect();
        let base = metrics(&preds, &labels).unwrap().mf1;
        // rotate the class alphabet consistently on both sides
        let perm = |s: Stage| Stage::ALL[(s.index() + 2) % 5];
        let labels2: Vec<Stage> = labels.iter().map(|&s| perm(s)).collect();
        let preds2: Vec<Stage> = preds.iter().map(|&s| perm(s)).collect();
        let permuted = metrics(&preds2, &labels2).unwrap().mf1;
        assert!((base - permuted).abs() < 1e-12);
    }
}
