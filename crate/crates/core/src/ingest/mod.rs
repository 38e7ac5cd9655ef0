//! Recording ingestion: EDF parsing, the preprocessing chain, epoch
//! segmentation and labeling, and synthetic dataset generation.
//!
//! The preprocessing order is fixed: band-pass filter, quantile normalize
//! (both per whole recording), segment into 30-s epochs, map/discard labels,
//! trim edge wake. Sequences never span a discard gap: removed epochs leave
//! holes in `epoch_index` and contiguous runs are recovered from those.

pub mod cache;
pub mod edf;
pub mod filter;

use std::fmt;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use edf::{Annotation, EdfError, EdfRecording};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error(transparent)]
    Edf(#[from] EdfError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("constant signal: interquartile range is zero")]
    ZeroIqr,
    #[error("recording contains no sleep period (all wake)")]
    NoSleepPeriod,
    #[error("unrecognized stage label {0:?}")]
    UnknownLabel(String),
    #[error("signal shorter than one epoch: {got} < {need} samples")]
    SignalTooShort { got: usize, need: usize },
    #[error("bad cache file {path}: {msg}")]
    BadCache { path: String, msg: String },
}

pub const SAMPLE_RATE_HZ: f64 = 100.0;
pub const EPOCH_SECONDS: f64 = 30.0;
pub const SAMPLES_PER_EPOCH: usize = 3000;
/// 30 minutes of wake kept on each side of the sleep period.
pub const MAX_EDGE_WAKE_EPOCHS: usize = 60;

/// The five merged sleep stages (N4 folds into N3).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    W = 0,
    N1 = 1,
    N2 = 2,
    N3 = 3,
    Rem = 4,
}

pub const NUM_STAGES: usize = 5;

impl Stage {
    pub const ALL: [Stage; NUM_STAGES] = [Stage::W, Stage::N1, Stage::N2, Stage::N3, Stage::Rem];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Stage> {
        Stage::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::W => "W",
            Stage::N1 => "N1",
            Stage::N2 => "N2",
            Stage::N3 => "N3",
            Stage::Rem => "REM",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Result of mapping an annotation string.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelOutcome {
    Keep(Stage),
    Discard,
}

/// Maps a hypnogram stage string onto the merged five-class scheme.
/// MOVEMENT and UNKNOWN epochs are discarded; N4 merges into N3.
pub fn map_labels(stage_string: &str) -> Result<LabelOutcome, IngestError> {
    use LabelOutcome::*;
    Ok(match stage_string.trim() {
        "Sleep stage W" | "W" => Keep(Stage::W),
        "Sleep stage 1" | "N1" => Keep(Stage::N1),
        "Sleep stage 2" | "N2" => Keep(Stage::N2),
        "Sleep stage 3" | "N3" => Keep(Stage::N3),
        "Sleep stage 4" | "N4" => Keep(Stage::N3),
        "Sleep stage R" | "R" | "REM" => Keep(Stage::Rem),
        "Sleep stage ?" | "UNKNOWN" => Discard,
        "Movement time" | "MOVEMENT" => Discard,
        other => return Err(IngestError::UnknownLabel(other.to_string())),
    })
}

/// One labeled 30-s epoch.
#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub samples: Vec<f32>,
    pub label: Stage,
    pub subject_id: String,
    pub epoch_index: usize,
}

/// All retained epochs of one continuous recording, in temporal order.
/// Discarded epochs leave gaps in `epoch_index`.
#[derive(Clone, Debug, Default)]
pub struct SubjectDataset {
    pub subject_id: String,
    pub epochs: Vec<EpochRecord>,
}

impl SubjectDataset {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn labels(&self) -> Vec<Stage> {
        self.epochs.iter().map(|e| e.label).collect()
    }

    /// Index ranges of epochs with contiguous `epoch_index` (a sequence
    /// never spans a discard gap).
    pub fn contiguous_runs(&self) -> Vec<Range<usize>> {
        let mut runs = Vec::new();
        let mut start = 0;
        for i in 1..self.epochs.len() {
            if self.epochs[i].epoch_index != self.epochs[i - 1].epoch_index + 1 {
                runs.push(start..i);
                start = i;
            }
        }
        if !self.epochs.is_empty() {
            runs.push(start..self.epochs.len());
        }
        runs
    }

    pub fn class_counts(&self) -> [usize; NUM_STAGES] {
        let mut counts = [0; NUM_STAGES];
        for e in &self.epochs {
            counts[e.label.index()] += 1;
        }
        counts
    }
}

/// Truncates leading and trailing wake runs so that at most
/// [`MAX_EDGE_WAKE_EPOCHS`] wake epochs remain adjacent to the sleep period.
/// Interior wake is untouched. Returns the retained index range.
pub fn trim_wake(labels: &[Stage]) -> Result<Range<usize>, IngestError> {
    let first_sleep = labels
        .iter()
        .position(|&s| s != Stage::W)
        .ok_or(IngestError::NoSleepPeriod)?;
    let last_sleep = labels.iter().rposition(|&s| s != Stage::W).unwrap();
    let start = first_sleep.saturating_sub(MAX_EDGE_WAKE_EPOCHS);
    let end = (last_sleep + 1 + MAX_EDGE_WAKE_EPOCHS).min(labels.len());
    Ok(start..end)
}

/// Segments a parsed recording into labeled, preprocessed epochs.
///
/// `channel_hint` selects the EEG signal by substring match ("Fpz-Cz" for
/// the cassette recordings); the first non-annotation signal is the
/// fallback.
pub fn segment_epochs(
    recording: &EdfRecording,
    annotations: &[Annotation],
    subject_id: &str,
    channel_hint: &str,
) -> Result<SubjectDataset, IngestError> {
    let signal = recording
        .find_signal(channel_hint)
        .ok_or_else(|| IngestError::Config("recording has no EEG signal".into()))?;
    if recording.record_duration_sec <= 0.0 {
        return Err(IngestError::Config("non-positive record duration".into()));
    }
    let fs = signal.samples_per_record as f64 / recording.record_duration_sec;
    if (fs - SAMPLE_RATE_HZ).abs() > 1e-6 {
        return Err(IngestError::Config(format!(
            "expected {SAMPLE_RATE_HZ} Hz, signal '{}' is {fs} Hz",
            signal.label
        )));
    }
    if signal.physical.len() < SAMPLES_PER_EPOCH {
        return Err(IngestError::SignalTooShort {
            got: signal.physical.len(),
            need: SAMPLES_PER_EPOCH,
        });
    }

    // filter -> quantile normalize, both over the whole recording
    let filtered = filter::bandpass_filter(&signal.physical, 0.5, 49.0, SAMPLE_RATE_HZ)?;
    let normalized = filter::quantile_normalize(&filtered)?;

    let mut tagged: Vec<(usize, Stage)> = Vec::new();
    for ann in annotations {
        let n_epochs = (ann.duration_sec / EPOCH_SECONDS).floor() as usize;
        let base = (ann.onset_sec / EPOCH_SECONDS).round() as usize;
        let outcome = map_labels(&ann.text)?;
        for j in 0..n_epochs {
            let idx = base + j;
            if (idx + 1) * SAMPLES_PER_EPOCH > normalized.len() {
                break;
            }
            if let LabelOutcome::Keep(stage) = outcome {
                tagged.push((idx, stage));
            }
        }
    }
    tagged.sort_by_key(|&(idx, _)| idx);
    tagged.dedup_by_key(|&mut (idx, _)| idx);

    let labels: Vec<Stage> = tagged.iter().map(|&(_, s)| s).collect();
    let keep = trim_wake(&labels)?;
    let epochs = tagged[keep]
        .iter()
        .map(|&(idx, stage)| {
            let start = idx * SAMPLES_PER_EPOCH;
            EpochRecord {
                samples: normalized[start..start + SAMPLES_PER_EPOCH]
                    .iter()
                    .map(|&v| v as f32)
                    .collect(),
                label: stage,
                subject_id: subject_id.to_string(),
                epoch_index: idx,
            }
        })
        .collect();
    Ok(SubjectDataset {
        subject_id: subject_id.to_string(),
        epochs,
    })
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Self-transition probability of the synthetic stage chain. With five
/// symmetric states this puts the expected transition-epoch share near
/// 1 - 0.85^2 ~ 0.28.
const SELF_TRANSITION: f64 = 0.85;

fn stage_tone(stage: Stage, i: usize, phase: f64, phase2: f64) -> f64 {
    let t = i as f64 / SAMPLE_RATE_HZ;
    let tau = std::f64::consts::TAU;
    match stage {
        Stage::W => (tau * 10.0 * t + phase).sin(),
        Stage::N1 => 0.7 * (tau * 7.0 * t + phase).sin(),
        // spindle-like: 13 Hz carrier under a slow amplitude envelope
        Stage::N2 => {
            (tau * 13.0 * t + phase).sin() * (0.55 + 0.45 * (tau * 0.5 * t + phase2).sin())
        }
        Stage::N3 => 2.2 * (tau * 1.5 * t + phase).sin(),
        Stage::Rem => 0.8 * (tau * 4.0 * t + phase).sin(),
    }
}

/// How much of a stage-change epoch still carries the previous stage's
/// waveform. The default range keeps transitions learnable; wider upper
/// bounds make them genuinely ambiguous.
#[derive(Clone, Copy, Debug)]
pub struct SynthMix {
    pub lo: f64,
    pub hi: f64,
}

impl Default for SynthMix {
    fn default() -> Self {
        SynthMix { lo: 0.25, hi: 0.6 }
    }
}

/// Deterministic synthetic cohort. Each stage carries a distinct
/// band-limited oscillation; an epoch that begins a stage change starts
/// with the previous stage's waveform for a random fraction of the epoch,
/// so transitioning epochs genuinely mix two stages.
pub fn synth_dataset(
    seed: u64,
    n_subjects: usize,
    epochs_per_subject: usize,
) -> Vec<SubjectDataset> {
    synth_dataset_mixed(seed, n_subjects, epochs_per_subject, SynthMix::default())
}

/// [`synth_dataset`] with an explicit transition-mix severity.
pub fn synth_dataset_mixed(
    seed: u64,
    n_subjects: usize,
    epochs_per_subject: usize,
    mix: SynthMix,
) -> Vec<SubjectDataset> {
    let noise = Normal::new(0.0, 0.35).unwrap();
    (0..n_subjects)
        .map(|subject| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(subject as u64 + 1);
            let subject_id = format!("synth{subject:02}");

            let mut stages = Vec::with_capacity(epochs_per_subject);
            let mut cur = Stage::ALL[rng.gen_range(0..NUM_STAGES)];
            for _ in 0..epochs_per_subject {
                stages.push(cur);
                if rng.gen::<f64>() >= SELF_TRANSITION {
                    let mut next = rng.gen_range(0..NUM_STAGES - 1);
                    if next >= cur.index() {
                        next += 1;
                    }
                    cur = Stage::ALL[next];
                }
            }

            let mut signal = Vec::with_capacity(epochs_per_subject * SAMPLES_PER_EPOCH);
            for (tau, &stage) in stages.iter().enumerate() {
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let phase2 = rng.gen_range(0.0..std::f64::consts::TAU);
                let mixed_from = if tau > 0 && stages[tau - 1] != stage {
                    let prev_phase = rng.gen_range(0.0..std::f64::consts::TAU);
                    let split = (rng.gen_range(mix.lo..mix.hi) * SAMPLES_PER_EPOCH as f64) as usize;
                    Some((stages[tau - 1], prev_phase, split))
                } else {
                    None
                };
                for i in 0..SAMPLES_PER_EPOCH {
                    let v = match mixed_from {
                        Some((prev, prev_phase, split)) if i < split => {
                            stage_tone(prev, i, prev_phase, prev_phase)
                        }
                        _ => stage_tone(stage, i, phase, phase2),
                    };
                    signal.push(v + noise.sample(&mut rng));
                }
            }

            let normalized =
                filter::quantile_normalize(&signal).expect("synthetic signal has nonzero IQR");
            let epochs = stages
                .iter()
                .enumerate()
                .map(|(idx, &label)| EpochRecord {
                    samples: normalized[idx * SAMPLES_PER_EPOCH..(idx + 1) * SAMPLES_PER_EPOCH]
                        .iter()
                        .map(|&v| v as f32)
                        .collect(),
                    label,
                    subject_id: subject_id.clone(),
                    epoch_index: idx,
                })
                .collect();
            SubjectDataset { subject_id, epochs }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_mapping_pinned_cases() {
        assert_eq!(
            map_labels("Sleep stage 4").unwrap(),
            LabelOutcome::Keep(Stage::N3)
        );
        assert_eq!(map_labels("Movement time").unwrap(), LabelOutcome::Discard);
        assert_eq!(
            map_labels("Sleep stage R").unwrap(),
            LabelOutcome::Keep(Stage::Rem)
        );
        assert_eq!(map_labels("Sleep stage ?").unwrap(), LabelOutcome::Discard);
        let err = map_labels("Sleep stage Z").unwrap_err();
        assert!(err.to_string().contains("Sleep stage Z"), "{err}");
    }

    #[test]
    fn trim_keeps_thirty_minutes_of_edge_wake() {
        let mut labels = vec![Stage::W; 100];
        labels.push(Stage::N1);
        labels.extend([Stage::N2; 5]);
        let keep = trim_wake(&labels).unwrap();
        assert_eq!(keep, 40..106);
        let kept_wake = labels[keep.clone()]
            .iter()
            .take_while(|&&s| s == Stage::W)
            .count();
        assert_eq!(kept_wake, 60);
    }

    #[test]
    fn short_wake_run_is_untouched() {
        let mut labels = vec![Stage::W; 10];
        labels.push(Stage::N2);
        let keep = trim_wake(&labels).unwrap();
        assert_eq!(keep, 0..11);
    }

    #[test]
    fn interior_wake_survives_trimming() {
        let mut labels = vec![Stage::N1; 3];
        labels.extend([Stage::W; 70]);
        labels.extend([Stage::N2; 3]);
        let keep = trim_wake(&labels).unwrap();
        assert_eq!(keep, 0..76);
        assert_eq!(labels[keep].iter().filter(|&&s| s == Stage::W).count(), 70);
    }

    #[test]
    fn all_wake_recording_is_an_error() {
        assert!(matches!(
            trim_wake(&[Stage::W; 50]),
            Err(IngestError::NoSleepPeriod)
        ));
    }

    #[test]
    fn trim_never_removes_sleep() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let labels: Vec<Stage> = (0..rng.gen_range(5..200))
                .map(|_| Stage::ALL[rng.gen_range(0..NUM_STAGES)])
                .collect();
            if let Ok(keep) = trim_wake(&labels) {
                let removed_sleep = labels[..keep.start]
                    .iter()
                    .chain(&labels[keep.end..])
                    .filter(|&&s| s != Stage::W)
                    .count();
                assert_eq!(removed_sleep, 0);
            }
        }
    }

    #[test]
    fn synth_is_deterministic_per_seed() {
        let a = synth_dataset(5, 2, 20);
        let b = synth_dataset(5, 2, 20);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.labels(), y.labels());
            for (ex, ey) in x.epochs.iter().zip(&y.epochs) {
                assert_eq!(ex.samples, ey.samples);
            }
        }
        let c = synth_dataset(6, 2, 20);
        assert_ne!(a[0].labels(), c[0].labels());
    }

    #[test]
    fn synth_covers_all_classes() {
        let data = synth_dataset(42, 4, 100);
        assert_eq!(data.iter().map(|d| d.len()).sum::<usize>(), 400);
        let mut counts = [0usize; NUM_STAGES];
        for d in &data {
            for (i, c) in d.class_counts().iter().enumerate() {
                counts[i] += c;
            }
        }
        assert!(counts.iter().all(|&c| c > 0), "class counts {counts:?}");
    }

    #[test]
    fn synth_transition_fraction_in_expected_band() {
        let data = synth_dataset(1, 10, 1000);
        let mut transitions = 0usize;
        let mut total = 0usize;
        for d in &data {
            let labels = d.labels();
            for i in 0..labels.len() {
                let before = i > 0 && labels[i - 1] != labels[i];
                let after = i + 1 < labels.len() && labels[i + 1] != labels[i];
                if before || after {
                    transitions += 1;
                }
                total += 1;
            }
        }
        let frac = transitions as f64 / total as f64;
        assert!(
            (0.10..=0.45).contains(&frac),
            "transition fraction {frac}"
        );
    }
}
