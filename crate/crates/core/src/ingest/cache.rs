//! Preprocessed per-subject cache.
//!
//! Layout: magic `"TSDS"`, epoch count `u32` little-endian, then per epoch a
//! label byte followed by 3000 `f32` little-endian samples.
//!
//! The format does not carry `epoch_index`, so discard gaps are not
//! representable: a reloaded subject is treated as one contiguous run.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{EpochRecord, IngestError, Stage, SubjectDataset, SAMPLES_PER_EPOCH};

pub const CACHE_MAGIC: [u8; 4] = *b"TSDS";

pub fn write_cache(path: &Path, dataset: &SubjectDataset) -> Result<(), IngestError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CACHE_MAGIC)?;
    w.write_all(&(dataset.epochs.len() as u32).to_le_bytes())?;
    for e in &dataset.epochs {
        debug_assert_eq!(e.samples.len(), SAMPLES_PER_EPOCH);
        w.write_all(&[e.label.index() as u8])?;
        for s in &e.samples {
            w.write_all(&s.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_cache(path: &Path, subject_id: &str) -> Result<SubjectDataset, IngestError> {
    let bad = |msg: String| IngestError::BadCache {
        path: path.display().to_string(),
        msg,
    };
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CACHE_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let mut count_buf = [0u8; 4];
    r.read_exact(&mut count_buf)?;
    let count = u32::from_le_bytes(count_buf) as usize;
    let mut epochs = Vec::with_capacity(count);
    let mut sample_buf = vec![0u8; SAMPLES_PER_EPOCH * 4];
    for idx in 0..count {
        let mut label_byte = [0u8; 1];
        r.read_exact(&mut label_byte)?;
        let label = Stage::from_index(label_byte[0] as usize)
            .ok_or_else(|| bad(format!("epoch {idx}: bad label byte {}", label_byte[0])))?;
        r.read_exact(&mut sample_buf)?;
        let samples: Vec<f32> = sample_buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        epochs.push(EpochRecord {
            samples,
            label,
            subject_id: subject_id.to_string(),
            epoch_index: idx,
        });
    }
    Ok(SubjectDataset {
        subject_id: subject_id.to_string(),
        epochs,
    })
}
