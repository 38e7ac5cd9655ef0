//! Single-channel EEG sleep staging, end to end: a self-contained
//! reverse-mode autodiff engine, EDF/EDF+ ingestion with the standard
//! preprocessing chain, an attention-based multi-scale staging network with
//! two auxiliary heads, and a training/evaluation harness with
//! leave-one-subject-out cross-validation.

pub mod ingest;
pub mod eval;
pub mod model;
pub mod train;
pub mod tensor;
