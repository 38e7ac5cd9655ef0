//! EDF/EDF+ reader and writer.
//!
//! The reader parses the fixed-width ASCII header (256 bytes plus 256 per
//! signal), converts 16-bit little-endian samples to physical units via the
//! per-signal affine map, and keeps the raw digital values so a write/parse
//! cycle is bit-exact. Annotation signals ("EDF Annotations") are kept as
//! raw bytes for TAL parsing.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EdfError {
    #[error("truncated file at byte {offset}: need {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("non-numeric header field '{field}' at byte {offset}: {text:?}")]
    NonNumeric {
        field: &'static str,
        offset: usize,
        text: String,
    },
    #[error("signal {signal}: physical_min == physical_max at byte {offset}")]
    DegenerateRange { signal: usize, offset: usize },
    #[error("signal {signal}: digital_min == digital_max at byte {offset}")]
    DegenerateDigitalRange { signal: usize, offset: usize },
    #[error("malformed annotation at byte {offset}: {msg}")]
    BadAnnotation { offset: usize, msg: String },
    #[error("header field '{field}' value {value:?} does not fit in {width} ASCII bytes")]
    FieldTooWide {
        field: &'static str,
        value: String,
        width: usize,
    },
}

pub const ANNOTATION_LABEL: &str = "EDF Annotations";

#[derive(Debug, Clone)]
pub struct EdfSignal {
    pub label: String,
    pub transducer: String,
    pub physical_dim: String,
    pub physical_min: f64,
    pub physical_max: f64,
    pub digital_min: i32,
    pub digital_max: i32,
    pub prefilter: String,
    pub samples_per_record: usize,
    /// Raw 16-bit samples, concatenated over records.
    pub digital: Vec<i16>,
    /// Digital samples mapped to physical units (empty for annotations).
    pub physical: Vec<f64>,
}

impl EdfSignal {
    pub fn is_annotation(&self) -> bool {
        self.label.trim() == ANNOTATION_LABEL
    }

    /// Raw byte stream of an annotation signal (two bytes per sample).
    pub fn raw_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.digital.len() * 2);
        for s in &self.digital {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct EdfRecording {
    pub version: String,
    pub patient: String,
    pub recording: String,
    pub start_date: String,
    pub start_time: String,
    pub reserved: String,
    pub num_records: usize,
    pub record_duration_sec: f64,
    pub signals: Vec<EdfSignal>,
}

impl EdfRecording {
    /// First non-annotation signal whose label contains `needle`, else the
    /// first non-annotation signal.
    pub fn find_signal(&self, needle: &str) -> Option<&EdfSignal> {
        self.signals
            .iter()
            .find(|s| !s.is_annotation() && s.label.contains(needle))
            .or_else(|| self.signals.iter().find(|s| !s.is_annotation()))
    }

    pub fn annotation_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for s in self.signals.iter().filter(|s| s.is_annotation()) {
            out.extend_from_slice(&s.raw_bytes());
        }
        out
    }
}

fn field<'a>(bytes: &'a [u8], offset: usize, width: usize) -> Result<&'a [u8], EdfError> {
    if offset + width > bytes.len() {
        return Err(EdfError::Truncated {
            offset: bytes.len(),
            needed: offset + width - bytes.len(),
        });
    }
    Ok(&bytes[offset..offset + width])
}

fn ascii_field(bytes: &[u8], offset: usize, width: usize) -> Result<String, EdfError> {
    Ok(String::from_utf8_lossy(field(bytes, offset, width)?)
        .trim()
        .to_string())
}

fn int_field(
    bytes: &[u8],
    offset: usize,
    width: usize,
    name: &'static str,
) -> Result<i64, EdfError> {
    let text = ascii_field(bytes, offset, width)?;
    text.parse::<i64>().map_err(|_| EdfError::NonNumeric {
        field: name,
        offset,
        text,
    })
}

fn float_field(
    bytes: &[u8],
    offset: usize,
    width: usize,
    name: &'static str,
) -> Result<f64, EdfError> {
    let text = ascii_field(bytes, offset, width)?;
    text.parse::<f64>().map_err(|_| EdfError::NonNumeric {
        field: name,
        offset,
        text,
    })
}

/// Parses a complete EDF/EDF+ byte buffer.
pub fn parse_edf(bytes: &[u8]) -> Result<EdfRecording, EdfError> {
    let version = ascii_field(bytes, 0, 8)?;
    let patient = ascii_field(bytes, 8, 80)?;
    let recording = ascii_field(bytes, 88, 80)?;
    let start_date = ascii_field(bytes, 168, 8)?;
    let start_time = ascii_field(bytes, 176, 8)?;
    let _header_bytes = int_field(bytes, 184, 8, "header_bytes")?;
    let reserved = ascii_field(bytes, 192, 44)?;
    let num_records_raw = int_field(bytes, 236, 8, "num_records")?;
    let record_duration_sec = float_field(bytes, 244, 8, "record_duration")?;
    let ns = int_field(bytes, 252, 4, "num_signals")?;
    if ns < 0 {
        return Err(EdfError::NonNumeric {
            field: "num_signals",
            offset: 252,
            text: ns.to_string(),
        });
    }
    let ns = ns as usize;

    // Per-signal header is organized field by field, not signal by signal.
    let base = 256;
    let off_label = base;
    let off_transducer = off_label + ns * 16;
    let off_dim = off_transducer + ns * 80;
    let off_pmin = off_dim + ns * 8;
    let off_pmax = off_pmin + ns * 8;
    let off_dmin = off_pmax + ns * 8;
    let off_dmax = off_dmin + ns * 8;
    let off_prefilter = off_dmax + ns * 8;
    let off_spr = off_prefilter + ns * 80;
    let off_reserved = off_spr + ns * 8;
    let data_start = off_reserved + ns * 32;

    let mut signals = Vec::with_capacity(ns);
    for s in 0..ns {
        let label = ascii_field(bytes, off_label + s * 16, 16)?;
        let transducer = ascii_field(bytes, off_transducer + s * 80, 80)?;
        let physical_dim = ascii_field(bytes, off_dim + s * 8, 8)?;
        let physical_min = float_field(bytes, off_pmin + s * 8, 8, "physical_min")?;
        let physical_max = float_field(bytes, off_pmax + s * 8, 8, "physical_max")?;
        let digital_min = int_field(bytes, off_dmin + s * 8, 8, "digital_min")? as i32;
        let digital_max = int_field(bytes, off_dmax + s * 8, 8, "digital_max")? as i32;
        let prefilter = ascii_field(bytes, off_prefilter + s * 80, 80)?;
        let samples_per_record = int_field(bytes, off_spr + s * 8, 8, "samples_per_record")?;
        if samples_per_record < 0 {
            return Err(EdfError::NonNumeric {
                field: "samples_per_record",
                offset: off_spr + s * 8,
                text: samples_per_record.to_string(),
            });
        }
        let is_annotation = label.trim() == ANNOTATION_LABEL;
        if !is_annotation {
            if physical_min == physical_max {
                return Err(EdfError::DegenerateRange {
                    signal: s,
                    offset: off_pmin + s * 8,
                });
            }
            if digital_min == digital_max {
                return Err(EdfError::DegenerateDigitalRange {
                    signal: s,
                    offset: off_dmin + s * 8,
                });
            }
        }
        signals.push(EdfSignal {
            label,
            transducer,
            physical_dim,
            physical_min,
            physical_max,
            digital_min,
            digital_max,
            prefilter,
            samples_per_record: samples_per_record as usize,
            digital: Vec::new(),
            physical: Vec::new(),
        });
    }

    let record_bytes: usize = signals.iter().map(|s| s.samples_per_record * 2).sum();
    let num_records = if num_records_raw < 0 {
        // EDF+ allows -1: derive from the payload size.
        if record_bytes == 0 {
            0
        } else {
            (bytes.len() - data_start) / record_bytes
        }
    } else {
        num_records_raw as usize
    };
    let needed = data_start + num_records * record_bytes;
    if bytes.len() < needed {
        return Err(EdfError::Truncated {
            offset: bytes.len(),
            needed: needed - bytes.len(),
        });
    }

    for s in &mut signals {
        s.digital.reserve(num_records * s.samples_per_record);
    }
    let mut pos = data_start;
    for _ in 0..num_records {
        for s in signals.iter_mut() {
            for _ in 0..s.samples_per_record {
                let d = i16::from_le_bytes([bytes[pos], bytes[pos + 1]]);
                s.digital.push(d);
                pos += 2;
            }
        }
    }
    for s in signals.iter_mut() {
        if !s.is_annotation() {
            let scale =
                (s.physical_max - s.physical_min) / (s.digital_max as f64 - s.digital_min as f64);
            s.physical = s
                .digital
                .iter()
                .map(|&d| s.physical_min + (d as f64 - s.digital_min as f64) * scale)
                .collect();
        }
    }

    Ok(EdfRecording {
        version,
        patient,
        recording,
        start_date,
        start_time,
        reserved,
        num_records,
        record_duration_sec,
        signals,
    })
}

fn put_ascii(
    buf: &mut Vec<u8>,
    value: &str,
    width: usize,
    name: &'static str,
) -> Result<(), EdfError> {
    if value.len() > width {
        return Err(EdfError::FieldTooWide {
            field: name,
            value: value.to_string(),
            width,
        });
    }
    buf.extend_from_slice(value.as_bytes());
    buf.extend(std::iter::repeat_n(b' ', width - value.len()));
    Ok(())
}

fn fmt_float(v: f64, width: usize, name: &'static str) -> Result<String, EdfError> {
    // shortest representation that round-trips within the field width
    let mut s = format!("{v}");
    if s.len() > width {
        for prec in (0..width).rev() {
            s = format!("{v:.prec$}");
            if s.len() <= width && s.parse::<f64>().is_ok() {
                break;
            }
        }
    }
    if s.len() > width {
        return Err(EdfError::FieldTooWide {
            field: name,
            value: s,
            width,
        });
    }
    Ok(s)
}

/// Serializes a recording back to EDF bytes from the stored digital samples.
/// `parse_edf(write_edf(r))` reproduces every sample bit-exactly.
pub fn write_edf(rec: &EdfRecording) -> Result<Vec<u8>, EdfError> {
    let ns = rec.signals.len();
    let header_bytes = 256 + ns * 256;
    let mut out = Vec::with_capacity(header_bytes);
    put_ascii(&mut out, &rec.version, 8, "version")?;
    put_ascii(&mut out, &rec.patient, 80, "patient")?;
    put_ascii(&mut out, &rec.recording, 80, "recording")?;
    put_ascii(&mut out, &rec.start_date, 8, "start_date")?;
    put_ascii(&mut out, &rec.start_time, 8, "start_time")?;
    put_ascii(&mut out, &header_bytes.to_string(), 8, "header_bytes")?;
    put_ascii(&mut out, &rec.reserved, 44, "reserved")?;
    put_ascii(&mut out, &rec.num_records.to_string(), 8, "num_records")?;
    put_ascii(
        &mut out,
        &fmt_float(rec.record_duration_sec, 8, "record_duration")?,
        8,
        "record_duration",
    )?;
    put_ascii(&mut out, &ns.to_string(), 4, "num_signals")?;

    macro_rules! column {
        ($width:expr, $name:expr, $f:expr) => {
            for s in &rec.signals {
                #[allow(clippy::redundant_closure_call)]
                let v: String = $f(s);
                put_ascii(&mut out, &v, $width, $name)?;
            }
        };
    }
    column!(16, "label", |s: &EdfSignal| s.label.clone());
    column!(80, "transducer", |s: &EdfSignal| s.transducer.clone());
    column!(8, "physical_dim", |s: &EdfSignal| s.physical_dim.clone());
    for s in &rec.signals {
        let v = fmt_float(s.physical_min, 8, "physical_min")?;
        put_ascii(&mut out, &v, 8, "physical_min")?;
    }
    for s in &rec.signals {
        let v = fmt_float(s.physical_max, 8, "physical_max")?;
        put_ascii(&mut out, &v, 8, "physical_max")?;
    }
    column!(8, "digital_min", |s: &EdfSignal| s.digital_min.to_string());
    column!(8, "digital_max", |s: &EdfSignal| s.digital_max.to_string());
    column!(80, "prefilter", |s: &EdfSignal| s.prefilter.clone());
    column!(8, "samples_per_record", |s: &EdfSignal| s
        .samples_per_record
        .to_string());
    column!(32, "signal_reserved", |_s: &EdfSignal| String::new());

    for r in 0..rec.num_records {
        for s in &rec.signals {
            let start = r * s.samples_per_record;
            for i in 0..s.samples_per_record {
                let d = s.digital.get(start + i).copied().unwrap_or(0);
                out.extend_from_slice(&d.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// One time-stamped annotation from an EDF+ TAL stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub onset_sec: f64,
    pub duration_sec: f64,
    pub text: String,
}

const TAL_TEXT_DELIM: u8 = 0x14;
const TAL_DURATION_DELIM: u8 = 0x15;

/// Parses a TAL-encoded annotation byte stream into (onset, duration, text)
/// entries in onset order. Time-keeping TALs (empty text) produce nothing.
pub fn parse_hypnogram(bytes: &[u8]) -> Result<Vec<Annotation>, EdfError> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == 0 {
            i += 1;
            continue;
        }
        let start = i;
        while i < bytes.len() && bytes[i] != 0 {
            i += 1;
        }
        parse_tal(&bytes[start..i], start, &mut out)?;
    }
    out.sort_by(|a, b| a.onset_sec.partial_cmp(&b.onset_sec).unwrap());
    Ok(out)
}

fn parse_tal(tal: &[u8], offset: usize, out: &mut Vec<Annotation>) -> Result<(), EdfError> {
    let mut fields = tal.split(|&b| b == TAL_TEXT_DELIM);
    let time = fields.next().ok_or_else(|| EdfError::BadAnnotation {
        offset,
        msg: "empty TAL".into(),
    })?;
    if tal.iter().filter(|&&b| b == TAL_TEXT_DELIM).count() == 0 {
        return Err(EdfError::BadAnnotation {
            offset,
            msg: "missing text delimiter (0x14)".into(),
        });
    }
    if time.first() != Some(&b'+') && time.first() != Some(&b'-') {
        return Err(EdfError::BadAnnotation {
            offset,
            msg: "onset must start with '+' or '-'".into(),
        });
    }
    let mut time_parts = time
        .split(|&b| b == TAL_DURATION_DELIM)
        .filter(|p| !p.is_empty());
    let onset_txt = String::from_utf8_lossy(time_parts.next().unwrap_or_default()).to_string();
    let onset_sec: f64 = onset_txt.parse().map_err(|_| EdfError::BadAnnotation {
        offset,
        msg: format!("bad onset {onset_txt:?}"),
    })?;
    let duration_sec = match time_parts.next() {
        Some(d) => {
            let txt = String::from_utf8_lossy(d).to_string();
            txt.parse().map_err(|_| EdfError::BadAnnotation {
                offset,
                msg: format!("bad duration {txt:?}"),
            })?
        }
        None => 0.0,
    };
    for text in fields {
        if text.is_empty() {
            continue;
        }
        out.push(Annotation {
            onset_sec,
            duration_sec,
            text: String::from_utf8_lossy(text).to_string(),
        });
    }
    Ok(())
}

/// Encodes annotations as a TAL stream, padded to `2 * samples` bytes.
/// Used by the synthetic fixture writer.
pub fn encode_tal(annotations: &[Annotation], samples: usize) -> Result<Vec<u8>, EdfError> {
    let mut bytes = Vec::new();
    // mandatory time-keeping TAL for the record start
    bytes.extend_from_slice(b"+0");
    bytes.push(TAL_TEXT_DELIM);
    bytes.push(TAL_TEXT_DELIM);
    bytes.push(0);
    for a in annotations {
        let mut s = String::new();
        let _ = write!(s, "+{}", a.onset_sec);
        bytes.extend_from_slice(s.as_bytes());
        if a.duration_sec > 0.0 {
            bytes.push(TAL_DURATION_DELIM);
            bytes.extend_from_slice(format!("{}", a.duration_sec).as_bytes());
        }
        bytes.push(TAL_TEXT_DELIM);
        bytes.extend_from_slice(a.text.as_bytes());
        bytes.push(TAL_TEXT_DELIM);
        bytes.push(0);
    }
    if bytes.len() > samples * 2 {
        return Err(EdfError::BadAnnotation {
            offset: bytes.len(),
            msg: format!(
                "annotations need {} bytes but the signal holds {}",
                bytes.len(),
                samples * 2
            ),
        });
    }
    bytes.resize(samples * 2, 0);
    Ok(bytes)
}

/// Builds an annotation signal from raw TAL bytes.
pub fn annotation_signal(tal_bytes: &[u8], samples_per_record: usize) -> EdfSignal {
    let mut digital = Vec::with_capacity(tal_bytes.len() / 2);
    for chunk in tal_bytes.chunks(2) {
        let lo = chunk[0];
        let hi = chunk.get(1).copied().unwrap_or(0);
        digital.push(i16::from_le_bytes([lo, hi]));
    }
    EdfSignal {
        label: ANNOTATION_LABEL.into(),
        transducer: String::new(),
        physical_dim: String::new(),
        physical_min: -1.0,
        physical_max: 1.0,
        digital_min: -32768,
        digital_max: 32767,
        prefilter: String::new(),
        samples_per_record,
        digital,
        physical: Vec::new(),
    }
}
