//! Flat binary parameter container.
//!
//! Layout: magic `"TSLP"`, version `u32`, tensor count `u32`, then per
//! tensor: name length `u32` + UTF-8 name, rank `u32`, dims as `u32`, raw
//! 32-bit floats. All integers and floats little-endian. Reading a file and
//! writing it back reproduces the bytes exactly.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::adam::ModelParams;

pub const MAGIC: [u8; 4] = *b"TSLP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: expected \"TSLP\", got {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("checkpoint does not match model: {0}")]
    Mismatch(String),
}

/// One tensor as stored on disk.
pub struct StoredTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub values: Vec<f32>,
}

pub fn write_to<W: Write>(mut w: W, tensors: &[StoredTensor]) -> Result<(), CheckpointError> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
        for d in &t.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        for v in &t.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_from<R: Read>(mut r: R) -> Result<Vec<StoredTensor>, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let count = read_u32(&mut r)?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf).map_err(|_| CheckpointError::BadName)?;
        let rank = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut r)?);
        }
        let numel: usize = dims.iter().map(|&d| d as usize).product();
        let mut values = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            values.push(f32::from_le_bytes(buf));
        }
        tensors.push(StoredTensor { name, dims, values });
    }
    Ok(tensors)
}

/// Serializes every registered tensor, in registration order, as f32.
pub fn save_params(params: &ModelParams, path: &Path) -> Result<(), CheckpointError> {
    let tensors: Vec<StoredTensor> = params
        .iter()
        .map(|e| StoredTensor {
            name: e.name.clone(),
            dims: e.tensor.shape().iter().map(|&d| d as u32).collect(),
            values: e.tensor.to_vec().iter().map(|&v| v as f32).collect(),
        })
        .collect();
    let file = File::create(path)?;
    write_to(BufWriter::new(file), &tensors)
}

/// Loads a checkpoint into an already-constructed model, checking that every
/// stored tensor matches a registered one by name and shape and that no
/// registered tensor is left unset.
pub fn load_params(params: &ModelParams, path: &Path) -> Result<(), CheckpointError> {
    let file = File::open(path)?;
    let stored = read_from(BufReader::new(file))?;
    if stored.len() != params.len() {
        return Err(CheckpointError::Mismatch(format!(
            "checkpoint has {} tensors, model has {}",
            stored.len(),
            params.len()
        )));
    }
    for st in &stored {
        let t = params.get(&st.name).ok_or_else(|| {
            CheckpointError::Mismatch(format!("unknown tensor '{}'", st.name))
        })?;
        let shape: Vec<u32> = t.shape().iter().map(|&d| d as u32).collect();
        if shape != st.dims {
            return Err(CheckpointError::Mismatch(format!(
                "tensor '{}' has shape {:?}, checkpoint stores {:?}",
                st.name, shape, st.dims
            )));
        }
        let data: Vec<f64> = st.values.iter().map(|&v| v as f64).collect();
        t.set_data(&data).map_err(|e| {
            CheckpointError::Mismatch(format!("tensor '{}': {e}", st.name))
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn file_round_trip_is_bit_exact() {
        let tensors = vec![
            StoredTensor {
                name: "a.weight".into(),
                dims: vec![2, 3],
                values: vec![1.0, -2.5, 3.25, 0.1, 1e-7, -0.0],
            },
            StoredTensor {
                name: "a.bias".into(),
                dims: vec![2],
                values: vec![0.5, -0.5],
            },
        ];
        let mut bytes = Vec::new();
        write_to(&mut bytes, &tensors).unwrap();
        let parsed = read_from(bytes.as_slice()).unwrap();
        let mut bytes2 = Vec::new();
        write_to(&mut bytes2, &parsed).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn save_load_through_model_params() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tslp");
        let mut p = ModelParams::new();
        let w = p.register(
            "fc.weight",
            Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            true,
        );
        save_params(&p, &path).unwrap();
        w.set_data(&[0.0; 4]).unwrap();
        load_params(&p, &path).unwrap();
        assert_eq!(w.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tslp");
        let mut p = ModelParams::new();
        p.register("fc.weight", Tensor::zeros(vec![2, 2]), true);
        save_params(&p, &path).unwrap();

        let mut other = ModelParams::new();
        other.register("fc.weight", Tensor::zeros(vec![3, 2]), true);
        let err = load_params(&other, &path).unwrap_err();
        assert!(err.to_string().contains("fc.weight"), "{err}");
    }

    #[test]
    fn rejects_wrong_magic() {
        let bytes = b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00";
        assert!(matches!(
            read_from(&bytes[..]),
            Err(CheckpointError::BadMagic(_))
        ));
    }
}
