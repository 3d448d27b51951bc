//! Parameter checkpoint file: a versioned flat container mapping parameter
//! name -> shape + raw little-endian f64 data, written in parameter order so
//! identical parameter sets produce identical bytes.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::params::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RFCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint while reading `{0}`")]
    Truncated(String),
    #[error("invalid utf-8 in parameter name")]
    BadName,
    #[error("duplicate parameter `{0}` in checkpoint")]
    Duplicate(String),
}

pub fn save(path: &Path, params: &ParamSet) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamSet, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r, "header")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = read_u32(&mut r, "header")?;
    let mut set = ParamSet::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r, "name length")? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)
            .map_err(|_| CheckpointError::Truncated("name".into()))?;
        let name = String::from_utf8(name_buf).map_err(|_| CheckpointError::BadName)?;
        let ndim = read_u32(&mut r, &name)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)
                .map_err(|_| CheckpointError::Truncated(name.clone()))?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)
                .map_err(|_| CheckpointError::Truncated(name.clone()))?;
            data.push(f64::from_le_bytes(b));
        }
        let tensor = Tensor::from_vec(&shape, data).expect("shape/data consistent by construction");
        set.add(name.clone(), tensor)
            .map_err(|_| CheckpointError::Duplicate(name))?;
    }
    Ok(set)
}

fn read_u32<R: Read>(r: &mut R, ctx: &str) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| CheckpointError::Truncated(ctx.to_string()))?;
    Ok(u32::from_le_bytes(b))
}
