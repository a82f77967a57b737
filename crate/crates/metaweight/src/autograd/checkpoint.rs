//! Parameter checkpoint container.
//!
//! Binary layout (all integers little-endian):
//!   magic   8 bytes  b"MWPARAM1"
//!   count   u32      number of entries
//! then per entry:
//!   name_len u32, name bytes (UTF-8)
//!   ndim     u32, dims as u64 each
//!   values   product(dims) f64, little-endian
//!
//! The same container stores model parameters, weighting-model parameters,
//! and stream checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::optim::Params;
use super::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MWPARAM1";

pub fn save_params(path: &Path, params: &Params) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<Params> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::invalid(format!(
            "{}: not a parameter checkpoint (bad magic)",
            path.display()
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut params = Params::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::invalid("checkpoint: parameter name is not UTF-8"))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        params.insert(name, Tensor::from_vec(shape, data)?);
    }
    Ok(params)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
