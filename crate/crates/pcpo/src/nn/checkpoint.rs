//! Flat binary parameter checkpoints.
//!
//! Layout (little-endian): magic `"PCPO"`, version `u32`, spec hash `u64`,
//! parameter count `u64`, then the parameter values as 64-bit floats in
//! flattening order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::{MlpSpec, ParamVector};

pub const MAGIC: [u8; 4] = *b"PCPO";
pub const VERSION: u32 = 1;

pub fn save(path: &Path, spec: &MlpSpec, params: &ParamVector) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(Error::DimensionMismatch {
            context: "checkpoint parameters",
            expected: spec.param_count(),
            actual: params.len(),
        });
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&spec.spec_hash().to_le_bytes())?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for v in params.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint, verifying magic, version, spec hash and count against
/// the expected architecture.
pub fn load(path: &Path, expected: &MlpSpec) -> Result<ParamVector> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?} in {}",
            magic,
            path.display()
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)?;
    let hash = u64::from_le_bytes(u64buf);
    if hash != expected.spec_hash() {
        return Err(Error::Checkpoint(
            "spec hash mismatch: checkpoint was written for a different architecture".into(),
        ));
    }
    r.read_exact(&mut u64buf)?;
    let count = u64::from_le_bytes(u64buf) as usize;
    if count != expected.param_count() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: checkpoint has {count}, spec needs {}",
            expected.param_count()
        )));
    }
    let mut values = Vec::with_capacity(count);
    let mut f64buf = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut f64buf)?;
        values.push(f64::from_le_bytes(f64buf));
    }
    Ok(ParamVector::from_vec(values))
}
