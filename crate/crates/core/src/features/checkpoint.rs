//! Model checkpoint serialisation.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic      4 bytes  "HERM"
//! version    u32      format version, currently 1
//! desc_len   u32      byte length of the architecture descriptor
//! descriptor UTF-8    JSON-serialised [`Arch`]
//! values     f32 * (n_params + n_running)
//! ```
//!
//! The value block holds the trainable parameters in canonical flat order
//! followed by the normalisation running statistics. Values are stored in
//! single precision; because loading widens each value back losslessly,
//! save -> load -> save reproduces the file byte for byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::model::{Arch, FeatureModel};
use super::FeatureError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HERM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes the model's architecture, parameters, and running statistics.
pub fn save_model(model: &FeatureModel, path: &Path) -> Result<(), FeatureError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    let descriptor = serde_json::to_vec(&model.arch)
        .map_err(|e| FeatureError::BadCheckpoint(format!("descriptor serialisation: {e}")))?;
    w.write_u32::<LittleEndian>(descriptor.len() as u32)?;
    w.write_all(&descriptor)?;
    for v in model.params_flat().into_iter().chain(model.running_flat()) {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint and rebuilds the model it describes. The value count
/// must match the architecture exactly.
pub fn load_model(path: &Path) -> Result<FeatureModel, FeatureError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(FeatureError::BadCheckpoint(format!(
            "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(FeatureError::BadCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let desc_len = r.read_u32::<LittleEndian>()? as usize;
    let mut descriptor = vec![0u8; desc_len];
    r.read_exact(&mut descriptor)?;
    let arch: Arch = serde_json::from_slice(&descriptor)
        .map_err(|e| FeatureError::BadCheckpoint(format!("descriptor parse: {e}")))?;
    arch.validate()
        .map_err(|e| FeatureError::BadCheckpoint(format!("invalid architecture: {e}")))?;

    let mut model = FeatureModel::new(arch, 0)?;
    let expected = model.n_params() + model.n_running();
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if rest.len() != expected * 4 {
        return Err(FeatureError::BadCheckpoint(format!(
            "value block holds {} bytes, architecture needs {} values",
            rest.len(),
            expected
        )));
    }
    let mut values = Vec::with_capacity(expected);
    for chunk in rest.chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    let n = model.n_params();
    model.set_params_flat(&values[..n])?;
    model.set_running_flat(&values[n..])?;
    Ok(model)
}
