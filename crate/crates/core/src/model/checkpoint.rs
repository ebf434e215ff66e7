//! Binary checkpoint format.
//!
//! ```text
//! "NARCKPT1"                      8 bytes
//! config length                   u64 LE
//! config                          UTF-8 JSON
//! tensors                         f32 LE, declaration order
//! checksum                        u64 LE, FNV-1a 64 over config length..tensors
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::{ModelParams, ParamLayout};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NARCKPT1";

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &ModelParams<f32>) -> Result<()> {
    let config = serde_json::to_vec(params.config())?;
    let mut payload = Vec::with_capacity(8 + config.len() + 4 * params.num_params());
    payload.extend_from_slice(&(config.len() as u64).to_le_bytes());
    payload.extend_from_slice(&config);
    for t in params.tensors() {
        for x in t.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&payload)?;
    w.write_all(&fnv1a(&payload).to_le_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelParams<f32>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < CHECKPOINT_MAGIC.len() + 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let payload = &bytes[8..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
    let computed = fnv1a(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let config_len = u64::from_le_bytes(payload[..8].try_into().expect("8 bytes")) as usize;
    let rest = &payload[8..];
    if config_len > rest.len() {
        return Err(Error::Format("config length past end of file".into()));
    }
    let config: ModelConfig = serde_json::from_slice(&rest[..config_len])?;
    config.validate()?;
    let layout = ParamLayout::new(&config);
    let data = &rest[config_len..];
    if data.len() != 4 * layout.num_params() {
        return Err(Error::Format(format!(
            "{} tensor bytes, config needs {}",
            data.len(),
            4 * layout.num_params()
        )));
    }
    let mut floats = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let tensors = layout
        .entries
        .iter()
        .map(|(_, shape)| {
            let n = shape.iter().product();
            Tensor::new(shape, floats.by_ref().take(n).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    ModelParams::from_tensors(config, tensors)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams<f32>) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), params)
}

/// Loads a checkpoint, optionally requiring a specific config.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
    expected: Option<&ModelConfig>,
) -> Result<ModelParams<f32>> {
    let params = read_checkpoint(BufReader::new(File::open(path)?))?;
    if let Some(want) = expected {
        if params.config() != want {
            return Err(Error::InvalidConfig(format!(
                "checkpoint config {:?} differs from expected {:?}",
                params.config(),
                want
            )));
        }
    }
    Ok(params)
}
