//! Binary checkpoint format.
//!
//! Layout, all little-endian:
//!
//! ```text
//! bytes 0..4    magic "UICL"
//! bytes 4..8    format version, u32 = 1
//! bytes 8..32   config: n_regions, hidden_dim, n_layers, n_heads, ref_dim,
//!               t_steps as six u32 values
//! bytes 32..-4  every parameter tensor as row-major f32, in the canonical
//!               order given by ParamLayout::groups()
//! last 4 bytes  CRC32 of everything after the 8-byte magic+version header
//! ```
//!
//! Parameters are computed in f64 but stored as f32; loading widens back.
//! Saving, loading, and saving again therefore produces byte-identical
//! files, and a freshly loaded model is exactly reproducible.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::params::{ModelConfig, ModelParameters, ParamLayout};

const MAGIC: &[u8; 4] = b"UICL";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 8;
const CONFIG_LEN: usize = 6 * 4;

/// Writes parameters and config to the binary checkpoint format.
pub fn save_checkpoint(params: &ModelParameters, path: impl AsRef<Path>) -> Result<()> {
    let config = params.config();
    let mut bytes = Vec::with_capacity(HEADER_LEN + CONFIG_LEN + 4 * params.param_count() + 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    for field in [
        config.n_regions,
        config.hidden_dim,
        config.n_layers,
        config.n_heads,
        config.ref_dim,
        config.t_steps,
    ] {
        let v = u32::try_from(field)
            .map_err(|_| Error::checkpoint(format!("config field {field} exceeds u32")))?;
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for (_, range) in params.layout().groups() {
        for v in &params.data()[range] {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&bytes[HEADER_LEN..]);
    bytes.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a checkpoint back, validating magic, version, shape, length, and
/// checksum.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParameters> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if bytes.len() < HEADER_LEN + CONFIG_LEN + 4 {
        return Err(Error::checkpoint(format!(
            "{}: file too short ({} bytes) to hold a header",
            path.display(),
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::checkpoint(format!(
            "{}: bad magic bytes, not a checkpoint file",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::checkpoint(format!(
            "{}: unsupported format version {version}, expected {VERSION}",
            path.display()
        )));
    }

    let mut fields = [0usize; 6];
    for (i, field) in fields.iter_mut().enumerate() {
        let off = HEADER_LEN + 4 * i;
        *field = u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as usize;
    }
    let config = ModelConfig::new(
        fields[0], fields[1], fields[2], fields[3], fields[4], fields[5],
    )
    .map_err(|e| Error::checkpoint(format!("{}: invalid config: {e}", path.display())))?;

    let count = ParamLayout::new(&config).total();
    let expected_len = HEADER_LEN + CONFIG_LEN + 4 * count + 4;
    if bytes.len() != expected_len {
        return Err(Error::checkpoint(format!(
            "{}: {} bytes, config requires exactly {expected_len} ({count} parameters)",
            path.display(),
            bytes.len()
        )));
    }

    let stored_crc = u32::from_le_bytes(
        bytes[expected_len - 4..]
            .try_into()
            .expect("4 bytes"),
    );
    let actual_crc = crc32fast::hash(&bytes[HEADER_LEN..expected_len - 4]);
    if stored_crc != actual_crc {
        return Err(Error::checkpoint(format!(
            "{}: checksum mismatch, file is corrupted",
            path.display()
        )));
    }

    let mut data = Vec::with_capacity(count);
    let tensor_bytes = &bytes[HEADER_LEN + CONFIG_LEN..expected_len - 4];
    for chunk in tensor_bytes.chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64);
    }
    ModelParameters::from_flat(config, data)
}
