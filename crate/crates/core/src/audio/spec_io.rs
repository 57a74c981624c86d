//! `A2KSPEC1` spectrogram dumps: magic, little-endian `u32` n_mels and
//! n_steps, then row-major little-endian `f32` values.

use std::path::Path;

use super::{MelSpectrogram, SpectrogramConfig};
use crate::error::{Error, Result};

pub const SPEC_MAGIC: &[u8; 8] = b"A2KSPEC1";

pub fn encode_spectrogram(spec: &MelSpectrogram) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + spec.values.len() * 4);
    out.extend_from_slice(SPEC_MAGIC);
    out.extend_from_slice(&(spec.n_mels as u32).to_le_bytes());
    out.extend_from_slice(&(spec.n_steps as u32).to_le_bytes());
    for v in &spec.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// The file carries no front-end parameters; `config` is attached as-is
/// apart from `n_mels`, which is taken from the header.
pub fn decode_spectrogram(bytes: &[u8], config: &SpectrogramConfig, path: &Path) -> Result<MelSpectrogram> {
    if bytes.len() < 16 || &bytes[..8] != SPEC_MAGIC {
        return Err(Error::format(path, "missing A2KSPEC1 header"));
    }
    let n_mels = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let n_steps = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() != n_mels * n_steps * 4 {
        return Err(Error::format(
            path,
            format!("expected {} value bytes, found {}", n_mels * n_steps * 4, body.len()),
        ));
    }
    let values = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let config = SpectrogramConfig {
        n_mels,
        ..config.clone()
    };
    MelSpectrogram::new(n_mels, n_steps, values, config).map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_spectrogram(path: &Path, config: &SpectrogramConfig) -> Result<MelSpectrogram> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_spectrogram(&bytes, config, path)
}

pub fn write_spectrogram(path: &Path, spec: &MelSpectrogram) -> Result<()> {
    std::fs::write(path, encode_spectrogram(spec)).map_err(|e| Error::io(path, e))
}
