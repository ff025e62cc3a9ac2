//! Per-utterance log-mel cache: an 8-byte magic, frame count and band count as
//! little-endian u32, then row-major little-endian f32 values.

use std::fs;
use std::path::Path;

use calm_core::features::{FeatureConfig, LogMel, N_MELS};

use crate::error::{format_err, io_err, Result};

pub const MAGIC: &[u8; 8] = b"CALMFEAT";

pub fn encode(lm: &LogMel) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * lm.frames.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(lm.n_frames as u32).to_le_bytes());
    out.extend_from_slice(&(N_MELS as u32).to_le_bytes());
    for v in &lm.frames {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], cfg: &FeatureConfig, path: &Path) -> Result<LogMel> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(format_err(path, "not a feature cache file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (frames, bands) = (word(8), word(12));
    if bands != N_MELS {
        return Err(format_err(path, format!("{bands} bands, expected {N_MELS}")));
    }
    let body = &bytes[16..];
    if body.len() != frames * bands * 4 {
        return Err(format_err(path, format!("{} payload bytes for {frames}×{bands} values", body.len())));
    }
    let values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok(LogMel::raw(values, cfg)?)
}

pub fn write(path: &Path, lm: &LogMel) -> Result<()> {
    fs::write(path, encode(lm)).map_err(io_err(path))
}

pub fn read(path: &Path, cfg: &FeatureConfig) -> Result<LogMel> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes, cfg, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use calm_core::features::log_mel;

    #[test]
    fn round_trip_is_exact() {
        let cfg = FeatureConfig::default();
        let x: Vec<f32> = (0..4000).map(|i| ((i * 37 % 101) as f32 / 101.0) - 0.5).collect();
        let lm = log_mel(&x, &cfg).unwrap();
        let bytes = encode(&lm);
        assert_eq!(bytes.len(), 16 + lm.n_frames * N_MELS * 4);
        assert_eq!(decode(&bytes, &cfg, Path::new("c")).unwrap(), lm);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad, &cfg, Path::new("c")).is_err());
        assert!(decode(&bytes[..bytes.len() - 1], &cfg, Path::new("c")).is_err());
    }
}
