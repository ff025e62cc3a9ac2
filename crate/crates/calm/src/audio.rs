//! 16 kHz mono 16-bit PCM WAV input and output.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{format_err, Result};

pub const SAMPLE_RATE: u32 = 16_000;

pub fn spec() -> WavSpec {
    WavSpec { channels: 1, sample_rate: SAMPLE_RATE, bits_per_sample: 16, sample_format: SampleFormat::Int }
}

/// Reads a WAV file as samples in [-1, 1); any other format is rejected.
pub fn read_wav(path: &Path) -> Result<Vec<f32>> {
    let reader = WavReader::open(path).map_err(|e| format_err(path, e))?;
    let s = reader.spec();
    if s != spec() {
        return Err(format_err(
            path,
            format!(
                "expected mono 16 kHz 16-bit PCM, found {} channel(s), {} Hz, {}-bit {:?}",
                s.channels, s.sample_rate, s.bits_per_sample, s.sample_format
            ),
        ));
    }
    reader
        .into_samples::<i16>()
        .map(|v| v.map(|x| x as f32 / 32768.0).map_err(|e| format_err(path, e)))
        .collect()
}

pub fn write_wav(path: &Path, samples: &[f32]) -> Result<()> {
    let mut w = WavWriter::create(path, spec()).map_err(|e| format_err(path, e))?;
    for &x in samples {
        let q = (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(q).map_err(|e| format_err(path, e))?;
    }
    w.finalize().map_err(|e| format_err(path, e))
}
