//! 16-bit PCM mono WAV files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const FULL_SCALE: f32 = 32768.0;

/// Reads a PCM16 mono file as `[1, T]` samples in `[-1, 1)` plus its rate.
pub fn read_wav(path: impl AsRef<Path>) -> Result<(Tensor<f32>, u32)> {
    let reader = hound::WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::WavFormat {
            field: "sample format",
            found: "float".into(),
            expected: "integer PCM",
        });
    }
    if spec.bits_per_sample != 16 {
        return Err(Error::WavFormat {
            field: "bits per sample",
            found: spec.bits_per_sample.to_string(),
            expected: "16",
        });
    }
    if spec.channels != 1 {
        return Err(Error::WavFormat {
            field: "channels",
            found: spec.channels.to_string(),
            expected: "1",
        });
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / FULL_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if samples.is_empty() {
        return Err(Error::Empty { op: "read_wav" });
    }
    let n = samples.len();
    Ok((Tensor::new([1, n], samples)?, spec.sample_rate))
}

/// Quantizes to PCM16, clipping to the representable range.
pub fn to_pcm16(x: f32) -> i16 {
    (x * FULL_SCALE).round().clamp(i16::MIN as f32, i16::MAX as f32) as i16
}

/// Writes any tensor's samples as a PCM16 mono file.
pub fn write_wav(path: impl AsRef<Path>, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path.as_ref(), spec)?;
    for &s in samples {
        w.write_sample(to_pcm16(s))?;
    }
    w.finalize()?;
    Ok(())
}
