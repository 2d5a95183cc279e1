//! Mono 16-bit PCM WAV input and output.

use std::path::Path;

use crate::codec::Waveform;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const FULL_SCALE: f64 = 32768.0;

/// Read a mono 16-bit PCM file. With `expected_rate` set, any other
/// sample rate is an error; nothing is resampled.
pub fn read_wav(path: &Path, expected_rate: Option<u32>) -> Result<Waveform<f64>> {
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Format(format!(
            "{}: sample_format is float, expected integer PCM",
            path.display()
        )));
    }
    if spec.bits_per_sample != 16 {
        return Err(Error::Format(format!(
            "{}: bits_per_sample is {}, expected 16",
            path.display(),
            spec.bits_per_sample
        )));
    }
    if spec.channels != 1 {
        return Err(Error::Format(format!(
            "{}: channels is {}, expected 1",
            path.display(),
            spec.channels
        )));
    }
    if let Some(rate) = expected_rate {
        if spec.sample_rate != rate {
            return Err(Error::Format(format!(
                "{}: sample_rate is {}, model expects {}",
                path.display(),
                spec.sample_rate,
                rate
            )));
        }
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / FULL_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Waveform::new(samples, spec.sample_rate)
}

/// Write as 16-bit PCM, clipping to the representable range.
pub fn write_wav<T: Scalar>(path: &Path, wave: &Waveform<T>) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &v in &wave.samples {
        let q = (v.as_f64() * FULL_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64);
        writer.write_sample(q as i16)?;
    }
    writer.finalize()?;
    Ok(())
}
