use std::path::Path;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Reads 16-bit mono PCM at 16 kHz, normalized to `[-1, 1)`.
pub fn read_wav(path: &Path) -> Result<Vec<f32>> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(other),
    })?;
    let spec = reader.spec();
    if spec.channels != 1
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
        || spec.sample_rate != SAMPLE_RATE
    {
        return Err(Error::Input(format!(
            "{}: expected 16-bit mono PCM at 16 kHz, found {} ch / {} bit / {} Hz",
            path.display(),
            spec.channels,
            spec.bits_per_sample,
            spec.sample_rate
        )));
    }
    reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0).map_err(Error::from))
        .collect()
}

pub fn write_wav(path: &Path, samples: &[f32]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)?;
    }
    w.finalize()?;
    Ok(())
}

/// Pads with zeros at the end or truncates to exactly `len` samples.
pub fn fit_length(mut wave: Vec<f32>, len: usize) -> Vec<f32> {
    wave.resize(len, 0.0);
    wave
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_pcm_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let samples: Vec<f32> = (-5..5).map(|i| i as f32 / 32768.0 * 1000.0).collect();
        write_wav(&p, &samples).unwrap();
        assert_eq!(read_wav(&p).unwrap(), samples);
    }

    #[test]
    fn fit_length_pads_and_truncates() {
        assert_eq!(fit_length(vec![1.0; 3], 5), vec![1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(fit_length(vec![1.0; 7], 5).len(), 5);
    }
}
