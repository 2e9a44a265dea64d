//! Mono 16-bit 16 kHz PCM WAV files.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};
use crate::signal::{WaveSignal, SAMPLE_RATE};

const SCALE: f64 = 32768.0;

fn spec() -> WavSpec {
    WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    }
}

/// Reads a file, rejecting anything but mono 16-bit PCM at 16 kHz.
pub fn read_wav(path: &Path) -> Result<WaveSignal> {
    let reader = WavReader::open(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let s = reader.spec();
    if s.channels != 1 || s.sample_rate != SAMPLE_RATE || s.bits_per_sample != 16 || s.sample_format != SampleFormat::Int {
        return Err(Error::Input(format!(
            "{}: expected mono 16-bit PCM at {SAMPLE_RATE} Hz, found {} channel(s), {} bit, {} Hz",
            path.display(),
            s.channels,
            s.bits_per_sample,
            s.sample_rate
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|v| v.map(|x| x as f64 / SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    WaveSignal::new(samples)
}

/// Quantises `[-1, 1]` samples to 16-bit PCM (clipping at full scale).
pub fn quantize(v: f64) -> i16 {
    (v * SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    let mut w = WavWriter::create(path, spec())?;
    for &v in samples {
        w.write_sample(quantize(v))?;
    }
    w.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_on_the_pcm_grid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let x: Vec<f64> = (-5..5).map(|i| i as f64 * 1000.0 / SCALE).collect();
        write_wav(&p, &x).unwrap();
        assert_eq!(read_wav(&p).unwrap().samples, x);
    }

    #[test]
    fn rejects_other_formats() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let mut w = WavWriter::create(&p, WavSpec { channels: 2, ..spec() }).unwrap();
        w.write_sample(0i16).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(read_wav(&p).unwrap_err().to_string().contains("mono"));
        let p = dir.path().join("r.wav");
        let mut w = WavWriter::create(&p, WavSpec { sample_rate: 8000, ..spec() }).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(read_wav(&p).is_err());
    }
}
