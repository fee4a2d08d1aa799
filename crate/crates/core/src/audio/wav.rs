//! Mono WAV I/O. Reads 16/24/32-bit integer PCM or 32-bit float; always
//! writes 32-bit float.

use std::io::{Read, Seek, Write};
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MonoAudio {
    pub sample_rate: u32,
    pub samples: Vec<f32>,
}

impl MonoAudio {
    pub fn duration_us(&self) -> u64 {
        (self.samples.len() as u128 * 1_000_000 / u128::from(self.sample_rate)) as u64
    }
}

pub fn read_wav<R: Read>(reader: R) -> Result<MonoAudio> {
    let mut reader = WavReader::new(reader)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::InvalidInput(format!("expected mono WAV, got {} channels", spec.channels)));
    }
    let samples = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader.samples::<f32>().collect::<std::result::Result<Vec<_>, _>>()?,
        (SampleFormat::Int, bits @ (16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| (f64::from(v) * scale) as f32))
                .collect::<std::result::Result<Vec<_>, _>>()?
        }
        (fmt, bits) => {
            return Err(Error::InvalidInput(format!("unsupported WAV sample format {fmt:?}/{bits}-bit")));
        }
    };
    Ok(MonoAudio {
        sample_rate: spec.sample_rate,
        samples,
    })
}

pub fn read_wav_file(path: impl AsRef<Path>) -> Result<MonoAudio> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_wav(std::io::BufReader::new(file))
}

fn float_spec(sample_rate: u32) -> WavSpec {
    WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    }
}

pub fn write_wav<W: Write + Seek>(writer: W, audio: &MonoAudio) -> Result<()> {
    let mut w = WavWriter::new(writer, float_spec(audio.sample_rate))?;
    for &s in &audio.samples {
        w.write_sample(s)?;
    }
    w.finalize()?;
    Ok(())
}

pub fn write_wav_file(path: impl AsRef<Path>, audio: &MonoAudio) -> Result<()> {
    let mut w = WavWriter::create(path.as_ref(), float_spec(audio.sample_rate))?;
    for &s in &audio.samples {
        w.write_sample(s)?;
    }
    w.finalize()?;
    Ok(())
}

/// 16-bit PCM writer, used for synthetic test inputs.
pub fn write_wav_pcm16(path: impl AsRef<Path>, audio: &MonoAudio) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut w = WavWriter::create(path.as_ref(), spec)?;
    for &s in &audio.samples {
        w.write_sample((f64::from(s).clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}
