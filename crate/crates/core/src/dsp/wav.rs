//! 16-bit mono PCM WAV reading and writing.

use std::io::{Read, Seek, Write};
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn spec(rate: u32) -> WavSpec {
    WavSpec {
        channels: 1,
        sample_rate: rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    }
}

/// `x · 32768`, rounded and clamped to the i16 range.
pub fn quantize<T: Scalar>(x: T) -> i16 {
    let v = (x.to_f64_lossy() * 32768.0).round();
    v.clamp(-32768.0, 32767.0) as i16
}

pub fn dequantize<T: Scalar>(q: i16) -> T {
    T::lit(q as f64 / 32768.0)
}

pub fn read_wav_from<T: Scalar, R: Read>(reader: R, expected_rate: u32) -> Result<Waveform<T>> {
    let r = WavReader::new(reader)?;
    let s = r.spec();
    if s.channels != 1 || s.bits_per_sample != 16 || s.sample_format != SampleFormat::Int {
        return Err(Error::Wav(format!(
            "expected 16-bit integer mono PCM, got {} channel(s) of {}-bit {:?}",
            s.channels, s.bits_per_sample, s.sample_format
        )));
    }
    if s.sample_rate != expected_rate {
        return Err(Error::Wav(format!(
            "sample rate {} Hz does not match configured {expected_rate} Hz",
            s.sample_rate
        )));
    }
    let samples = r
        .into_samples::<i16>()
        .map(|q| q.map(dequantize))
        .collect::<std::result::Result<Vec<T>, _>>()?;
    Ok(Waveform::new(samples, expected_rate))
}

pub fn read_wav<T: Scalar>(path: impl AsRef<Path>, expected_rate: u32) -> Result<Waveform<T>> {
    let f = std::fs::File::open(path.as_ref())?;
    read_wav_from(std::io::BufReader::new(f), expected_rate)
}

pub fn write_wav_to<T: Scalar, W: Write + Seek>(writer: W, w: &Waveform<T>) -> Result<()> {
    let mut out = WavWriter::new(writer, spec(w.sample_rate_hz))?;
    for (i, &x) in w.samples.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::NonFiniteSample(i));
        }
        out.write_sample(quantize(x))?;
    }
    out.finalize()?;
    Ok(())
}

pub fn write_wav<T: Scalar>(path: impl AsRef<Path>, w: &Waveform<T>) -> Result<()> {
    let mut buf = std::io::Cursor::new(Vec::new());
    write_wav_to(&mut buf, w)?;
    std::fs::write(path, buf.into_inner())?;
    Ok(())
}
