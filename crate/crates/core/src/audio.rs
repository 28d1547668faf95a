//! WAV reading and writing.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::spectral::Waveform;

fn audio_err(path: &Path) -> impl FnOnce(hound::Error) -> Error + '_ {
    move |source| Error::Audio {
        path: path.to_path_buf(),
        source,
    }
}

/// Header information without decoding samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WavInfo {
    pub channels: usize,
    pub sample_rate: u32,
    pub frames: usize,
}

pub fn wav_info(path: &Path) -> Result<WavInfo> {
    let r = WavReader::open(path).map_err(audio_err(path))?;
    let spec = r.spec();
    Ok(WavInfo {
        channels: spec.channels as usize,
        sample_rate: spec.sample_rate,
        frames: r.duration() as usize,
    })
}

/// Reads `len` frames starting at frame `start`; `len = None` reads to the end.
pub fn read_wav_range<T: Scalar>(path: &Path, start: usize, len: Option<usize>) -> Result<Waveform<T>> {
    let mut r = WavReader::open(path).map_err(audio_err(path))?;
    let spec = r.spec();
    let channels = spec.channels as usize;
    if !(1..=2).contains(&channels) {
        return Err(Error::Data(format!("{}: {channels} channels, expected 1 or 2", path.display())));
    }
    let total = r.duration() as usize;
    if start > total {
        return Err(Error::Data(format!("{}: start {start} beyond {total} frames", path.display())));
    }
    let len = len.unwrap_or(total - start);
    if start + len > total {
        return Err(Error::Data(format!(
            "{}: range {start}+{len} beyond {total} frames",
            path.display()
        )));
    }
    r.seek(start as u32).map_err(|e| Error::io(path, e))?;
    let n = len * channels;
    let interleaved: Vec<f32> = match spec.sample_format {
        SampleFormat::Float => r.samples::<f32>().take(n).collect::<Result<_, _>>().map_err(audio_err(path))?,
        SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            r.samples::<i32>()
                .take(n)
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<Result<_, _>>()
                .map_err(audio_err(path))?
        }
    };
    if interleaved.len() != n {
        return Err(Error::Data(format!("{}: truncated sample data", path.display())));
    }
    let samples = Array2::from_shape_fn((channels, len), |(c, t)| T::of(interleaved[t * channels + c] as f64));
    Waveform::new(samples, spec.sample_rate)
}

pub fn read_wav<T: Scalar>(path: &Path) -> Result<Waveform<T>> {
    read_wav_range(path, 0, None)
}

/// Writes 32-bit float PCM.
pub fn write_wav<T: Scalar>(path: &Path, w: &Waveform<T>) -> Result<()> {
    w.validate()?;
    let spec = WavSpec {
        channels: w.channels() as u16,
        sample_rate: w.sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut out = WavWriter::create(path, spec).map_err(audio_err(path))?;
    for t in 0..w.len() {
        for c in 0..w.channels() {
            out.write_sample(w.samples[[c, t]].as_f64() as f32).map_err(audio_err(path))?;
        }
    }
    out.finalize().map_err(audio_err(path))
}
