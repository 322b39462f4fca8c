//! Time/frequency conversion and WAV I/O shared by every other module.
//!
//! The STFT uses a periodic (DFT-even) Hamming analysis window at 50%
//! overlap; overlap-add reconstruction divides by the accumulated window
//! sum, which is constant for this window/hop pair. No synthesis window.

use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_FRAME_SIZE: usize = 512;

/// Time-domain audio, the unit of simulation and I/O.
///
/// `samples[ch][n]` holds amplitude in [-1, 1] (not enforced; the WAV
/// writer clamps only for 16-bit output).
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelWaveform {
    pub samples: Vec<Vec<f64>>,
    pub sample_rate: u32,
}

impl MultichannelWaveform {
    pub fn new(samples: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample_rate must be > 0".into()));
        }
        if samples.is_empty() {
            return Err(Error::InvalidInput("waveform needs at least one channel".into()));
        }
        let len = samples[0].len();
        for (ch, s) in samples.iter().enumerate() {
            if s.len() != len {
                return Err(Error::InvalidInput(format!(
                    "channel {ch} has {} samples, channel 0 has {len}",
                    s.len()
                )));
            }
            if s.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput(format!("channel {ch} contains non-finite samples")));
            }
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn zeros(channels: usize, num_samples: usize, sample_rate: u32) -> Self {
        Self { samples: vec![vec![0.0; num_samples]; channels], sample_rate }
    }

    pub fn channels(&self) -> usize {
        self.samples.len()
    }

    pub fn num_samples(&self) -> usize {
        self.samples[0].len()
    }
}

/// Per-channel STFT frames. `values[ch][t][f]`, with `bins = frame_size/2 + 1`.
#[derive(Debug, Clone)]
pub struct ComplexSpectrogram {
    pub values: Vec<Vec<Vec<Complex64>>>,
    pub frame_size: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn channels(&self) -> usize {
        self.values.len()
    }

    pub fn frames(&self) -> usize {
        self.values[0].len()
    }

    pub fn bins(&self) -> usize {
        self.frame_size / 2 + 1
    }
}

/// Periodic (DFT-even) Hamming window of length `n`.
pub fn hamming_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

fn forward_fft(n: usize) -> Arc<dyn Fft<f64>> {
    FftPlanner::new().plan_fft_forward(n)
}

fn inverse_fft(n: usize) -> Arc<dyn Fft<f64>> {
    FftPlanner::new().plan_fft_inverse(n)
}

/// Windowed DFT of every channel. Frame `t` covers samples
/// `[t*hop, t*hop + frame_size)`; the trailing partial frame is dropped.
pub fn stft(wave: &MultichannelWaveform, frame_size: usize, hop: usize) -> Result<ComplexSpectrogram> {
    if hop == 0 || hop * 2 != frame_size {
        return Err(Error::InvalidInput(format!(
            "hop must be frame_size/2 (got frame_size={frame_size}, hop={hop})"
        )));
    }
    if wave.num_samples() < frame_size {
        return Err(Error::InvalidInput(format!(
            "signal of {} samples is shorter than one frame ({frame_size})",
            wave.num_samples()
        )));
    }
    let window = hamming_periodic(frame_size);
    let bins = frame_size / 2 + 1;
    let num_frames = (wave.num_samples() - frame_size) / hop + 1;
    let fft = forward_fft(frame_size);

    let mut values = Vec::with_capacity(wave.channels());
    let mut buf = vec![Complex64::new(0.0, 0.0); frame_size];
    for ch in wave.samples.iter() {
        let mut frames = Vec::with_capacity(num_frames);
        for t in 0..num_frames {
            let start = t * hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(ch[start + i] * window[i], 0.0);
            }
            fft.process(&mut buf);
            frames.push(buf[..bins].to_vec());
        }
        values.push(frames);
    }
    Ok(ComplexSpectrogram { values, frame_size, hop, sample_rate: wave.sample_rate })
}

/// Overlap-add reconstruction with window-sum normalization.
///
/// Edge samples where the window sum has not accumulated fully may deviate
/// from the original signal; interior samples reconstruct exactly.
pub fn istft(spec: &ComplexSpectrogram) -> Result<MultichannelWaveform> {
    let frame_size = spec.frame_size;
    let hop = spec.hop;
    let bins = spec.bins();
    for ch in &spec.values {
        for frame in ch {
            if frame.len() != bins {
                return Err(Error::InvalidInput(format!(
                    "frame has {} bins, expected {bins}",
                    frame.len()
                )));
            }
        }
    }
    let num_frames = spec.frames();
    let out_len = (num_frames - 1) * hop + frame_size;
    let window = hamming_periodic(frame_size);
    let ifft = inverse_fft(frame_size);

    let mut window_sum = vec![0.0; out_len];
    for t in 0..num_frames {
        for i in 0..frame_size {
            window_sum[t * hop + i] += window[i];
        }
    }

    let mut samples = Vec::with_capacity(spec.channels());
    let mut buf = vec![Complex64::new(0.0, 0.0); frame_size];
    for ch in &spec.values {
        let mut out = vec![0.0; out_len];
        for (t, frame) in ch.iter().enumerate() {
            // Rebuild the full spectrum from the one-sided half by conjugate
            // symmetry, then invert.
            for f in 0..bins {
                buf[f] = frame[f];
            }
            for f in bins..frame_size {
                buf[f] = frame[frame_size - f].conj();
            }
            ifft.process(&mut buf);
            let scale = 1.0 / frame_size as f64;
            for i in 0..frame_size {
                out[t * hop + i] += buf[i].re * scale;
            }
        }
        for (o, ws) in out.iter_mut().zip(window_sum.iter()) {
            if *ws > 1e-12 {
                *o /= *ws;
            }
        }
        samples.push(out);
    }
    Ok(MultichannelWaveform { samples, sample_rate: spec.sample_rate })
}

/// Full linear convolution (length `x.len() + h.len() - 1`) via FFT.
pub fn fft_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    let out_len = x.len() + h.len() - 1;
    let n = out_len.next_power_of_two();
    let fft = forward_fft(n);
    let ifft = inverse_fft(n);
    let mut a = vec![Complex64::new(0.0, 0.0); n];
    let mut b = vec![Complex64::new(0.0, 0.0); n];
    for (i, &v) in x.iter().enumerate() {
        a[i].re = v;
    }
    for (i, &v) in h.iter().enumerate() {
        b[i].re = v;
    }
    fft.process(&mut a);
    fft.process(&mut b);
    for (ai, bi) in a.iter_mut().zip(&b) {
        *ai *= bi;
    }
    ifft.process(&mut a);
    a[..out_len].iter().map(|c| c.re / n as f64).collect()
}

/// Reads a PCM16 or float32 WAV file.
pub fn read_wav(path: &Path) -> Result<MultichannelWaveform> {
    let reader = hound::WavReader::open(path).map_err(|e| Error::wav(path, e.to_string()))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::wav(path, "zero channels"));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::wav(path, e.to_string()))?,
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::wav(path, e.to_string()))?,
        (fmt, bits) => {
            return Err(Error::wav(path, format!("unsupported encoding: {fmt:?} {bits}-bit")))
        }
    };
    let frames = interleaved.len() / channels;
    let mut samples = vec![Vec::with_capacity(frames); channels];
    for (i, v) in interleaved.into_iter().enumerate() {
        samples[i % channels].push(v);
    }
    MultichannelWaveform::new(samples, spec.sample_rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    Float32,
    Pcm16,
}

/// Writes a WAV file. Float32 round-trips losslessly; Pcm16 clamps to
/// [-1, 1] and quantizes with error at most 2^-15.
pub fn write_wav(path: &Path, wave: &MultichannelWaveform, format: WavFormat) -> Result<()> {
    let spec = hound::WavSpec {
        channels: wave.channels() as u16,
        sample_rate: wave.sample_rate,
        bits_per_sample: match format {
            WavFormat::Float32 => 32,
            WavFormat::Pcm16 => 16,
        },
        sample_format: match format {
            WavFormat::Float32 => hound::SampleFormat::Float,
            WavFormat::Pcm16 => hound::SampleFormat::Int,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| Error::wav(path, e.to_string()))?;
    let frames = wave.num_samples();
    for n in 0..frames {
        for ch in &wave.samples {
            match format {
                WavFormat::Float32 => writer
                    .write_sample(ch[n] as f32)
                    .map_err(|e| Error::wav(path, e.to_string()))?,
                WavFormat::Pcm16 => {
                    // Same 2^15 scale as the reader keeps the round-trip
                    // error within half an LSB (one LSB at the +1.0 clamp).
                    let q = (ch[n].clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(q).map_err(|e| Error::wav(path, e.to_string()))?;
                }
            }
        }
    }
    writer.finalize().map_err(|e| Error::wav(path, e.to_string()))?;
    Ok(())
}
