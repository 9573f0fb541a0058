//! Centered, reflection-padded STFT and its least-squares inverse.
//!
//! The waveform is zero-padded at the end to a whole number of hops (and at
//! least one frame), giving `ceil(max(len, frame) / hop)` frames. It is then
//! reflected by `frame/2` on both sides, so frame `t` is centred on sample
//! `t·hop`. The inverse folds the reflected margins back onto the samples they
//! were copied from, which makes it the exact least-squares inverse of the
//! forward map.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::autodiff::Tensor;
use crate::dsp::{DspConfig, LinearSpectrogram, Waveform};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Non-redundant half of the frame spectra, `[frames, bins]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram<T> {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex<T>>,
}

impl<T: Scalar> ComplexSpectrogram<T> {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self {
            frames,
            bins,
            data: vec![Complex::new(T::zero(), T::zero()); frames * bins],
        }
    }

    pub fn magnitude(&self) -> LinearSpectrogram<T> {
        let data = self.data.iter().map(|c| c.norm()).collect();
        LinearSpectrogram(
            Tensor::new(vec![self.frames, self.bins], data).expect("consistent shape"),
        )
    }

    /// Combines magnitudes with unit phasors.
    pub fn from_polar(mag: &[T], phase: &[Complex<T>], frames: usize, bins: usize) -> Self {
        let data = mag.iter().zip(phase).map(|(&m, &p)| p * m).collect();
        Self { frames, bins, data }
    }
}

/// Periodic Hann window.
pub fn hann<T: Scalar>(n: usize) -> Vec<T> {
    (0..n)
        .map(|i| T::lit(0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Maps an index of the padded signal onto the unpadded signal of length `len`.
fn reflect(j: isize, len: usize) -> usize {
    let n = len as isize;
    let i = if j < 0 {
        -j
    } else if j >= n {
        2 * (n - 1) - j
    } else {
        j
    };
    i as usize
}

pub fn stft_complex<T: Scalar>(w: &Waveform<T>, cfg: &DspConfig) -> Result<ComplexSpectrogram<T>> {
    w.check()?;
    let frame = cfg.frame_length();
    let hop = cfg.hop_length();
    let nfft = cfg.fft_size;
    let bins = cfg.num_bins();
    let frames = cfg.num_frames(w.len());
    let len = frames * hop;
    let half = (frame / 2) as isize;
    let window = hann::<T>(frame);
    let sample = |j: isize| -> T {
        let i = reflect(j - half, len);
        w.samples.get(i).copied().unwrap_or(T::zero())
    };

    let fft = FftPlanner::<T>::new().plan_fft_forward(nfft);
    let mut out = ComplexSpectrogram::zeros(frames, bins);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); nfft];
    for t in 0..frames {
        let start = (t * hop) as isize;
        for (n, slot) in buf.iter_mut().enumerate() {
            *slot = if n < frame {
                Complex::new(sample(start + n as isize) * window[n], T::zero())
            } else {
                Complex::new(T::zero(), T::zero())
            };
        }
        fft.process(&mut buf);
        out.data[t * bins..(t + 1) * bins].copy_from_slice(&buf[..bins]);
    }
    Ok(out)
}

/// STFT magnitudes.
pub fn stft<T: Scalar>(w: &Waveform<T>, cfg: &DspConfig) -> Result<LinearSpectrogram<T>> {
    Ok(stft_complex(w, cfg)?.magnitude())
}

/// Least-squares inverse: windowed overlap-add, reflection fold, then division
/// by the folded squared-window sum. Returns `frames · hop` samples.
pub fn istft<T: Scalar>(spec: &ComplexSpectrogram<T>, cfg: &DspConfig) -> Result<Waveform<T>> {
    let frame = cfg.frame_length();
    let hop = cfg.hop_length();
    let nfft = cfg.fft_size;
    let bins = cfg.num_bins();
    if spec.bins != bins || spec.data.len() != spec.frames * spec.bins {
        return Err(Error::shape(
            "istft",
            &[spec.frames, spec.bins],
            &[spec.frames, bins],
        ));
    }
    if spec.frames == 0 {
        return Err(Error::EmptyInput);
    }
    let len = spec.frames * hop;
    if len < frame / 2 + 1 {
        return Err(Error::Invalid(format!(
            "{} frames are too few to invert a {frame}-sample frame",
            spec.frames
        )));
    }
    let half = frame / 2;
    let padded = len + 2 * half;
    let window = hann::<T>(frame);
    let ifft = FftPlanner::<T>::new().plan_fft_inverse(nfft);
    let scale = T::one() / T::from_usize_lossy(nfft);

    let mut acc = vec![T::zero(); padded];
    let mut wsum = vec![T::zero(); padded];
    let mut buf = vec![Complex::new(T::zero(), T::zero()); nfft];
    for t in 0..spec.frames {
        let row = &spec.data[t * bins..(t + 1) * bins];
        buf[..bins].copy_from_slice(row);
        for k in bins..nfft {
            buf[k] = row[nfft - k].conj();
        }
        ifft.process(&mut buf);
        let start = t * hop;
        for n in 0..frame.min(padded - start) {
            acc[start + n] += buf[n].re * scale * window[n];
            wsum[start + n] += window[n] * window[n];
        }
    }

    let mut num = vec![T::zero(); len];
    let mut den = vec![T::zero(); len];
    for j in 0..padded {
        let i = reflect(j as isize - half as isize, len);
        num[i] += acc[j];
        den[i] += wsum[j];
    }
    let tiny = T::lit(1e-10);
    let samples = num
        .iter()
        .zip(&den)
        .map(|(&a, &d)| if d > tiny { a / d } else { T::zero() })
        .collect();
    Ok(Waveform::new(samples, cfg.sample_rate_hz))
}
