//! Signal-processing front end: framing, STFT/ISTFT, mel filterbank, log
//! compression, Griffin-Lim and waveform target scaling.
//!
//! All operations are pure functions of their inputs.

pub mod griffin_lim;
pub mod mel;
pub mod stft;
pub mod wav;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use griffin_lim::{griffin_lim, griffin_lim_traced, spectral_convergence, GriffinLimTrace};
pub use mel::{
    exp_linear_spectrogram, hz_to_mel, log_linear_spectrogram, mel_centers, mel_filterbank,
    mel_from_magnitude, mel_spectrogram, mel_to_hz,
};
pub use stft::{istft, stft, stft_complex, ComplexSpectrogram};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DspConfig {
    pub sample_rate_hz: u32,
    pub frame_length_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub mel_channels: usize,
    pub mel_fmin_hz: f64,
    pub mel_fmax_hz: f64,
    pub clip_floor: f64,
    pub griffin_lim_iters: usize,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 24_000,
            frame_length_ms: 50.0,
            hop_ms: 12.5,
            fft_size: 2048,
            mel_channels: 80,
            mel_fmin_hz: 125.0,
            mel_fmax_hz: 7600.0,
            clip_floor: 0.01,
            griffin_lim_iters: 60,
        }
    }
}

fn whole_samples(ms: f64, rate: u32, what: &str) -> Result<usize> {
    let exact = ms * rate as f64 / 1000.0;
    let n = exact.round();
    if (exact - n).abs() > 1e-9 || n < 1.0 {
        return Err(Error::Config(format!(
            "{what} of {ms} ms at {rate} Hz is not a whole number of samples"
        )));
    }
    Ok(n as usize)
}

impl DspConfig {
    pub fn validate(&self) -> Result<()> {
        let frame = whole_samples(self.frame_length_ms, self.sample_rate_hz, "frame length")?;
        let hop = whole_samples(self.hop_ms, self.sample_rate_hz, "hop")?;
        if self.fft_size < frame {
            return Err(Error::Config(format!(
                "fft_size {} is smaller than the {frame}-sample frame",
                self.fft_size
            )));
        }
        if hop > frame {
            return Err(Error::Config("hop longer than frame leaves gaps".into()));
        }
        let nyquist = self.sample_rate_hz as f64 / 2.0;
        if !(self.mel_fmin_hz > 0.0
            && self.mel_fmin_hz < self.mel_fmax_hz
            && self.mel_fmax_hz <= nyquist)
        {
            return Err(Error::Config(format!(
                "mel range must satisfy 0 < fmin < fmax <= {nyquist}, got {}..{}",
                self.mel_fmin_hz, self.mel_fmax_hz
            )));
        }
        if !(self.clip_floor > 0.0) {
            return Err(Error::Config("clip_floor must be positive".into()));
        }
        if self.mel_channels == 0 {
            return Err(Error::Config("mel_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn frame_length(&self) -> usize {
        (self.frame_length_ms * self.sample_rate_hz as f64 / 1000.0).round() as usize
    }

    pub fn hop_length(&self) -> usize {
        (self.hop_ms * self.sample_rate_hz as f64 / 1000.0).round() as usize
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frames produced for a waveform of `len` samples.
    pub fn num_frames(&self, len: usize) -> usize {
        len.max(self.frame_length()).div_ceil(self.hop_length())
    }
}

/// Mono audio with samples nominally in `[-1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform<T> {
    pub samples: Vec<T>,
    pub sample_rate_hz: u32,
}

impl<T: Scalar> Waveform<T> {
    pub fn new(samples: Vec<T>, sample_rate_hz: u32) -> Self {
        Self {
            samples,
            sample_rate_hz,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub(crate) fn check(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(i) = self.samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteSample(i));
        }
        Ok(())
    }
}

/// STFT magnitudes, `[frames, fft_size/2 + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSpectrogram<T>(pub Tensor<T>);

/// Log-compressed mel energies, `[frames, mel_channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram<T>(pub Tensor<T>);

impl<T: Scalar> LinearSpectrogram<T> {
    pub fn frames(&self) -> usize {
        self.0.rows()
    }

    pub fn bins(&self) -> usize {
        self.0.cols()
    }
}

impl<T: Scalar> MelSpectrogram<T> {
    pub fn frames(&self) -> usize {
        self.0.rows()
    }

    pub fn channels(&self) -> usize {
        self.0.cols()
    }
}

/// Multiplies every sample by `factor`.
pub fn scale_targets<T: Scalar>(w: &Waveform<T>, factor: f64) -> Vec<T> {
    let f = T::lit(factor);
    w.samples.iter().map(|&x| x * f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry() {
        let cfg = DspConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.frame_length(), 1200);
        assert_eq!(cfg.hop_length(), 300);
        assert_eq!(cfg.num_bins(), 1025);
        assert_eq!(cfg.num_frames(24_000), 80);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad_hop = DspConfig {
            hop_ms: 12.51,
            ..Default::default()
        };
        assert!(bad_hop.validate().is_err());
        let small_fft = DspConfig {
            fft_size: 1024,
            ..Default::default()
        };
        assert!(small_fft.validate().is_err());
        let bad_range = DspConfig {
            mel_fmax_hz: 13_000.0,
            ..Default::default()
        };
        assert!(bad_range.validate().is_err());
        let bad_floor = DspConfig {
            clip_floor: 0.0,
            ..Default::default()
        };
        assert!(bad_floor.validate().is_err());
    }

    #[test]
    fn target_scaling() {
        let w = Waveform::new(vec![1.0f64, -0.5, 0.25], 24_000);
        assert_eq!(scale_targets(&w, 127.5), vec![127.5, -63.75, 31.875]);
        assert_eq!(scale_targets(&w, 1.0), w.samples);
    }
}
