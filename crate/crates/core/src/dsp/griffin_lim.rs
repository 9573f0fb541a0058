//! Griffin-Lim phase reconstruction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;

use crate::dsp::stft::{istft, stft_complex, ComplexSpectrogram};
use crate::dsp::{DspConfig, LinearSpectrogram, Waveform};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Reconstructed waveform plus the spectral-convergence error of every
/// iterate, `errors[0]` being the random-phase start.
#[derive(Debug, Clone)]
pub struct GriffinLimTrace<T> {
    pub waveform: Waveform<T>,
    pub errors: Vec<f64>,
}

/// Bin weights that turn a sum over the stored half spectrum into a sum over
/// the full two-sided spectrum.
fn bin_weight(k: usize, nfft: usize) -> f64 {
    if k == 0 || (nfft.is_multiple_of(2) && k == nfft / 2) {
        1.0
    } else {
        2.0
    }
}

/// `‖|X| − s‖_F / ‖s‖_F` over the two-sided spectrum. Zero when `s` is zero.
pub fn spectral_convergence<T: Scalar>(
    x: &ComplexSpectrogram<T>,
    s: &LinearSpectrogram<T>,
    nfft: usize,
) -> f64 {
    let bins = x.bins;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, (c, &m)) in x.data.iter().zip(s.0.data()).enumerate() {
        let w = bin_weight(i % bins, nfft);
        let m = m.to_f64_lossy();
        let d = c.norm().to_f64_lossy() - m;
        num += w * d * d;
        den += w * m * m;
    }
    if den == 0.0 {
        0.0
    } else {
        (num / den).sqrt()
    }
}

fn check_input<T: Scalar>(s: &LinearSpectrogram<T>, cfg: &DspConfig) -> Result<()> {
    cfg.validate()?;
    if s.bins() != cfg.num_bins() {
        return Err(Error::shape(
            "griffin_lim",
            s.0.shape(),
            &[s.frames(), cfg.num_bins()],
        ));
    }
    if s.frames() * cfg.hop_length() < cfg.frame_length() {
        return Err(Error::Invalid(format!(
            "griffin_lim needs at least {} frames",
            cfg.frame_length().div_ceil(cfg.hop_length())
        )));
    }
    if let Some(i) =
        s.0.data()
            .iter()
            .position(|&x| !(x >= T::zero() && x.is_finite()))
    {
        return Err(Error::Invalid(format!(
            "spectrogram entry {i} is negative or non-finite"
        )));
    }
    Ok(())
}

pub fn griffin_lim<T: Scalar>(
    s: &LinearSpectrogram<T>,
    cfg: &DspConfig,
    iters: usize,
    seed: u64,
) -> Result<Waveform<T>> {
    Ok(griffin_lim_traced(s, cfg, iters, seed)?.waveform)
}

pub fn griffin_lim_traced<T: Scalar>(
    s: &LinearSpectrogram<T>,
    cfg: &DspConfig,
    iters: usize,
    seed: u64,
) -> Result<GriffinLimTrace<T>> {
    check_input(s, cfg)?;
    let (frames, bins) = (s.frames(), s.bins());
    let mag = s.0.data();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phase: Vec<Complex<T>> = (0..frames * bins)
        .map(|_| {
            let a = rng.random::<f64>() * std::f64::consts::TAU;
            Complex::new(T::lit(a.cos()), T::lit(a.sin()))
        })
        .collect();

    let mut errors = Vec::with_capacity(iters + 1);
    let mut x = istft(
        &ComplexSpectrogram::from_polar(mag, &phase, frames, bins),
        cfg,
    )?;
    let mut spec = stft_complex(&x, cfg)?;
    errors.push(spectral_convergence(&spec, s, cfg.fft_size));
    for _ in 0..iters {
        for (p, c) in phase.iter_mut().zip(&spec.data) {
            let n = c.norm();
            *p = if n > T::zero() {
                c / n
            } else {
                Complex::new(T::one(), T::zero())
            };
        }
        x = istft(
            &ComplexSpectrogram::from_polar(mag, &phase, frames, bins),
            cfg,
        )?;
        spec = stft_complex(&x, cfg)?;
        errors.push(spectral_convergence(&spec, s, cfg.fft_size));
    }
    Ok(GriffinLimTrace {
        waveform: x,
        errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::dsp::stft;

    #[test]
    fn zero_spectrogram_gives_silence() {
        let cfg = DspConfig::default();
        let s = LinearSpectrogram(Tensor::<f64>::zeros(&[8, 1025]));
        let tr = griffin_lim_traced(&s, &cfg, 3, 1).unwrap();
        assert!(tr.waveform.samples.iter().all(|&x| x == 0.0));
        assert!(tr.errors.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn zero_iterations_is_seeded() {
        let cfg = DspConfig::default();
        let x: Vec<f64> = (0..4800).map(|i| (i as f64 * 0.05).sin()).collect();
        let s = stft(&Waveform::new(x, 24_000), &cfg).unwrap();
        let a = griffin_lim(&s, &cfg, 0, 9).unwrap();
        let b = griffin_lim(&s, &cfg, 0, 9).unwrap();
        let c = griffin_lim(&s, &cfg, 0, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_geometry_and_negative_entries() {
        let cfg = DspConfig::default();
        assert!(griffin_lim(
            &LinearSpectrogram(Tensor::<f64>::zeros(&[8, 513])),
            &cfg,
            1,
            0
        )
        .is_err());
        assert!(griffin_lim(
            &LinearSpectrogram(Tensor::<f64>::zeros(&[2, 1025])),
            &cfg,
            1,
            0
        )
        .is_err());
        let neg = LinearSpectrogram(Tensor::<f64>::full(&[8, 1025], -1.0));
        assert!(griffin_lim(&neg, &cfg, 1, 0).is_err());
    }
}
