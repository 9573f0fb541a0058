//! HTK mel scale, triangular filterbank and log compression.

use crate::autodiff::Tensor;
use crate::dsp::{stft, DspConfig, LinearSpectrogram, MelSpectrogram, Waveform};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Edge frequencies in Hz: `mel_channels + 2` points equally spaced in mel.
/// Channel `c` rises from point `c`, peaks at `c + 1` and falls to `c + 2`.
pub fn mel_points(cfg: &DspConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.mel_fmin_hz);
    let hi = hz_to_mel(cfg.mel_fmax_hz);
    let n = cfg.mel_channels + 1;
    (0..=n)
        .map(|k| mel_to_hz(lo + (hi - lo) * k as f64 / n as f64))
        .collect()
}

/// Center frequency of every channel in Hz.
pub fn mel_centers(cfg: &DspConfig) -> Vec<f64> {
    let p = mel_points(cfg);
    p[1..p.len() - 1].to_vec()
}

/// Peak-1 triangular filters, `[mel_channels, fft_size/2 + 1]`.
pub fn mel_filterbank<T: Scalar>(cfg: &DspConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    let bins = cfg.num_bins();
    let pts = mel_points(cfg);
    let bin_hz = cfg.sample_rate_hz as f64 / cfg.fft_size as f64;
    let mut fb = Tensor::zeros(&[cfg.mel_channels, bins]);
    for c in 0..cfg.mel_channels {
        let (l, m, r) = (pts[c], pts[c + 1], pts[c + 2]);
        let row = &mut fb.data_mut()[c * bins..(c + 1) * bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let v = ((f - l) / (m - l)).min((r - f) / (r - m));
            if v > 0.0 {
                *w = T::lit(v);
            }
        }
        if row.iter().all(|&w| w == T::zero()) {
            return Err(Error::FilterbankUnderresolved(c));
        }
    }
    Ok(fb)
}

fn log_clip<T: Scalar>(t: &mut Tensor<T>, floor: f64) {
    let floor = T::lit(floor);
    for x in t.data_mut() {
        *x = x.max(floor).ln();
    }
}

/// `ln(max(filterbank · |STFT|, clip_floor))`.
pub fn mel_spectrogram<T: Scalar>(w: &Waveform<T>, cfg: &DspConfig) -> Result<MelSpectrogram<T>> {
    let fb = mel_filterbank::<T>(cfg)?;
    let mag = stft(w, cfg)?;
    Ok(mel_from_magnitude(&mag, &fb, cfg.clip_floor))
}

pub fn mel_from_magnitude<T: Scalar>(
    mag: &LinearSpectrogram<T>,
    fb: &Tensor<T>,
    floor: f64,
) -> MelSpectrogram<T> {
    let mut mel = mag.0.matmul_t(fb);
    log_clip(&mut mel, floor);
    MelSpectrogram(mel)
}

/// `ln(max(|STFT|, clip_floor))`, the target of the linear-output predictor.
pub fn log_linear_spectrogram<T: Scalar>(w: &Waveform<T>, cfg: &DspConfig) -> Result<Tensor<T>> {
    let mut mag = stft(w, cfg)?.0;
    log_clip(&mut mag, cfg.clip_floor);
    Ok(mag)
}

/// Inverse of [`log_linear_spectrogram`] up to the clip.
pub fn exp_linear_spectrogram<T: Scalar>(log_mag: &Tensor<T>) -> LinearSpectrogram<T> {
    LinearSpectrogram(log_mag.map(|x| x.exp()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_map_round_trips() {
        for f in [0.0, 125.0, 1000.0, 7600.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
        }
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn first_center_frequency() {
        // oracle: the k = 1 point of 82 equally spaced mel values
        let lo = 2595.0 * (1.0f64 + 125.0 / 700.0).log10();
        let hi = 2595.0 * (1.0f64 + 7600.0 / 700.0).log10();
        let m = (lo * 80.0 + hi) / 81.0;
        let oracle = 700.0 * (10f64.powf(m / 2595.0) - 1.0);
        let c0 = mel_centers(&DspConfig::default())[0];
        assert!((c0 - oracle).abs() < 1e-9);
        assert!((c0 - 148.852_094).abs() < 1e-5, "{c0}");
    }

    #[test]
    fn default_filterbank_shape_and_support() {
        let cfg = DspConfig::default();
        let fb = mel_filterbank::<f64>(&cfg).unwrap();
        assert_eq!(fb.shape(), &[80, 1025]);
        let bin_hz = 24_000.0 / 2048.0;
        let mut last_first = 0;
        for c in 0..80 {
            let row = fb.row(c);
            assert!(row.iter().sum::<f64>() > 0.0);
            assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
            let first = row.iter().position(|&w| w > 0.0).unwrap();
            assert!(first >= last_first);
            last_first = first;
            for (k, &w) in row.iter().enumerate() {
                let f = k as f64 * bin_hz;
                if f <= 125.0 || f >= 7600.0 {
                    assert_eq!(w, 0.0);
                }
            }
        }
        let centers = mel_centers(&cfg);
        assert!(centers.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn too_many_channels_underresolve() {
        let cfg = DspConfig {
            fft_size: 1200,
            mel_channels: 400,
            ..Default::default()
        };
        assert!(matches!(
            mel_filterbank::<f64>(&cfg),
            Err(Error::FilterbankUnderresolved(_))
        ));
        assert_eq!(
            mel_filterbank::<f64>(&cfg)
                .unwrap_err()
                .to_string()
                .split(':')
                .next(),
            Some("filterbank underresolved")
        );
    }

    #[test]
    fn silence_hits_the_floor() {
        let cfg = DspConfig::default();
        let m = mel_spectrogram(&Waveform::new(vec![0.0f64; 4800], 24_000), &cfg).unwrap();
        assert!(m.0.data().iter().all(|&x| (x - 0.01f64.ln()).abs() < 1e-12));
        assert!((0.01f64.ln() + 4.60517).abs() < 1e-5);
    }

    #[test]
    fn sine_lands_in_nearest_channel() {
        let cfg = DspConfig::default();
        let x: Vec<f64> = (0..24_000)
            .map(|n| (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / 24_000.0).sin())
            .collect();
        let m = mel_spectrogram(&Waveform::new(x, 24_000), &cfg).unwrap();
        let centers = mel_centers(&cfg);
        let nearest = (0..80)
            .min_by(|&a, &b| {
                (centers[a] - 1000.0)
                    .abs()
                    .total_cmp(&(centers[b] - 1000.0).abs())
            })
            .unwrap();
        let row = m.0.row(40);
        let arg = (0..80).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(arg, nearest);
    }
}
