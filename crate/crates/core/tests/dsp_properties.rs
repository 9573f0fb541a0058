use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tts_core::autodiff::Tensor;
use tts_core::dsp::{
    griffin_lim_traced, istft, mel_spectrogram, stft, stft_complex, DspConfig, LinearSpectrogram,
    Waveform,
};

fn snr_db(reference: &[f64], estimate: &[f64]) -> f64 {
    let sig: f64 = reference.iter().map(|x| x * x).sum();
    let err: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    10.0 * (sig / err.max(1e-300)).log10()
}

fn round_trip(x: &[f64]) -> Vec<f64> {
    let cfg = DspConfig::default();
    let spec = stft_complex(&Waveform::new(x.to_vec(), 24_000), &cfg).unwrap();
    istft(&spec, &cfg).unwrap().samples
}

#[test]
fn white_noise_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..24_000)
        .map(|_| rng.random::<f64>() * 2.0 - 1.0)
        .collect();
    let y = round_trip(&x);
    let snr = snr_db(&x, &y[..x.len()]);
    assert!(snr > 60.0, "snr {snr:.1} dB");
}

#[test]
fn chirp_round_trip() {
    let sr = 24_000.0;
    let x: Vec<f64> = (0..36_000)
        .map(|n| {
            let t = n as f64 / sr;
            // 100 Hz to 4 kHz sweep with a slow amplitude wobble
            let phase = 2.0 * std::f64::consts::PI * (100.0 * t + 0.5 * 2600.0 * t * t);
            0.6 * (1.0 + 0.3 * (7.0 * t).sin()) * phase.sin()
        })
        .collect();
    let y = round_trip(&x);
    let snr = snr_db(&x, &y[..x.len()]);
    assert!(snr > 60.0, "snr {snr:.1} dB");
}

#[test]
fn f32_round_trip_stays_above_sixty_db() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x: Vec<f32> = (0..12_000).map(|_| rng.random::<f32>() - 0.5).collect();
    let cfg = DspConfig::default();
    let y = istft(
        &stft_complex(&Waveform::new(x.clone(), 24_000), &cfg).unwrap(),
        &cfg,
    )
    .unwrap();
    let xd: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let yd: Vec<f64> = y.samples[..x.len()].iter().map(|&v| v as f64).collect();
    assert!(snr_db(&xd, &yd) > 60.0);
}

fn assert_monotone(errors: &[f64], label: &str) {
    for (k, w) in errors.windows(2).enumerate() {
        assert!(
            w[1] <= w[0] * (1.0 + 1e-12),
            "{label}: error rose at iteration {}: {} -> {}",
            k + 1,
            w[0],
            w[1]
        );
    }
}

#[test]
fn griffin_lim_is_monotone_on_a_tone() {
    let cfg = DspConfig::default();
    let x: Vec<f64> = (0..24_000)
        .map(|n| 0.5 * (2.0 * std::f64::consts::PI * 440.0 * n as f64 / 24_000.0).sin())
        .collect();
    let s = stft(&Waveform::new(x, 24_000), &cfg).unwrap();
    let tr = griffin_lim_traced(&s, &cfg, 60, 3).unwrap();
    assert_eq!(tr.errors.len(), 61);
    assert_monotone(&tr.errors, "tone");
    assert!(tr.errors[60] < tr.errors[0]);
}

#[test]
fn griffin_lim_on_random_spectrograms() {
    let cfg = DspConfig::default();
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let s = LinearSpectrogram(Tensor::from_fn(&[12, 1025], |_| rng.random::<f64>()));
        let tr = griffin_lim_traced(&s, &cfg, 60, seed).unwrap();
        assert_monotone(&tr.errors, &format!("random seed {seed}"));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mel_never_below_floor(samples in prop::collection::vec(-1.0f64..1.0, 1..3000), gain in 0.0f64..1.0) {
        let cfg = DspConfig::default();
        let x: Vec<f64> = samples.iter().map(|v| v * gain).collect();
        let m = mel_spectrogram(&Waveform::new(x, 24_000), &cfg).unwrap();
        let floor = cfg.clip_floor.ln();
        prop_assert!(m.0.data().iter().all(|&v| v.is_finite() && v >= floor));
        prop_assert_eq!(m.frames(), cfg.num_frames(samples.len()));
    }

    #[test]
    fn round_trip_any_waveform(samples in prop::collection::vec(-1.0f64..1.0, 1200..4000)) {
        let y = round_trip(&samples);
        let snr = snr_db(&samples, &y[..samples.len()]);
        prop_assert!(snr > 60.0, "snr {}", snr);
    }

    #[test]
    fn magnitudes_are_non_negative_and_deterministic(samples in prop::collection::vec(-1.0f32..1.0, 1..2000)) {
        let cfg = DspConfig::default();
        let w = Waveform::new(samples, 24_000);
        let a = stft(&w, &cfg).unwrap();
        let b = stft(&w, &cfg).unwrap();
        prop_assert!(a.0.data().iter().all(|&v| v >= 0.0));
        prop_assert_eq!(a, b);
    }
}
