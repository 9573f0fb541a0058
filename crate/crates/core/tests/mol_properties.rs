//! Total probability, bin probabilities and sampling moments of the
//! discretized logistic mixture, checked against direct CDF arithmetic.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tts_core::vocoder::mol::{self, MolSpec};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mixture probability of bin `i` straight from the logistic CDF.
fn direct_prob(spec: &MolSpec, row: &[f64], i: usize) -> f64 {
    let k = spec.components;
    let mx = row[..k].iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = row[..k].iter().map(|a| (a - mx).exp()).sum();
    let h = spec.scale / (spec.bins - 1) as f64;
    let center = -spec.scale + 2.0 * h * i as f64;
    (0..k)
        .map(|j| {
            let w = (row[j] - mx).exp() / z;
            let s = row[2 * k + j].max(spec.log_scale_floor).exp();
            let mu = row[k + j];
            let upper = if i == spec.bins - 1 {
                1.0
            } else {
                sigmoid((center + h - mu) / s)
            };
            let lower = if i == 0 {
                0.0
            } else {
                sigmoid((center - h - mu) / s)
            };
            w * (upper - lower)
        })
        .sum()
}

fn random_row(rng: &mut impl Rng, k: usize, scale: f64, log_s: std::ops::Range<f64>) -> Vec<f64> {
    let mut row = Vec::with_capacity(3 * k);
    row.extend((0..k).map(|_| rng.random_range(-3.0..3.0)));
    row.extend((0..k).map(|_| rng.random_range(-scale..scale)));
    row.extend((0..k).map(|_| rng.random_range(log_s.clone())));
    row
}

#[test]
fn coarse_partition_sums_to_one() {
    let spec = MolSpec::new(10, 127.5).with_bins(256);
    let mut rng = ChaCha8Rng::seed_from_u64(256);
    for _ in 0..100 {
        let row = random_row(&mut rng, 10, 127.5, -2.0..4.0);
        let total: f64 = (0..256).map(|b| mol::log_prob(&spec, &row, b).exp()).sum();
        assert!((total - 1.0).abs() < 1e-9, "total {total}");
    }
}

#[test]
fn sixteen_bit_spot_check() {
    let spec = MolSpec::new(10, 127.5);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut tails = 0;
    for n in 0..100 {
        // keep bins near the components so probabilities are not all zero
        let row = random_row(&mut rng, 10, 127.5, -6.0..0.0);
        let bin = match n {
            0 => 0,
            1 => spec.bins - 1,
            _ => spec.bin_of(row[10 + n % 10] + rng.random_range(-0.05..0.05)),
        };
        if bin == 0 || bin == spec.bins - 1 {
            tails += 1;
        }
        let got = mol::log_prob(&spec, &row, bin).exp();
        let want = direct_prob(&spec, &row, bin);
        assert!((got - want).abs() < 1e-9, "bin {bin}: {got} vs {want}");
    }
    assert!(tails >= 2);
}

#[test]
fn sample_mean_matches_mixture_mean() {
    let spec = MolSpec::new(3, 127.5);
    let row = [0.5, -0.2, 1.0, -40.0, 10.0, 55.0, 1.0, 0.3, 1.5];
    let k = 3;
    let mx = row[..k].iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = row[..k].iter().map(|a| (a - mx).exp()).sum();
    let w: Vec<f64> = row[..k].iter().map(|a| (a - mx).exp() / z).collect();
    let mean: f64 = (0..k).map(|j| w[j] * row[k + j]).sum();
    let second: f64 = (0..k)
        .map(|j| {
            let s = row[2 * k + j].exp();
            w[j] * (s * s * std::f64::consts::PI.powi(2) / 3.0 + row[k + j].powi(2))
        })
        .sum();
    let n = 100_000;
    let se = ((second - mean * mean) / n as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let emp = (0..n)
        .map(|_| mol::sample(&spec, &row, &mut rng))
        .sum::<f64>()
        / n as f64;
    assert!((emp - mean).abs() < 3.0 * se, "{emp} vs {mean} (se {se})");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn any_mixture_is_normalized(seed in any::<u64>(), k in 1usize..5) {
        let spec = MolSpec::new(k, 1.0).with_bins(64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let row = random_row(&mut rng, k, 1.5, -9.0..1.0);
        let total: f64 = (0..64).map(|b| mol::log_prob(&spec, &row, b).exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn samples_stay_in_range(seed in any::<u64>()) {
        let spec = MolSpec::new(2, 127.5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let row = random_row(&mut rng, 2, 300.0, -3.0..6.0);
        let x = mol::sample(&spec, &row, &mut rng);
        prop_assert!(x.abs() <= 127.5);
    }
}
