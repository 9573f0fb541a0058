//! Discretized mixture of logistics over a uniform bin grid in the scaled
//! sample domain.
//!
//! Each output row holds `3K` values: `K` mixture logits, `K` means and `K`
//! log scales. Bin centers are `−scale + i·2h` for `i = 0..bins`, so the first
//! and last centers sit on `±scale`; the extreme bins are open tails.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const LOG_SCALE_FLOOR: f64 = -7.0;
pub const BINS_16BIT: usize = 65_536;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MolSpec {
    pub components: usize,
    pub scale: f64,
    pub bins: usize,
    pub log_scale_floor: f64,
}

impl MolSpec {
    pub fn new(components: usize, scale: f64) -> Self {
        Self {
            components,
            scale,
            bins: BINS_16BIT,
            log_scale_floor: LOG_SCALE_FLOOR,
        }
    }

    pub fn with_bins(self, bins: usize) -> Self {
        Self { bins, ..self }
    }

    /// Half the distance between neighbouring bin centers.
    pub fn half_width(&self) -> f64 {
        self.scale / (self.bins - 1) as f64
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        -self.scale + 2.0 * self.half_width() * i as f64
    }

    /// Nearest bin index of a scaled sample, clamped to the grid.
    pub fn bin_of(&self, x: f64) -> usize {
        let i = ((x + self.scale) / (2.0 * self.half_width())).round();
        i.clamp(0.0, (self.bins - 1) as f64) as usize
    }

    pub fn width(&self) -> usize {
        3 * self.components
    }
}

/// `ln σ(p) + ln σ(−m) + ln(1 − e^{−(p−m)})`, the log of `σ(p) − σ(m)` for `p > m`.
fn log_cdf_delta(p: f64, m: f64) -> f64 {
    let delta = p - m;
    p.log_sigmoid() + (-m).log_sigmoid() + (-(-delta).exp()).ln_1p()
}

/// Log-probability of bin `bin` under one logistic component, and its
/// derivatives with respect to the mean and the (unclamped) log scale.
fn component_log_prob(spec: &MolSpec, bin: usize, mu: f64, raw_log_scale: f64) -> (f64, f64, f64) {
    let clamped = raw_log_scale < spec.log_scale_floor;
    let ls = raw_log_scale.max(spec.log_scale_floor);
    let inv = (-ls).exp();
    let h = spec.half_width();
    let c = spec.bin_center(bin) - mu;
    let p = inv * (c + h);
    let m = inv * (c - h);
    let (lp, d_mu, d_ls) = if bin == 0 {
        let sp = (-p).sigmoid();
        (p.log_sigmoid(), -inv * sp, -p * sp)
    } else if bin == spec.bins - 1 {
        let sm = m.sigmoid();
        ((-m).log_sigmoid(), inv * sm, m * sm)
    } else {
        let (sp, sm) = ((-p).sigmoid(), m.sigmoid());
        let delta = p - m;
        (
            log_cdf_delta(p, m),
            -inv * (sp - sm),
            -p * sp + m * sm - delta / delta.exp_m1(),
        )
    };
    (lp, d_mu, if clamped { 0.0 } else { d_ls })
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|&a| (a - mx).exp()).sum::<f64>().ln();
    logits.iter().map(|&a| a - lse).collect()
}

/// Log-likelihood of `bin` under one parameter row, plus the gradient of that
/// log-likelihood with respect to the row.
pub fn log_prob_and_grad<T: Scalar>(spec: &MolSpec, row: &[T], bin: usize) -> (f64, Vec<f64>) {
    let k = spec.components;
    let a: Vec<f64> = row[..k].iter().map(|v| v.to_f64_lossy()).collect();
    let log_pi = log_softmax(&a);
    let mut joint = vec![0.0; k];
    let mut dmu = vec![0.0; k];
    let mut dls = vec![0.0; k];
    for j in 0..k {
        let (lp, gm, gs) = component_log_prob(
            spec,
            bin,
            row[k + j].to_f64_lossy(),
            row[2 * k + j].to_f64_lossy(),
        );
        joint[j] = log_pi[j] + lp;
        dmu[j] = gm;
        dls[j] = gs;
    }
    let post = log_softmax(&joint);
    let ll = {
        let mx = joint.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        mx + joint.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln()
    };
    let mut grad = vec![0.0; 3 * k];
    for j in 0..k {
        let r = post[j].exp();
        grad[j] = r - log_pi[j].exp();
        grad[k + j] = r * dmu[j];
        grad[2 * k + j] = r * dls[j];
    }
    (ll, grad)
}

pub fn log_prob<T: Scalar>(spec: &MolSpec, row: &[T], bin: usize) -> f64 {
    log_prob_and_grad(spec, row, bin).0
}

/// Mean negative log-likelihood over rows of `params: [T, 3K]` for scaled
/// targets, with its gradient with respect to `params`.
pub fn nll_and_grad<T: Scalar>(
    spec: &MolSpec,
    params: &[T],
    targets: &[T],
) -> Result<(f64, Vec<T>)> {
    let w = spec.width();
    if params.len() != targets.len() * w || targets.is_empty() {
        return Err(Error::Invalid(format!(
            "{} parameter values for {} targets of width {w}",
            params.len(),
            targets.len()
        )));
    }
    let n = targets.len() as f64;
    let mut total = 0.0;
    let mut grad = vec![T::zero(); params.len()];
    for (t, (&x, row)) in targets.iter().zip(params.chunks(w)).enumerate() {
        let (ll, g) = log_prob_and_grad(spec, row, spec.bin_of(x.to_f64_lossy()));
        total -= ll;
        for (o, gv) in grad[t * w..(t + 1) * w].iter_mut().zip(g) {
            *o = T::lit(-gv / n);
        }
    }
    let nll = total / n;
    if !nll.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0, batch: 0 });
    }
    Ok((nll, grad))
}

/// Draws a scaled sample: pick a component from the softmax weights, then
/// invert the logistic CDF. Clamped to `±scale`.
pub fn sample<T: Scalar>(spec: &MolSpec, row: &[T], rng: &mut impl Rng) -> T {
    let k = spec.components;
    let a: Vec<f64> = row[..k].iter().map(|v| v.to_f64_lossy()).collect();
    let log_pi = log_softmax(&a);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut j = k - 1;
    for (i, lp) in log_pi.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            j = i;
            break;
        }
    }
    let mu = row[k + j].to_f64_lossy();
    let s = row[2 * k + j]
        .to_f64_lossy()
        .max(spec.log_scale_floor)
        .exp();
    let u: f64 = rng.random_range(1e-5..1.0 - 1e-5);
    let x = mu + s * (u.ln() - (-u).ln_1p());
    T::lit(x.clamp(-spec.scale, spec.scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_component_on_a_bin_center() {
        // half-width over scale equal to one gives σ(1) − σ(−1)
        let spec = MolSpec::new(1, 127.5);
        let h = spec.half_width();
        let bin = 30_000;
        let mu = spec.bin_center(bin);
        let row = [0.0f64, mu, h.ln()];
        let p = log_prob(&spec, &row, bin).exp();
        let oracle = 2.0 / (1.0 + (-1.0f64).exp()) - 1.0;
        assert!((p - oracle).abs() < 1e-9, "{p} vs {oracle}");
        assert!((p - 0.46212).abs() < 1e-5);
        assert!((-p.ln() - 0.771937).abs() < 1e-6);
    }

    #[test]
    fn equal_components_match_one() {
        let spec = MolSpec::new(2, 127.5).with_bins(256);
        let one = [0.3f64, 1.7, -0.4];
        let two = [0.9f64, 0.9, 1.7, 1.7, -0.4, -0.4];
        let single = MolSpec {
            components: 1,
            ..spec
        };
        for bin in [0, 17, 128, 255] {
            let a = log_prob(&single, &one[..], bin);
            assert!((log_prob(&spec, &two[..], bin) - a).abs() < 1e-12);
        }
    }

    #[test]
    fn tails_cover_the_ends() {
        let spec = MolSpec::new(1, 1.0).with_bins(4);
        let row = [0.0f64, 0.0, 0.0];
        let total: f64 = (0..4).map(|b| log_prob(&spec, &row, b).exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(spec.bin_of(-5.0), 0);
        assert_eq!(spec.bin_of(5.0), 3);
        assert_eq!(spec.bin_center(3), 1.0);
    }

    #[test]
    fn analytic_gradient_matches_differences() {
        let spec = MolSpec::new(3, 127.5).with_bins(512);
        let row = [0.2f64, -0.5, 1.1, 3.0, -7.5, 20.0, 0.5, 1.0, -0.3];
        for bin in [0, 3, 250, 260, 511] {
            let (_, g) = log_prob_and_grad(&spec, &row, bin);
            for i in 0..9 {
                let mut a = row;
                let mut b = row;
                a[i] += 1e-6;
                b[i] -= 1e-6;
                let num = (log_prob(&spec, &a, bin) - log_prob(&spec, &b, bin)) / 2e-6;
                let err = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-4);
                assert!(err < 1e-5, "bin {bin} param {i}: {num} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn floor_blocks_log_scale_gradient() {
        let spec = MolSpec::new(1, 127.5);
        let (_, g) = log_prob_and_grad(&spec, &[0.0f64, 0.0, -9.0], 32_768);
        assert_eq!(g[2], 0.0);
    }

    #[test]
    fn tiny_scale_samples_the_mean() {
        let spec = MolSpec::new(2, 127.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let row = [5.0f64, -5.0, 12.0, -3.0, -30.0, -30.0];
        for _ in 0..100 {
            let x = sample(&spec, &row, &mut rng);
            assert!((x - 12.0).abs() < 0.02);
        }
        let clamp = [0.0f64, 500.0, -30.0];
        assert_eq!(sample(&MolSpec::new(1, 127.5), &clamp, &mut rng), 127.5);
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let spec = MolSpec::new(2, 127.5);
        let row = [0.1f32, 0.2, 3.0, -4.0, 0.5, 1.0];
        let a = sample(&spec, &row, &mut ChaCha8Rng::seed_from_u64(4));
        let b = sample(&spec, &row, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
    }

    #[test]
    fn nll_rejects_mismatched_lengths() {
        let spec = MolSpec::new(2, 127.5);
        assert!(nll_and_grad(&spec, &[0.0f64; 5], &[0.0]).is_err());
    }
}
