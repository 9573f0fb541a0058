//! Adam with decoupled-from-norms L2, the exponential learning-rate decay, and
//! a parameter EMA.

use crate::autodiff::params::{ParamKind, ParamStore};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Constant learning rate until `decay_start`, then geometric decay reaching
/// `lr_final` at `decay_end`, clamped there afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub lr_init: f64,
    pub lr_final: f64,
    pub decay_start: u64,
    pub decay_end: u64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            lr_init: lr,
            lr_final: lr,
            decay_start: u64::MAX,
            decay_end: u64::MAX,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > 0.0 && self.lr_final > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.lr_final > self.lr_init {
            return Err(Error::Config(format!(
                "lr_final {} exceeds lr_init {}",
                self.lr_final, self.lr_init
            )));
        }
        if self.decay_end < self.decay_start {
            return Err(Error::Config("decay_end precedes decay_start".into()));
        }
        Ok(())
    }

    pub fn at(&self, step: u64) -> f64 {
        if step <= self.decay_start || self.lr_final == self.lr_init {
            return self.lr_init;
        }
        if step >= self.decay_end {
            return self.lr_final;
        }
        let span = (self.decay_end - self.decay_start) as f64;
        let frac = (step - self.decay_start) as f64 / span;
        (self.lr_init * (self.lr_final / self.lr_init).powf(frac)).max(self.lr_final)
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            lr_init: 1e-3,
            lr_final: 1e-5,
            decay_start: 50_000,
            decay_end: 150_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub l2_weight: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            l2_weight: 0.0,
        }
    }
}

/// Per-parameter moments. Buffers get empty moment tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = |kind: ParamKind, shape: &[usize]| {
            if kind.trainable() {
                Tensor::zeros(shape)
            } else {
                Tensor::zeros(&[0])
            }
        };
        Self {
            config,
            m: store
                .iter()
                .map(|(_, p)| zeros(p.kind, p.value.shape()))
                .collect(),
            v: store
                .iter()
                .map(|(_, p)| zeros(p.kind, p.value.shape()))
                .collect(),
            step: 0,
        }
    }

    /// One bias-corrected Adam update. `grads[i]` is the gradient of parameter `i`
    /// (`None` counts as zero).
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<Vec<T>>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for ((_, p), g) in store.iter().zip(grads) {
            if let Some(g) = g {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient(p.name.clone()));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let one = T::one();
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let eps = T::lit(c.eps);
        let lr = T::lit(lr);
        let wd = T::lit(c.l2_weight);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.kind.trainable() {
                continue;
            }
            let decay = p.kind.decayed() && c.l2_weight != 0.0;
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = grads[i].as_deref();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let mut gj = g.map_or(T::zero(), |g| g[j]);
                if decay {
                    gj += wd * *w;
                }
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Option<Vec<T>>], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| {
            let x = x.to_f64_lossy();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let s = T::lit(max_norm / total);
        grads
            .iter_mut()
            .flatten()
            .for_each(|g| g.iter_mut().for_each(|x| *x *= s));
    }
    total
}

/// Shadow copy of every parameter, updated as `shadow ← d·shadow + (1−d)·param`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState<T> {
    pub decay: f64,
    pub shadow: ParamStore<T>,
}

impl<T: Scalar> EmaState<T> {
    pub fn new(store: &ParamStore<T>, decay: f64) -> Self {
        Self {
            decay,
            shadow: store.clone(),
        }
    }

    pub fn update(&mut self, store: &ParamStore<T>) -> Result<()> {
        self.shadow.check_layout(store)?;
        let d = T::lit(self.decay);
        let one_d = T::lit(1.0 - self.decay);
        for ((_, src), dst) in store.iter().zip(self.shadow.iter_mut()) {
            if !src.kind.trainable() {
                // running statistics are copied, not averaged
                dst.value = src.value.clone();
                continue;
            }
            for (s, &p) in dst.value.data_mut().iter_mut().zip(src.value.data()) {
                *s = d * *s + one_d * p;
            }
        }
        Ok(())
    }

    /// Copies the averaged weights into `store` for inference.
    pub fn swap_in(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.copy_values_from(&self.shadow)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", ParamKind::Weight, Tensor::scalar(v));
        s
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = scalar_store(0.5);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        adam.step(&mut store, &[Some(vec![1.0])], 1e-3).unwrap();
        let moved = 0.5 - store.value(crate::autodiff::params::ParamId(0)).data()[0];
        assert!((moved - 1e-3 / (1.0 + 1e-6)).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut store = scalar_store(0.5);
        let before = store.clone();
        let mut adam = AdamState::new(&store, AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut store, &[Some(vec![0.0])], 1e-3).unwrap();
        }
        assert_eq!(store, before);
        assert_eq!(adam.step, 5);
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        let mut store = scalar_store(0.0);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        for _ in 0..100 {
            let w = store.value(crate::autodiff::params::ParamId(0)).data()[0];
            adam.step(&mut store, &[Some(vec![2.0 * (w - 3.0)])], 0.1)
                .unwrap();
        }
        let w = store.value(crate::autodiff::params::ParamId(0)).data()[0];
        assert!((w - 3.0).abs() < 0.05, "w = {w}");
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = scalar_store(0.0);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let err = adam
            .step(&mut store, &[Some(vec![f64::NAN])], 0.1)
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));
    }

    #[test]
    fn l2_skips_biases() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", ParamKind::Weight, Tensor::scalar(1.0));
        store.add("b", ParamKind::Bias, Tensor::scalar(1.0));
        let cfg = AdamConfig {
            l2_weight: 0.5,
            ..Default::default()
        };
        let mut adam = AdamState::new(&store, cfg);
        adam.step(&mut store, &[None, None], 0.1).unwrap();
        assert!(store.value(crate::autodiff::params::ParamId(0)).data()[0] < 1.0);
        assert_eq!(
            store.value(crate::autodiff::params::ParamId(1)).data()[0],
            1.0
        );
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = LrSchedule::default();
        assert_eq!(s.at(0), 1e-3);
        assert_eq!(s.at(50_000), 1e-3);
        assert!((s.at(100_000) - 1e-4).abs() < 1e-15);
        assert_eq!(s.at(150_000), 1e-5);
        assert_eq!(s.at(10_000_000), 1e-5);
        let bad = LrSchedule {
            lr_final: 1e-2,
            ..s
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn ema_one_step_and_limits() {
        let store = scalar_store(0.0);
        let mut ema = EmaState::new(&store, 0.9999);
        let live = scalar_store(1.0);
        ema.update(&live).unwrap();
        let s = ema.shadow.value(crate::autodiff::params::ParamId(0)).data()[0];
        assert!((s - 1e-4).abs() < 1e-15);

        let mut tracking = EmaState::new(&store, 0.0);
        tracking.update(&live).unwrap();
        assert_eq!(tracking.shadow, live);

        let mut frozen = EmaState::new(&store, 1.0);
        frozen.update(&live).unwrap();
        assert_eq!(frozen.shadow, store);
    }

    #[test]
    fn ema_converges_geometrically_to_constant_params() {
        let live = scalar_store(2.0);
        let mut ema = EmaState::new(&scalar_store(0.0), 0.5);
        for k in 1..=20 {
            ema.update(&live).unwrap();
            let s = ema.shadow.value(crate::autodiff::params::ParamId(0)).data()[0];
            assert!((2.0 - s - 2.0 * 0.5f64.powi(k)).abs() < 1e-12);
        }
    }
}
