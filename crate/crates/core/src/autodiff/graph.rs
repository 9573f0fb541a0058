//! Forward-pass context: a tape, the parameters bound onto it, the execution
//! mode and the RNG that drives dropout and zoneout masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::params::{ParamId, ParamStore};
use crate::autodiff::tape::{Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Batch statistics observed by a training-mode batch norm, to be folded into
/// the running buffers once the step completes.
#[derive(Debug, Clone)]
pub struct StatUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

pub struct Graph<'s, T: Scalar> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    track_grads: bool,
    rng: ChaCha8Rng,
    stats: Vec<StatUpdate<T>>,
}

impl<'s, T: Scalar> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode, seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            track_grads: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            stats: Vec::new(),
        }
    }

    /// A graph whose parameters are bound as constants.
    pub fn without_grads(store: &'s ParamStore<T>, mode: Mode, seed: u64) -> Self {
        let mut g = Self::new(store, mode, seed);
        g.track_grads = false;
        g
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Binds a parameter onto the tape on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let p = self.store.get(id);
        let v = self
            .tape
            .leaf(p.value.clone(), self.track_grads && p.kind.trainable());
        self.bound[id.index()] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    /// Inverted dropout. Active in training mode, or always when `always` is set.
    pub fn dropout(&mut self, x: Var, p: f64, always: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability {p} not in [0, 1)"
            )));
        }
        if p == 0.0 || (self.mode == Mode::Infer && !always) {
            return Ok(x);
        }
        let n = self.tape.value(x).numel();
        let keep = T::lit(1.0 / (1.0 - p));
        let mask = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        self.tape.mul_const(x, mask)
    }

    /// Bernoulli(p) mask of `n` entries, 1 where the unit is kept.
    pub fn bernoulli_mask(&mut self, n: usize, p: f64) -> Vec<T> {
        (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < p {
                    T::one()
                } else {
                    T::zero()
                }
            })
            .collect()
    }

    pub(crate) fn record_stats(&mut self, update: StatUpdate<T>) {
        self.stats.push(update);
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut self.stats)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradients of every bound trainable parameter after [`Graph::backward`].
    pub fn param_grads(&self) -> Vec<(ParamId, &[T])> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                self.tape.grad(v).map(|g| (ParamId(i), g))
            })
            .collect()
    }
}

/// Folds batch statistics into running buffers with the given momentum.
pub fn apply_stat_updates<T: Scalar>(
    store: &mut ParamStore<T>,
    updates: &[StatUpdate<T>],
    momentum: f64,
) {
    let m = T::lit(momentum);
    let one_m = T::one() - m;
    for u in updates {
        for (r, &b) in store
            .value_mut(u.running_mean)
            .data_mut()
            .iter_mut()
            .zip(&u.batch_mean)
        {
            *r = m * *r + one_m * b;
        }
        for (r, &b) in store
            .value_mut(u.running_var)
            .data_mut()
            .iter_mut()
            .zip(&u.batch_var)
        {
            *r = m * *r + one_m * b;
        }
    }
}
