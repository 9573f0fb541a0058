//! Parameterized building blocks shared by the predictor and the vocoder.

use rand::Rng;

use crate::autodiff::graph::{Graph, Mode, StatUpdate};
use crate::autodiff::params::{ParamId, ParamKind, ParamStore};
use crate::autodiff::tape::{Padding, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add_glorot(
            format!("{name}.weight"),
            &[fan_in, fan_out],
            fan_in,
            fan_out,
            rng,
        );
        let b = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                ParamKind::Bias,
                Tensor::zeros(&[fan_out]),
            )
        });
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub dilation: usize,
    pub padding: Padding,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        kernel: usize,
        c_in: usize,
        c_out: usize,
        dilation: usize,
        padding: Padding,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add_glorot(
            format!("{name}.weight"),
            &[kernel, c_in, c_out],
            kernel * c_in,
            kernel * c_out,
            rng,
        );
        let b = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                ParamKind::Bias,
                Tensor::zeros(&[c_out]),
            )
        });
        Self {
            w,
            b,
            dilation,
            padding,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.tape.conv1d(x, w, b, self.dilation, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(
                format!("{name}.gamma"),
                ParamKind::Norm,
                Tensor::full(&[channels], T::one()),
            ),
            beta: store.add(
                format!("{name}.beta"),
                ParamKind::Norm,
                Tensor::zeros(&[channels]),
            ),
            running_mean: store.add(
                format!("{name}.running_mean"),
                ParamKind::Buffer,
                Tensor::zeros(&[channels]),
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                ParamKind::Buffer,
                Tensor::full(&[channels], T::one()),
            ),
        }
    }

    /// Training mode normalizes with batch statistics; inference uses running buffers.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        match g.mode() {
            Mode::Train => {
                let (y, stats) = g.tape.batch_norm(x, gamma, beta, None)?;
                if let Some((batch_mean, batch_var)) = stats {
                    g.record_stats(StatUpdate {
                        running_mean: self.running_mean,
                        running_var: self.running_var,
                        batch_mean,
                        batch_var,
                    });
                }
                Ok(y)
            }
            Mode::Infer => {
                let store = g.store();
                let rm = store.value(self.running_mean).data();
                let rv = store.value(self.running_var).data();
                let (y, _) = g.tape.batch_norm(x, gamma, beta, Some((rm, rv)))?;
                Ok(y)
            }
        }
    }
}

/// Hidden and cell state of one LSTM layer, each `[1, hidden]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// LSTM cell with gate order (input, forget, candidate, output).
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w_ih = store.add_glorot(
            format!("{name}.w_ih"),
            &[input, 4 * hidden],
            input,
            4 * hidden,
            rng,
        );
        let w_hh = store.add_glorot(
            format!("{name}.w_hh"),
            &[hidden, 4 * hidden],
            hidden,
            4 * hidden,
            rng,
        );
        let mut bias = vec![T::zero(); 4 * hidden];
        bias[hidden..2 * hidden]
            .iter_mut()
            .for_each(|b| *b = T::one());
        let b = store.add(
            format!("{name}.bias"),
            ParamKind::Bias,
            Tensor::new(vec![4 * hidden], bias).expect("sized"),
        );
        Self {
            w_ih,
            w_hh,
            b,
            hidden,
        }
    }

    pub fn zero_state<T: Scalar>(&self, g: &mut Graph<'_, T>) -> LstmState {
        LstmState {
            h: g.constant(Tensor::zeros(&[1, self.hidden])),
            c: g.constant(Tensor::zeros(&[1, self.hidden])),
        }
    }

    /// Input contribution `x·W_ih + b` for every row of `x: [T, input]`.
    pub fn project_input<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w_ih);
        let b = g.param(self.b);
        g.tape.linear(x, w, Some(b))
    }

    pub fn step<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        state: LstmState,
        zoneout: f64,
    ) -> Result<LstmState> {
        let proj = self.project_input(g, x)?;
        self.step_projected(g, proj, state, zoneout)
    }

    /// One recurrence step from a precomputed `[1, 4·hidden]` input projection.
    ///
    /// Zoneout keeps each previous unit with probability `zoneout` in training;
    /// inference blends previous and new state by the same probability.
    pub fn step_projected<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        proj: Var,
        state: LstmState,
        zoneout: f64,
    ) -> Result<LstmState> {
        let h = self.hidden;
        let w_hh = g.param(self.w_hh);
        let rec = g.tape.matmul(state.h, w_hh)?;
        let gates = g.tape.add(proj, rec)?;
        let i = g.tape.slice_cols(gates, 0, h)?;
        let f = g.tape.slice_cols(gates, h, h)?;
        let cand = g.tape.slice_cols(gates, 2 * h, h)?;
        let o = g.tape.slice_cols(gates, 3 * h, h)?;
        let i = g.tape.sigmoid(i);
        let f = g.tape.sigmoid(f);
        let cand = g.tape.tanh(cand);
        let o = g.tape.sigmoid(o);
        let fc = g.tape.mul(f, state.c)?;
        let ig = g.tape.mul(i, cand)?;
        let c_new = g.tape.add(fc, ig)?;
        let tc = g.tape.tanh(c_new);
        let h_new = g.tape.mul(o, tc)?;
        if zoneout <= 0.0 {
            return Ok(LstmState { h: h_new, c: c_new });
        }
        Ok(LstmState {
            h: zoneout_mix(g, state.h, h_new, zoneout)?,
            c: zoneout_mix(g, state.c, c_new, zoneout)?,
        })
    }
}

fn zoneout_mix<T: Scalar>(g: &mut Graph<'_, T>, prev: Var, new: Var, p: f64) -> Result<Var> {
    let n = g.value(prev).numel();
    let (keep, take): (Vec<T>, Vec<T>) = match g.mode() {
        Mode::Train => {
            let m = g.bernoulli_mask(n, p);
            let inv = m.iter().map(|&k| T::one() - k).collect();
            (m, inv)
        }
        Mode::Infer => (vec![T::lit(p); n], vec![T::lit(1.0 - p); n]),
    };
    let a = g.tape.mul_const(prev, keep)?;
    let b = g.tape.mul_const(new, take)?;
    g.tape.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cell_and_store(zoneout_input: usize, hidden: usize) -> (ParamStore<f64>, LstmCell) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "cell", zoneout_input, hidden, &mut rng);
        (store, cell)
    }

    fn run(
        store: &ParamStore<f64>,
        cell: &LstmCell,
        mode: Mode,
        p: f64,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut g = Graph::new(store, mode, 9);
        let x = g.constant(Tensor::from_fn(&[1, 3], |i| 0.3 * i as f64 - 0.2));
        let h0 = g.constant(Tensor::from_fn(&[1, 4], |i| 0.1 * i as f64));
        let c0 = g.constant(Tensor::from_fn(&[1, 4], |i| -0.2 * i as f64));
        let s = cell.step(&mut g, x, LstmState { h: h0, c: c0 }, p).unwrap();
        (
            g.value(s.h).data().to_vec(),
            g.value(s.c).data().to_vec(),
            g.value(h0).data().to_vec(),
            g.value(c0).data().to_vec(),
        )
    }

    #[test]
    fn zoneout_one_in_training_freezes_state() {
        let (store, cell) = cell_and_store(3, 4);
        let (h, c, h0, c0) = run(&store, &cell, Mode::Train, 1.0);
        assert_eq!(h, h0);
        assert_eq!(c, c0);
    }

    #[test]
    fn zoneout_zero_is_plain_lstm() {
        let (store, cell) = cell_and_store(3, 4);
        let (h_train, c_train, _, _) = run(&store, &cell, Mode::Train, 0.0);
        let (h_inf, c_inf, _, _) = run(&store, &cell, Mode::Infer, 0.0);
        assert_eq!(h_train, h_inf);
        assert_eq!(c_train, c_inf);
    }

    #[test]
    fn zoneout_inference_is_expectation() {
        let (store, cell) = cell_and_store(3, 4);
        let (h_new, _, h0, _) = run(&store, &cell, Mode::Infer, 0.0);
        let (h_mix, _, _, _) = run(&store, &cell, Mode::Infer, 0.1);
        for ((m, n), p) in h_mix.iter().zip(&h_new).zip(&h0) {
            assert!((m - (0.1 * p + 0.9 * n)).abs() < 1e-15);
        }
    }

    #[test]
    fn dropout_is_identity_in_inference() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store, Mode::Infer, 1);
        let x = g.constant(Tensor::full(&[2, 5], 1.5));
        let y = g.dropout(x, 0.5, false).unwrap();
        assert_eq!(x, y);
        let z = g.dropout(x, 0.5, true).unwrap();
        assert_ne!(x, z);
    }
}
