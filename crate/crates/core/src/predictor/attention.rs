//! Location-sensitive additive attention.

use rand::Rng;

use crate::autodiff::{Conv1d, Graph, Linear, Padding, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct LocationAttention {
    pub query: Linear,
    pub memory: Linear,
    pub location_conv: Conv1d,
    pub location: Linear,
    pub v: Linear,
}

/// Tape handles for the attention state of one decoder step.
#[derive(Debug, Clone, Copy)]
pub struct AttentionState {
    /// `[steps, 1]`, sums to one.
    pub alignment: Var,
    /// `[steps, 1]`, sum of all previous alignments.
    pub cumulative: Var,
    /// `[1, memory_dim]`.
    pub context: Var,
}

impl AttentionState {
    /// Zero alignment history and zero context.
    pub fn initial<T: Scalar>(g: &mut Graph<'_, T>, steps: usize, memory_dim: usize) -> Self {
        Self {
            alignment: g.constant(Tensor::zeros(&[steps, 1])),
            cumulative: g.constant(Tensor::zeros(&[steps, 1])),
            context: g.constant(Tensor::zeros(&[1, memory_dim])),
        }
    }
}

impl LocationAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        query_dim: usize,
        memory_dim: usize,
        attention_dim: usize,
        filters: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            query: Linear::new(
                store,
                &format!("{name}.query"),
                query_dim,
                attention_dim,
                false,
                rng,
            ),
            memory: Linear::new(
                store,
                &format!("{name}.memory"),
                memory_dim,
                attention_dim,
                true,
                rng,
            ),
            location_conv: Conv1d::new(
                store,
                &format!("{name}.location_conv"),
                kernel,
                1,
                filters,
                1,
                Padding::Same,
                false,
                rng,
            ),
            location: Linear::new(
                store,
                &format!("{name}.location"),
                filters,
                attention_dim,
                false,
                rng,
            ),
            v: Linear::new(store, &format!("{name}.v"), attention_dim, 1, false, rng),
        }
    }

    /// `memory·V + b`, computed once per utterance.
    pub fn project_memory<T: Scalar>(&self, g: &mut Graph<'_, T>, memory: Var) -> Result<Var> {
        self.memory.forward(g, memory)
    }

    /// Scores every memory row against `query: [1, query_dim]`.
    pub fn attend<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        query: Var,
        memory: Var,
        projected_memory: Var,
        state: &AttentionState,
    ) -> Result<AttentionState> {
        let steps = g.value(memory).rows();
        if g.value(state.cumulative).shape() != [steps, 1] {
            return Err(Error::shape(
                "attend",
                g.value(state.cumulative).shape(),
                &[steps, 1],
            ));
        }
        let pq = self.query.forward(g, query)?;
        let f = self.location_conv.forward(g, state.cumulative)?;
        let pf = self.location.forward(g, f)?;
        let s = g.tape.add(projected_memory, pf)?;
        let s = g.tape.add_bias(s, pq)?;
        let s = g.tape.tanh(s);
        let e = self.v.forward(g, s)?;
        let alignment = g.tape.softmax(e, 0)?;
        let at = g.tape.transpose(alignment);
        let context = g.tape.matmul(at, memory)?;
        let cumulative = g.tape.add(state.cumulative, alignment)?;
        Ok(AttentionState {
            alignment,
            cumulative,
            context,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(steps: usize, uniform: bool) -> (ParamStore<f64>, LocationAttention, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let att = LocationAttention::new(&mut store, "att", 5, 6, 4, 3, 5, &mut rng);
        let mem = Tensor::from_fn(&[steps, 6], |i| {
            if uniform {
                0.3 + (i % 6) as f64 * 0.1
            } else {
                (i as f64 * 0.7).sin()
            }
        });
        (store, att, mem)
    }

    fn run(
        store: &ParamStore<f64>,
        att: &LocationAttention,
        mem: &Tensor<f64>,
        steps: usize,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut g = Graph::new(store, Mode::Infer, 0);
        let m = g.constant(mem.clone());
        let pm = att.project_memory(&mut g, m).unwrap();
        let q = g.constant(Tensor::from_fn(&[1, 5], |i| 0.2 * i as f64 - 0.3));
        let mut st = AttentionState::initial(&mut g, steps, 6);
        let mut sum = vec![0.0; steps];
        for _ in 0..3 {
            st = att.attend(&mut g, q, m, pm, &st).unwrap();
            for (s, a) in sum.iter_mut().zip(g.value(st.alignment).data()) {
                *s += a;
            }
        }
        (
            g.value(st.alignment).data().to_vec(),
            g.value(st.context).data().to_vec(),
            g.value(st.cumulative)
                .data()
                .iter()
                .zip(&sum)
                .map(|(c, s)| c - s)
                .collect(),
        )
    }

    #[test]
    fn alignment_is_a_distribution_and_cumulative_is_exact() {
        let (store, att, mem) = setup(7, false);
        let (a, _, diff) = run(&store, &att, &mem, 7);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(a.iter().all(|&x| x >= 0.0));
        assert!(diff.iter().all(|&d| d.abs() < 1e-15));
    }

    #[test]
    fn single_memory_row() {
        let (store, att, mem) = setup(1, false);
        let (a, ctx, _) = run(&store, &att, &mem, 1);
        assert_eq!(a, vec![1.0]);
        assert_eq!(ctx, mem.data().to_vec());
    }

    #[test]
    fn uniform_memory_gives_uniform_first_alignment() {
        let (store, att, mem) = setup(4, true);
        let mut g = Graph::new(&store, Mode::Infer, 0);
        let m = g.constant(mem.clone());
        let pm = att.project_memory(&mut g, m).unwrap();
        let q = g.constant(Tensor::from_fn(&[1, 5], |i| i as f64));
        let st = AttentionState::initial(&mut g, 4, 6);
        let st = att.attend(&mut g, q, m, pm, &st).unwrap();
        for &x in g.value(st.alignment).data() {
            assert!((x - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn mismatched_state_is_an_error() {
        let (store, att, mem) = setup(4, false);
        let mut g = Graph::new(&store, Mode::Infer, 0);
        let m = g.constant(mem);
        let pm = att.project_memory(&mut g, m).unwrap();
        let q = g.constant(Tensor::zeros(&[1, 5]));
        let st = AttentionState::initial(&mut g, 3, 6);
        assert!(att.attend(&mut g, q, m, pm, &st).is_err());
    }
}
