//! Autoregressive waveform model: a stack of gated dilated causal
//! convolutions conditioned on upsampled mel frames, with a discretized
//! mixture-of-logistics output head.
//!
//! Audio enters and leaves the network in the scaled domain `±target_scale`.
//! Training runs the whole stack in parallel over a clip; generation runs it
//! one sample at a time through per-layer ring buffers.

pub mod config;
pub mod generate;
pub mod mol;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    Conv1d, Graph, Linear, Mode, Padding, ParamId, ParamKind, ParamStore, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use config::{dilation_of, receptive_field, VocoderConfig};
pub use generate::GenState;
pub use mol::MolSpec;

#[derive(Debug, Clone)]
struct Block {
    conv: Conv1d,
    cond: Linear,
    skip: Linear,
    /// Absent on the last block, whose residual output nothing reads.
    res: Option<Linear>,
}

#[derive(Debug, Clone)]
struct Net {
    upsample: [(ParamId, ParamId); 2],
    input: Linear,
    blocks: Vec<Block>,
    output: Linear,
}

impl Net {
    fn build<T: Scalar>(
        cfg: &VocoderConfig,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let c = cfg.conditioning_channels;
        let r = cfg.residual_channels;
        // Kernel width equals stride and every tap starts as the identity, so
        // the initial upsampler repeats each frame.
        let upsample = std::array::from_fn(|i| {
            let f = cfg.upsample_factors[i];
            let w = store.add(
                format!("upsample{i}.weight"),
                ParamKind::Weight,
                Tensor::from_fn(&[f, c, c], |j| {
                    let (a, b) = ((j / c) % c, j % c);
                    if a == b {
                        T::one()
                    } else {
                        T::zero()
                    }
                }),
            );
            let b = store.add(
                format!("upsample{i}.bias"),
                ParamKind::Bias,
                Tensor::zeros(&[c]),
            );
            (w, b)
        });
        let input = Linear::new(store, "input", 1, r, true, rng);
        let blocks = (0..cfg.total_layers)
            .map(|k| {
                let name = format!("layer{k}");
                Block {
                    conv: Conv1d::new(
                        store,
                        &format!("{name}.conv"),
                        cfg.kernel_size,
                        r,
                        2 * r,
                        cfg.dilation(k),
                        Padding::Causal,
                        true,
                        rng,
                    ),
                    cond: Linear::new(store, &format!("{name}.cond"), c, 2 * r, false, rng),
                    skip: Linear::new(
                        store,
                        &format!("{name}.skip"),
                        r,
                        cfg.skip_channels,
                        true,
                        rng,
                    ),
                    res: (k + 1 < cfg.total_layers)
                        .then(|| Linear::new(store, &format!("{name}.res"), r, r, true, rng)),
                }
            })
            .collect();
        let output = Linear::new(
            store,
            "output",
            cfg.skip_channels,
            3 * cfg.mol_components,
            true,
            rng,
        );
        Self {
            upsample,
            input,
            blocks,
            output,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Vocoder<T: Scalar> {
    pub cfg: VocoderConfig,
    pub store: ParamStore<T>,
    net: Net,
}

impl<T: Scalar> Vocoder<T> {
    pub fn new(cfg: VocoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Net::build(&cfg, &mut store, &mut rng);
        Ok(Self { cfg, store, net })
    }

    pub fn from_store(cfg: VocoderConfig, store: ParamStore<T>) -> Result<Self> {
        let fresh = Self::new(cfg, 0)?;
        fresh.store.check_layout(&store)?;
        Ok(Self {
            cfg: fresh.cfg,
            store,
            net: fresh.net,
        })
    }

    pub fn hop(&self) -> usize {
        self.cfg.hop()
    }

    fn check_mel(&self, mel: &Tensor<T>) -> Result<()> {
        if mel.shape().len() != 2 || mel.cols() != self.cfg.conditioning_channels {
            return Err(Error::shape(
                "vocoder conditioning",
                mel.shape(),
                &[
                    mel.shape().first().copied().unwrap_or(0),
                    self.cfg.conditioning_channels,
                ],
            ));
        }
        if mel.rows() == 0 {
            return Err(Error::EmptyInput);
        }
        Ok(())
    }

    /// `[frames, C]` to `[frames·hop, C]`.
    pub fn upsample_graph(&self, g: &mut Graph<'_, T>, mel: Var) -> Result<Var> {
        let slope = T::lit(self.cfg.upsample_leaky_slope);
        let mut x = mel;
        for (i, &(w, b)) in self.net.upsample.iter().enumerate() {
            let (w, b) = (g.param(w), g.param(b));
            x = g
                .tape
                .conv_transpose1d(x, w, Some(b), self.cfg.upsample_factors[i])?;
            x = g.tape.leaky_relu(x, slope);
        }
        Ok(x)
    }

    pub fn upsample(&self, mel: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_mel(mel)?;
        let mut g = Graph::without_grads(&self.store, Mode::Infer, 0);
        let m = g.constant(mel.clone());
        let c = self.upsample_graph(&mut g, m)?;
        Ok(g.value(c).clone())
    }

    /// Mixture parameters `[samples, 3K]` for scaled `audio` given mel frames.
    /// Row `t` sees audio strictly before `t` and conditioning up to `t`.
    pub fn forward_graph(&self, g: &mut Graph<'_, T>, audio: &[T], mel: &Tensor<T>) -> Result<Var> {
        self.check_mel(mel)?;
        let n = mel.rows() * self.hop();
        if audio.len() != n {
            return Err(Error::Invalid(format!(
                "{} audio samples for {} frames of {} samples",
                audio.len(),
                mel.rows(),
                self.hop()
            )));
        }
        let m = g.constant(mel.clone());
        let cond = self.upsample_graph(g, m)?;
        let inv = T::one() / T::lit(self.cfg.target_scale);
        let shifted = Tensor::from_fn(&[n, 1], |t| {
            if t == 0 {
                T::zero()
            } else {
                audio[t - 1] * inv
            }
        });
        let x = g.constant(shifted);
        let mut h = self.net.input.forward(g, x)?;
        let r = self.cfg.residual_channels;
        let mut skips = None;
        for (k, block) in self.net.blocks.iter().enumerate() {
            let z = block.conv.forward(g, h)?;
            let zc = block.cond.forward(g, cond)?;
            let z = g.tape.add(z, zc)?;
            let filt = g.tape.slice_cols(z, 0, r)?;
            let gate = g.tape.slice_cols(z, r, r)?;
            let filt = g.tape.tanh(filt);
            let gate = g.tape.sigmoid(gate);
            let a = g.tape.mul(filt, gate)?;
            let s = block.skip.forward(g, a)?;
            skips = Some(match skips {
                None => s,
                Some(acc) => g.tape.add(acc, s)?,
            });
            if let Some(res) = &block.res {
                let dr = res.forward(g, a)?;
                h = g.tape.add(h, dr)?;
            }
            if !g.value(h).is_finite() {
                return Err(Error::NonFiniteActivation(format!("layer{k}")));
            }
        }
        let s = skips.ok_or_else(|| Error::Invariant("vocoder without layers".into()))?;
        let s = g.tape.relu(s);
        self.net.output.forward(g, s)
    }

    /// Mean negative log-likelihood of scaled `targets`.
    pub fn nll_graph(&self, g: &mut Graph<'_, T>, params: Var, targets: &[T]) -> Result<Var> {
        let (value, grad) = mol::nll_and_grad(&self.cfg.mol(), g.value(params).data(), targets)?;
        Ok(g.tape.fused(params, T::lit(value), grad))
    }

    pub fn forward(&self, audio: &[T], mel: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::without_grads(&self.store, Mode::Infer, 0);
        let p = self.forward_graph(&mut g, audio, mel)?;
        Ok(g.value(p).clone())
    }

    pub fn nll(&self, audio: &[T], mel: &Tensor<T>) -> Result<f64> {
        let p = self.forward(audio, mel)?;
        Ok(mol::nll_and_grad(&self.cfg.mol(), p.data(), audio)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_inputs(cfg: &VocoderConfig, frames: usize, seed: u64) -> (Vec<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = frames * cfg.hop();
        let audio = (0..n).map(|_| rng.random_range(-100.0..100.0)).collect();
        let mel = Tensor::from_fn(&[frames, cfg.conditioning_channels], |_| {
            rng.random_range(-4.0..1.0)
        });
        (audio, mel)
    }

    #[test]
    fn upsampler_lengths() {
        for factors in [[15, 20], [20, 15]] {
            let cfg = VocoderConfig {
                total_layers: 1,
                residual_channels: 2,
                skip_channels: 2,
                upsample_factors: factors,
                ..VocoderConfig::default()
            };
            let v = Vocoder::<f32>::new(cfg, 0).unwrap();
            let c = v.upsample(&Tensor::zeros(&[10, 80])).unwrap();
            assert_eq!(c.shape(), &[3000, 80]);
        }
    }

    #[test]
    fn initial_upsampler_repeats_frames() {
        let cfg = VocoderConfig {
            upsample_leaky_slope: 1.0,
            ..VocoderConfig::tiny()
        };
        let v = Vocoder::<f64>::new(cfg.clone(), 3).unwrap();
        let (_, mel) = random_inputs(&cfg, 4, 1);
        let c = v.upsample(&mel).unwrap();
        for t in 0..c.rows() {
            assert_eq!(c.row(t), mel.row(t / cfg.hop()));
        }
        // the default slope only rescales negative entries
        let v = Vocoder::<f64>::new(VocoderConfig::tiny(), 3).unwrap();
        let pos = mel.map(|x| x.abs() + 0.1);
        let c = v.upsample(&pos).unwrap();
        assert_eq!(c.row(17), pos.row(17 / 6));
    }

    #[test]
    fn output_width_and_names() {
        let v = Vocoder::<f32>::new(VocoderConfig::desk(), 0).unwrap();
        let out = v.store.get(v.store.find("output.weight").unwrap());
        assert_eq!(out.value.shape(), &[128, 30]);
        assert!(v.store.find("layer11.res.weight").is_none());
        assert!(v.store.find("layer10.res.weight").is_some());
    }

    #[test]
    fn future_samples_do_not_leak() {
        let cfg = VocoderConfig {
            total_layers: 4,
            ..VocoderConfig::tiny()
        };
        for seed in 0..10u64 {
            let v = Vocoder::<f64>::new(cfg.clone(), seed).unwrap();
            let (mut audio, mel) = random_inputs(&cfg, 5, seed);
            let base = v.forward(&audio, &mel).unwrap();
            let t = 7 + seed as usize * 2;
            audio[t] += 50.0;
            let moved = v.forward(&audio, &mel).unwrap();
            let w = base.cols();
            assert_eq!(base.data()[..(t + 1) * w], moved.data()[..(t + 1) * w]);
            assert_ne!(base.data()[(t + 1) * w..], moved.data()[(t + 1) * w..]);
        }
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let cfg = VocoderConfig::tiny();
        let v = Vocoder::<f64>::new(cfg.clone(), 0).unwrap();
        let (audio, mel) = random_inputs(&cfg, 3, 0);
        assert!(v.forward(&audio[1..], &mel).is_err());
        assert!(v.forward(&audio, &Tensor::zeros(&[3, 4])).is_err());
    }

    #[test]
    fn store_round_trip() {
        let v = Vocoder::<f32>::new(VocoderConfig::tiny(), 9).unwrap();
        let w = Vocoder::from_store(VocoderConfig::tiny(), v.store.clone()).unwrap();
        assert_eq!(w.store, v.store);
        assert!(Vocoder::from_store(VocoderConfig::desk(), v.store.clone()).is_err());
    }
}
