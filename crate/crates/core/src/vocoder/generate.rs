//! Sample-by-sample generation.
//!
//! Each layer keeps the last `2d` inputs it has seen in a ring buffer, so a
//! step costs one matrix-vector product per tap instead of a pass over the
//! whole history. At step `t` slot `t mod 2d` still holds `h[t − 2d]` until it
//! is overwritten with `h[t]`, and slot `(t + d) mod 2d` holds `h[t − d]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::tensor::gemm_acc;
use crate::autodiff::{ParamStore, Tensor};
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vocoder::{mol, Vocoder};

fn weights<T: Scalar>(store: &ParamStore<T>, name: &str) -> Result<Vec<T>> {
    let id = store
        .find(name)
        .ok_or_else(|| Error::Invariant(format!("missing parameter `{name}`")))?;
    Ok(store.value(id).data().to_vec())
}

struct Layer<T> {
    dilation: usize,
    conv_w: Vec<T>,
    conv_b: Vec<T>,
    cond_w: Vec<T>,
    skip_w: Vec<T>,
    skip_b: Vec<T>,
    res: Option<(Vec<T>, Vec<T>)>,
    ring: Vec<T>,
}

/// Incremental forward state for one utterance.
pub struct GenState<T: Scalar> {
    r: usize,
    s: usize,
    c: usize,
    inv_scale: T,
    input_w: Vec<T>,
    input_b: Vec<T>,
    layers: Vec<Layer<T>>,
    out_w: Vec<T>,
    out_b: Vec<T>,
    t: usize,
    h: Vec<T>,
    z: Vec<T>,
    zc: Vec<T>,
    a: Vec<T>,
    skip: Vec<T>,
    out: Vec<T>,
}

impl<T: Scalar> GenState<T> {
    pub fn new(v: &Vocoder<T>) -> Result<Self> {
        let cfg = &v.cfg;
        let (r, s, c) = (
            cfg.residual_channels,
            cfg.skip_channels,
            cfg.conditioning_channels,
        );
        let store = &v.store;
        let layers = (0..cfg.total_layers)
            .map(|k| {
                let d = cfg.dilation(k);
                let res = if k + 1 < cfg.total_layers {
                    Some((
                        weights(store, &format!("layer{k}.res.weight"))?,
                        weights(store, &format!("layer{k}.res.bias"))?,
                    ))
                } else {
                    None
                };
                Ok(Layer {
                    dilation: d,
                    conv_w: weights(store, &format!("layer{k}.conv.weight"))?,
                    conv_b: weights(store, &format!("layer{k}.conv.bias"))?,
                    cond_w: weights(store, &format!("layer{k}.cond.weight"))?,
                    skip_w: weights(store, &format!("layer{k}.skip.weight"))?,
                    skip_b: weights(store, &format!("layer{k}.skip.bias"))?,
                    res,
                    ring: vec![T::zero(); 2 * d * r],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let k3 = 3 * cfg.mol_components;
        Ok(Self {
            r,
            s,
            c,
            inv_scale: T::one() / T::lit(cfg.target_scale),
            input_w: weights(store, "input.weight")?,
            input_b: weights(store, "input.bias")?,
            layers,
            out_w: weights(store, "output.weight")?,
            out_b: weights(store, "output.bias")?,
            t: 0,
            h: vec![T::zero(); r],
            z: vec![T::zero(); 2 * r],
            zc: vec![T::zero(); 2 * r],
            a: vec![T::zero(); r],
            skip: vec![T::zero(); s],
            out: vec![T::zero(); k3],
        })
    }

    /// Steps taken so far.
    pub fn position(&self) -> usize {
        self.t
    }

    /// Mixture parameters for the next sample given the previous scaled
    /// sample and this sample's conditioning row.
    pub fn step(&mut self, prev: T, cond: &[T]) -> &[T] {
        debug_assert_eq!(cond.len(), self.c);
        let (r, s, t) = (self.r, self.s, self.t);
        let x = prev * self.inv_scale;
        for ((h, &w), &b) in self.h.iter_mut().zip(&self.input_w).zip(&self.input_b) {
            *h = x * w + b;
        }
        self.skip.iter_mut().for_each(|v| *v = T::zero());
        for layer in &mut self.layers {
            let d = layer.dilation;
            let now = t % (2 * d);
            let back = (t + d) % (2 * d);
            let tap = 2 * r * r;
            self.z.iter_mut().for_each(|v| *v = T::zero());
            gemm_acc(
                &layer.ring[now * r..(now + 1) * r],
                &layer.conv_w[..tap],
                &mut self.z,
                1,
                r,
                2 * r,
            );
            gemm_acc(
                &layer.ring[back * r..(back + 1) * r],
                &layer.conv_w[tap..2 * tap],
                &mut self.z,
                1,
                r,
                2 * r,
            );
            gemm_acc(&self.h, &layer.conv_w[2 * tap..], &mut self.z, 1, r, 2 * r);
            for (z, &b) in self.z.iter_mut().zip(&layer.conv_b) {
                *z += b;
            }
            self.zc.iter_mut().for_each(|v| *v = T::zero());
            gemm_acc(cond, &layer.cond_w, &mut self.zc, 1, self.c, 2 * r);
            for (z, &zc) in self.z.iter_mut().zip(&self.zc) {
                *z += zc;
            }
            layer.ring[now * r..(now + 1) * r].copy_from_slice(&self.h);
            for i in 0..r {
                self.a[i] = self.z[i].tanh() * self.z[r + i].sigmoid();
            }
            let mut ds = layer.skip_b.clone();
            gemm_acc(&self.a, &layer.skip_w, &mut ds, 1, r, s);
            for (acc, v) in self.skip.iter_mut().zip(ds) {
                *acc += v;
            }
            if let Some((w, b)) = &layer.res {
                let mut dr = b.clone();
                gemm_acc(&self.a, w, &mut dr, 1, r, r);
                for (h, v) in self.h.iter_mut().zip(dr) {
                    *h += v;
                }
            }
        }
        for v in &mut self.skip {
            *v = v.max(T::zero());
        }
        self.out.copy_from_slice(&self.out_b);
        gemm_acc(
            &self.skip,
            &self.out_w,
            &mut self.out,
            1,
            s,
            self.out_b.len(),
        );
        self.t += 1;
        &self.out
    }
}

impl<T: Scalar> Vocoder<T> {
    /// Runs the incremental path on known audio; row `t` must match
    /// [`Vocoder::forward`].
    pub fn forward_incremental(&self, audio: &[T], mel: &Tensor<T>) -> Result<Tensor<T>> {
        let cond = self.upsample(mel)?;
        if audio.len() != cond.rows() {
            return Err(Error::Invalid(format!(
                "{} audio samples for {} conditioning rows",
                audio.len(),
                cond.rows()
            )));
        }
        let mut st = GenState::new(self)?;
        let w = 3 * self.cfg.mol_components;
        let mut out = Vec::with_capacity(audio.len() * w);
        for t in 0..audio.len() {
            let prev = if t == 0 { T::zero() } else { audio[t - 1] };
            out.extend_from_slice(st.step(prev, cond.row(t)));
        }
        Tensor::new(vec![audio.len(), w], out)
    }

    /// Draws `frames·hop` samples, feeding each one back as the next input.
    /// The waveform is in `[−1, 1]`.
    pub fn generate(&self, mel: &Tensor<T>, seed: u64) -> Result<Waveform<T>> {
        let cond = self.upsample(mel)?;
        let spec = self.cfg.mol();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut st = GenState::new(self)?;
        let inv = T::one() / T::lit(self.cfg.target_scale);
        let mut prev = T::zero();
        let mut samples = Vec::with_capacity(cond.rows());
        for t in 0..cond.rows() {
            let row = st.step(prev, cond.row(t));
            if !row.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteActivation(format!("output at sample {t}")));
            }
            prev = mol::sample(&spec, row, &mut rng);
            samples.push(prev * inv);
        }
        Ok(Waveform::new(samples, self.cfg.sample_rate))
    }
}
