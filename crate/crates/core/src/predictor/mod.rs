//! Sequence-to-sequence spectrogram predictor: character encoder,
//! location-sensitive attention, autoregressive LSTM decoder with a pre-net,
//! stop-token head and a convolutional post-net.

pub mod attention;
pub mod config;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    BatchNorm, Conv1d, Graph, Linear, LstmCell, LstmState, Mode, Padding, ParamId, ParamKind,
    ParamStore, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::text::CharSequence;

pub use attention::{AttentionState, LocationAttention};
pub use config::{AttentionQuery, PredictorConfig};

/// Tape handles of one teacher-forced or free-running pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `[frames, output_dim]`.
    pub before: Var,
    /// Same as `before` when the post-net is disabled.
    pub after: Var,
    /// `[frames, 1]`.
    pub stop_logits: Var,
    /// `[frames, encoder_steps]`.
    pub alignments: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput<T> {
    pub before_postnet: Tensor<T>,
    pub after_postnet: Tensor<T>,
    pub stop_logits: Vec<T>,
    pub stop_probs: Vec<T>,
    pub alignments: Tensor<T>,
    /// Set when inference hit `max_decoder_steps` without a stop.
    pub truncated: bool,
}

impl<T: Scalar> DecoderOutput<T> {
    pub fn frames(&self) -> usize {
        self.before_postnet.rows()
    }

    fn from_graph(g: &Graph<'_, T>, v: &ForwardVars, truncated: bool) -> Self {
        let stop_logits = g.value(v.stop_logits).data().to_vec();
        Self {
            before_postnet: g.value(v.before).clone(),
            after_postnet: g.value(v.after).clone(),
            stop_probs: stop_logits.iter().map(|x| x.sigmoid()).collect(),
            stop_logits,
            alignments: g.value(v.alignments).clone(),
            truncated,
        }
    }
}

/// Per-term losses, each a mean over its elements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub before: f64,
    pub after: f64,
    pub stop: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.before + self.after + self.stop
    }
}

/// 1.0 on the final frame, 0.0 elsewhere.
pub fn stop_targets<T: Scalar>(frames: usize) -> Vec<T> {
    padded_stop_targets(frames, frames)
}

/// Stop targets for `frames` real frames padded out to `padded`: one from the
/// last real frame onwards.
pub fn padded_stop_targets<T: Scalar>(frames: usize, padded: usize) -> Vec<T> {
    (0..padded.max(frames))
        .map(|i| if i + 1 >= frames { T::one() } else { T::zero() })
        .collect()
}

/// Index of the first probability strictly above `threshold`.
pub fn stop_index<T: Scalar>(probs: &[T], threshold: f64) -> Option<usize> {
    probs.iter().position(|p| p.to_f64_lossy() > threshold)
}

/// Mean squared errors before and after the post-net plus the stop-token
/// binary cross-entropy, evaluated directly on values.
pub fn loss_terms<T: Scalar>(out: &DecoderOutput<T>, target: &Tensor<T>) -> Result<LossTerms> {
    if out.before_postnet.shape() != target.shape() || out.after_postnet.shape() != target.shape() {
        return Err(Error::shape(
            "predictor loss",
            out.before_postnet.shape(),
            target.shape(),
        ));
    }
    let mse = |a: &Tensor<T>| {
        a.data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let d = (p - t).to_f64_lossy();
                d * d
            })
            .sum::<f64>()
            / target.numel() as f64
    };
    let st = stop_targets::<f64>(out.stop_logits.len());
    let stop = out
        .stop_logits
        .iter()
        .zip(&st)
        .map(|(&z, &y)| {
            let z = z.to_f64_lossy();
            z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
        })
        .sum::<f64>()
        / st.len().max(1) as f64;
    Ok(LossTerms {
        before: mse(&out.before_postnet),
        after: mse(&out.after_postnet),
        stop,
    })
}

#[derive(Debug, Clone)]
struct Net {
    embedding: ParamId,
    enc_convs: Vec<(Conv1d, BatchNorm)>,
    enc_fw: LstmCell,
    enc_bw: LstmCell,
    prenet: Vec<Linear>,
    decoder: Vec<LstmCell>,
    attention: LocationAttention,
    frame_proj: Linear,
    stop_proj: Linear,
    postnet: Vec<(Conv1d, BatchNorm)>,
}

impl Net {
    fn build<T: Scalar>(
        cfg: &PredictorConfig,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = (3.0f64).sqrt();
        let embedding = store.add(
            "encoder.embedding",
            ParamKind::Embedding,
            Tensor::from_fn(&[cfg.vocab_size, cfg.embedding_dim], |_| {
                T::lit(
                    (rand::Rng::random::<f64>(rng) * 2.0 - 1.0) * bound
                        / (cfg.embedding_dim as f64).sqrt(),
                )
            }),
        );
        let mut enc_convs = Vec::new();
        let mut c_in = cfg.embedding_dim;
        for i in 0..cfg.encoder_conv_layers {
            let name = format!("encoder.conv{i}");
            let conv = Conv1d::new(
                store,
                &name,
                cfg.encoder_conv_width,
                c_in,
                cfg.encoder_conv_filters,
                1,
                Padding::Same,
                true,
                rng,
            );
            let bn = BatchNorm::new(store, &format!("{name}.bn"), cfg.encoder_conv_filters);
            enc_convs.push((conv, bn));
            c_in = cfg.encoder_conv_filters;
        }
        let half = cfg.encoder_lstm_units / 2;
        let enc_fw = LstmCell::new(store, "encoder.lstm_fw", c_in, half, rng);
        let enc_bw = LstmCell::new(store, "encoder.lstm_bw", c_in, half, rng);
        let memory_dim = cfg.encoder_lstm_units;

        let mut prenet = Vec::new();
        let mut p_in = cfg.output_dim;
        for i in 0..cfg.prenet_layers {
            prenet.push(Linear::new(
                store,
                &format!("decoder.prenet{i}"),
                p_in,
                cfg.prenet_units,
                true,
                rng,
            ));
            p_in = cfg.prenet_units;
        }
        let mut decoder = Vec::new();
        let mut d_in = cfg.prenet_units + memory_dim;
        for i in 0..cfg.decoder_lstm_layers {
            decoder.push(LstmCell::new(
                store,
                &format!("decoder.lstm{i}"),
                d_in,
                cfg.decoder_lstm_units,
                rng,
            ));
            d_in = cfg.decoder_lstm_units;
        }
        let attention = LocationAttention::new(
            store,
            "attention",
            cfg.decoder_lstm_units,
            memory_dim,
            cfg.attention_dim,
            cfg.location_filters,
            cfg.location_kernel,
            rng,
        );
        let proj_in = cfg.decoder_lstm_units + memory_dim;
        let frame_proj = Linear::new(
            store,
            "decoder.frame_proj",
            proj_in,
            cfg.output_dim,
            true,
            rng,
        );
        let stop_proj = Linear::new(store, "decoder.stop_proj", proj_in, 1, true, rng);

        let mut postnet = Vec::new();
        if cfg.postnet_enabled {
            for i in 0..cfg.postnet_layers {
                let c_in = if i == 0 {
                    cfg.output_dim
                } else {
                    cfg.postnet_filters
                };
                let c_out = if i + 1 == cfg.postnet_layers {
                    cfg.output_dim
                } else {
                    cfg.postnet_filters
                };
                let name = format!("postnet.conv{i}");
                let conv = Conv1d::new(
                    store,
                    &name,
                    cfg.postnet_width,
                    c_in,
                    c_out,
                    1,
                    Padding::Same,
                    true,
                    rng,
                );
                let bn = BatchNorm::new(store, &format!("{name}.bn"), c_out);
                postnet.push((conv, bn));
            }
        }
        Self {
            embedding,
            enc_convs,
            enc_fw,
            enc_bw,
            prenet,
            decoder,
            attention,
            frame_proj,
            stop_proj,
            postnet,
        }
    }
}

/// Recurrent state carried between decoder steps.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub lstm: Vec<LstmState>,
    pub attention: AttentionState,
}

fn finite<T: Scalar>(g: &Graph<'_, T>, v: Var, layer: &str) -> Result<()> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation(layer.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct Predictor<T: Scalar> {
    pub cfg: PredictorConfig,
    pub store: ParamStore<T>,
    net: Net,
}

impl<T: Scalar> Predictor<T> {
    pub fn new(cfg: PredictorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Net::build(&cfg, &mut store, &mut rng);
        Ok(Self { cfg, store, net })
    }

    /// Rebuilds the layer wiring for `cfg` around existing parameters.
    pub fn from_store(cfg: PredictorConfig, store: ParamStore<T>) -> Result<Self> {
        let fresh = Self::new(cfg, 0)?;
        fresh.store.check_layout(&store)?;
        Ok(Self {
            cfg: fresh.cfg,
            store,
            net: fresh.net,
        })
    }

    pub fn encode(&self, g: &mut Graph<'_, T>, chars: &CharSequence) -> Result<Var> {
        if chars.is_empty() {
            return Err(Error::EmptyInput);
        }
        let table = g.param(self.net.embedding);
        let mut x = g.tape.embedding(table, &chars.ids)?;
        for (i, (conv, bn)) in self.net.enc_convs.iter().enumerate() {
            x = conv.forward(g, x)?;
            x = bn.forward(g, x)?;
            x = g.tape.relu(x);
            x = g.dropout(x, self.cfg.dropout_p, false)?;
            finite(g, x, &format!("encoder.conv{i}"))?;
        }
        let fw = self.run_lstm(g, &self.net.enc_fw, x, false)?;
        let bw = self.run_lstm(g, &self.net.enc_bw, x, true)?;
        let out = g.tape.concat_cols(&[fw, bw])?;
        finite(g, out, "encoder.lstm")?;
        Ok(out)
    }

    fn run_lstm(
        &self,
        g: &mut Graph<'_, T>,
        cell: &LstmCell,
        x: Var,
        reverse: bool,
    ) -> Result<Var> {
        let steps = g.value(x).rows();
        let proj = cell.project_input(g, x)?;
        let mut state = cell.zero_state(g);
        let mut outs = vec![None; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let p = g.tape.slice_rows(proj, t, 1)?;
            state = cell.step_projected(g, p, state, self.cfg.zoneout_p)?;
            outs[t] = Some(state.h);
        }
        let outs: Vec<Var> = outs
            .into_iter()
            .map(|v| v.expect("every step visited"))
            .collect();
        g.tape.concat_rows(&outs)
    }

    /// Pre-net over any number of input frames, dropout always active.
    pub fn prenet(&self, g: &mut Graph<'_, T>, frames: Var) -> Result<Var> {
        let mut x = frames;
        for layer in &self.net.prenet {
            x = layer.forward(g, x)?;
            x = g.tape.relu(x);
            x = g.dropout(x, self.cfg.prenet_dropout_p, true)?;
        }
        finite(g, x, "decoder.prenet")?;
        Ok(x)
    }

    pub fn initial_state(&self, g: &mut Graph<'_, T>, encoder_steps: usize) -> DecoderState {
        DecoderState {
            lstm: self.net.decoder.iter().map(|c| c.zero_state(g)).collect(),
            attention: AttentionState::initial(g, encoder_steps, self.cfg.encoder_lstm_units),
        }
    }

    /// One decoder step from a pre-net output row. Returns the frame
    /// `[1, output_dim]`, the stop logit `[1, 1]` and the next state.
    pub fn decode_step(
        &self,
        g: &mut Graph<'_, T>,
        prenet_row: Var,
        memory: Var,
        projected_memory: Var,
        state: &DecoderState,
    ) -> Result<(Var, Var, DecoderState)> {
        let mut input = g.tape.concat_cols(&[prenet_row, state.attention.context])?;
        let mut lstm = Vec::with_capacity(self.net.decoder.len());
        for (i, cell) in self.net.decoder.iter().enumerate() {
            let s = cell.step(g, input, state.lstm[i], self.cfg.zoneout_p)?;
            finite(g, s.h, &format!("decoder.lstm{i}"))?;
            input = s.h;
            lstm.push(s);
        }
        let last = lstm.last().expect("at least one decoder layer").h;
        let query = match self.cfg.attention_query {
            AttentionQuery::First => lstm[0].h,
            AttentionQuery::Last => last,
        };
        let attention =
            self.net
                .attention
                .attend(g, query, memory, projected_memory, &state.attention)?;
        finite(g, attention.context, "attention")?;
        let hc = g.tape.concat_cols(&[last, attention.context])?;
        let frame = self.net.frame_proj.forward(g, hc)?;
        finite(g, frame, "decoder.frame_proj")?;
        let stop = self.net.stop_proj.forward(g, hc)?;
        finite(g, stop, "decoder.stop_proj")?;
        Ok((frame, stop, DecoderState { lstm, attention }))
    }

    /// Residual post-net; the identity when disabled.
    pub fn postnet(&self, g: &mut Graph<'_, T>, before: Var) -> Result<Var> {
        if !self.cfg.postnet_enabled {
            return Ok(before);
        }
        let n = self.net.postnet.len();
        let mut x = before;
        for (i, (conv, bn)) in self.net.postnet.iter().enumerate() {
            x = conv.forward(g, x)?;
            x = bn.forward(g, x)?;
            if i + 1 < n {
                x = g.tape.tanh(x);
            }
            x = g.dropout(x, self.cfg.dropout_p, false)?;
        }
        finite(g, x, "postnet")?;
        g.tape.add(before, x)
    }

    fn check_target(&self, target: &Tensor<T>) -> Result<()> {
        if target.shape().len() != 2 || target.rows() == 0 {
            return Err(Error::EmptyInput);
        }
        if target.cols() != self.cfg.output_dim {
            return Err(Error::shape(
                "teacher-forced target",
                target.shape(),
                &[target.rows(), self.cfg.output_dim],
            ));
        }
        Ok(())
    }

    /// Frame `t` is decoded from ground-truth frame `t − 1`, with a zero go-frame.
    pub fn forward_teacher_forced_graph(
        &self,
        g: &mut Graph<'_, T>,
        chars: &CharSequence,
        target: &Tensor<T>,
    ) -> Result<ForwardVars> {
        self.check_target(target)?;
        let frames = target.rows();
        let d = self.cfg.output_dim;
        let memory = self.encode(g, chars)?;
        let pm = self.net.attention.project_memory(g, memory)?;

        let mut shifted = vec![T::zero(); frames * d];
        shifted[d..].copy_from_slice(&target.data()[..(frames - 1) * d]);
        let inputs = g.constant(Tensor::new(vec![frames, d], shifted)?);
        let pre = self.prenet(g, inputs)?;

        let mut state = self.initial_state(g, chars.len());
        let (mut out, mut stops, mut aligns) = (Vec::new(), Vec::new(), Vec::new());
        for t in 0..frames {
            let row = g.tape.slice_rows(pre, t, 1)?;
            let (frame, stop, next) = self.decode_step(g, row, memory, pm, &state)?;
            out.push(frame);
            stops.push(stop);
            aligns.push(g.tape.transpose(next.attention.alignment));
            state = next;
        }
        let before = g.tape.concat_rows(&out)?;
        let stop_logits = g.tape.concat_rows(&stops)?;
        let alignments = g.tape.concat_rows(&aligns)?;
        let after = self.postnet(g, before)?;
        Ok(ForwardVars {
            before,
            after,
            stop_logits,
            alignments,
        })
    }

    /// Summed loss on the tape, plus its three terms.
    pub fn loss_graph(
        &self,
        g: &mut Graph<'_, T>,
        v: &ForwardVars,
        target: &Tensor<T>,
    ) -> Result<(Var, [Var; 3])> {
        self.padded_loss_graph(g, v, target, target.rows())
    }

    /// As [`Predictor::loss_graph`] for a target whose rows past `frames` are
    /// batch padding.
    pub fn padded_loss_graph(
        &self,
        g: &mut Graph<'_, T>,
        v: &ForwardVars,
        target: &Tensor<T>,
        frames: usize,
    ) -> Result<(Var, [Var; 3])> {
        let before = g.tape.mse(v.before, target.data())?;
        let after = g.tape.mse(v.after, target.data())?;
        let st = padded_stop_targets::<T>(frames, target.rows());
        let stop = g.tape.bce_with_logits(v.stop_logits, &st)?;
        let s = g.tape.add(before, after)?;
        let total = g.tape.add(s, stop)?;
        Ok((total, [before, after, stop]))
    }

    /// Teacher-forced pass without gradient tracking.
    pub fn forward_teacher_forced(
        &self,
        chars: &CharSequence,
        target: &Tensor<T>,
        mode: Mode,
        seed: u64,
    ) -> Result<DecoderOutput<T>> {
        let mut g = Graph::without_grads(&self.store, mode, seed);
        let v = self.forward_teacher_forced_graph(&mut g, chars, target)?;
        Ok(DecoderOutput::from_graph(&g, &v, false))
    }

    /// Free-running decoding, feeding back the pre-post-net frame. Stops after
    /// the first frame whose stop probability exceeds the threshold.
    pub fn infer(&self, chars: &CharSequence, seed: u64) -> Result<DecoderOutput<T>> {
        let mut g = Graph::without_grads(&self.store, Mode::Infer, seed);
        let memory = self.encode(&mut g, chars)?;
        let pm = self.net.attention.project_memory(&mut g, memory)?;
        let mut state = self.initial_state(&mut g, chars.len());
        let mut prev = g.constant(Tensor::zeros(&[1, self.cfg.output_dim]));
        let (mut out, mut stops, mut aligns) = (Vec::new(), Vec::new(), Vec::new());
        let mut truncated = true;
        for _ in 0..self.cfg.max_decoder_steps {
            let pre = self.prenet(&mut g, prev)?;
            let (frame, stop, next) = self.decode_step(&mut g, pre, memory, pm, &state)?;
            out.push(frame);
            stops.push(stop);
            aligns.push(g.tape.transpose(next.attention.alignment));
            state = next;
            prev = frame;
            let p = g.value(stop).data()[0].sigmoid();
            if stop_index(&[p], self.cfg.stop_threshold).is_some() {
                truncated = false;
                break;
            }
        }
        let before = g.tape.concat_rows(&out)?;
        let stop_logits = g.tape.concat_rows(&stops)?;
        let alignments = g.tape.concat_rows(&aligns)?;
        let after = self.postnet(&mut g, before)?;
        let v = ForwardVars {
            before,
            after,
            stop_logits,
            alignments,
        };
        Ok(DecoderOutput::from_graph(&g, &v, truncated))
    }
}

/// Fraction of consecutive decoder steps whose alignment argmax does not move
/// backwards. One for a single step.
pub fn monotonicity_ratio<T: Scalar>(alignments: &Tensor<T>) -> f64 {
    let argmax = |r: usize| {
        let row = alignments.row(r);
        (0..row.len())
            .max_by(|&a, &b| {
                row[a]
                    .partial_cmp(&row[b])
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap_or(0)
    };
    let n = alignments.rows();
    if n < 2 {
        return 1.0;
    }
    let ok = (1..n).filter(|&t| argmax(t) >= argmax(t - 1)).count();
    ok as f64 / (n - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::normalize_text;

    fn tiny() -> Predictor<f64> {
        Predictor::new(PredictorConfig::tiny(), 4).unwrap()
    }

    #[test]
    fn encoder_emits_one_row_per_character() {
        let p = Predictor::<f32>::new(PredictorConfig::desk(), 1).unwrap();
        let chars = normalize_text("hello there").unwrap();
        let mut g = Graph::new(&p.store, Mode::Infer, 0);
        let m = p.encode(&mut g, &chars).unwrap();
        assert_eq!(g.value(m).shape(), &[11, 32]);
        let mut g2 = Graph::new(&p.store, Mode::Infer, 99);
        let m2 = p.encode(&mut g2, &chars).unwrap();
        assert_eq!(g.value(m), g2.value(m2));
    }

    #[test]
    fn teacher_forced_shapes() {
        let p = tiny();
        let chars = normalize_text("abc").unwrap();
        let target = Tensor::from_fn(&[5, 3], |i| (i as f64 * 0.3).cos());
        let out = p
            .forward_teacher_forced(&chars, &target, Mode::Train, 2)
            .unwrap();
        assert_eq!(out.before_postnet.shape(), &[5, 3]);
        assert_eq!(out.after_postnet.shape(), &[5, 3]);
        assert_eq!(out.alignments.shape(), &[5, 3]);
        assert_eq!(out.stop_probs.len(), 5);
        assert!(out.stop_probs.iter().all(|&s| s > 0.0 && s < 1.0));
        for r in 0..5 {
            assert!((out.alignments.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn disabled_postnet_is_identity() {
        let cfg = PredictorConfig {
            postnet_enabled: false,
            ..PredictorConfig::tiny()
        };
        let p = Predictor::<f64>::new(cfg, 4).unwrap();
        assert!(p.store.find("postnet.conv0.weight").is_none());
        let chars = normalize_text("ab").unwrap();
        let target = Tensor::from_fn(&[4, 3], |i| i as f64 * 0.1);
        let out = p
            .forward_teacher_forced(&chars, &target, Mode::Infer, 0)
            .unwrap();
        assert_eq!(out.before_postnet, out.after_postnet);
        let l = loss_terms(&out, &target).unwrap();
        assert_eq!(l.before, l.after);
    }

    #[test]
    fn prenet_dropout_stays_live_in_inference() {
        let p = Predictor::<f64>::new(PredictorConfig::desk(), 4).unwrap();
        let chars = normalize_text("ab").unwrap();
        let target = Tensor::from_fn(&[3, 80], |i| (i as f64 * 0.37).sin());
        let a = p
            .forward_teacher_forced(&chars, &target, Mode::Infer, 1)
            .unwrap();
        let b = p
            .forward_teacher_forced(&chars, &target, Mode::Infer, 2)
            .unwrap();
        let c = p
            .forward_teacher_forced(&chars, &target, Mode::Infer, 1)
            .unwrap();
        // the go-frame is zero, so only later frames see the dropout mask
        assert_ne!(a.before_postnet.row(1), b.before_postnet.row(1));
        assert_eq!(a, c);
        assert_eq!(p.infer(&chars, 7).unwrap(), p.infer(&chars, 7).unwrap());
    }

    #[test]
    fn untrained_inference_truncates_or_stops() {
        let p = tiny();
        let out = p.infer(&normalize_text("abc").unwrap(), 5).unwrap();
        let first = stop_index(&out.stop_probs, 0.5);
        if out.truncated {
            assert_eq!(out.frames(), 20);
            assert!(first.is_none());
        } else {
            assert_eq!(first, Some(out.frames() - 1));
        }
    }

    #[test]
    fn stop_rule() {
        assert_eq!(stop_index(&[0.1f64, 0.3, 0.7], 0.5).map(|i| i + 1), Some(3));
        assert_eq!(stop_index(&[0.1f64, 0.5, 0.2], 0.5), None);
    }

    #[test]
    fn padding_frames_are_stop_frames() {
        assert_eq!(stop_targets::<f64>(3), [0.0, 0.0, 1.0]);
        assert_eq!(padded_stop_targets::<f64>(3, 5), [0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn forced_stop_head_truncates_at_max_steps() {
        let mut p = tiny();
        let b = p.store.find("decoder.stop_proj.bias").unwrap();
        p.store.value_mut(b).data_mut()[0] = -1e3;
        let out = p.infer(&normalize_text("ab").unwrap(), 0).unwrap();
        assert!(out.truncated);
        assert_eq!(out.frames(), 20);
        let b_hi = p.store.find("decoder.stop_proj.bias").unwrap();
        p.store.value_mut(b_hi).data_mut()[0] = 1e3;
        let out = p.infer(&normalize_text("ab").unwrap(), 0).unwrap();
        assert!(!out.truncated);
        assert_eq!(out.frames(), 1);
    }

    #[test]
    fn loss_matches_hand_arithmetic() {
        // 2 frames x 3 dims, values chosen by hand
        let target = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.5]).unwrap();
        let out = DecoderOutput {
            before_postnet: Tensor::new(vec![2, 3], vec![0.0, -1.0, 1.0, 1.0, 1.5, 0.5]).unwrap(),
            after_postnet: Tensor::new(vec![2, 3], vec![0.5, -0.5, 2.0, 0.0, 1.0, -0.5]).unwrap(),
            stop_logits: vec![-2.0, 3.0],
            stop_probs: vec![],
            alignments: Tensor::zeros(&[2, 1]),
            truncated: false,
        };
        let l = loss_terms(&out, &target).unwrap();
        // before: (0.25 + 0 + 1 + 1 + 0 + 1) / 6
        assert!((l.before - 3.25 / 6.0).abs() < 1e-15);
        // after: (0 + 0.25 + 0 + 0 + 0.25 + 0) / 6
        assert!((l.after - 0.5 / 6.0).abs() < 1e-15);
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let bce = (-(1.0 - sig(-2.0)).ln() - sig(3.0).ln()) / 2.0;
        assert!((l.stop - bce).abs() < 1e-12);
        assert!((l.total() - (3.75 / 6.0 + bce)).abs() < 1e-12);
    }

    #[test]
    fn monotonicity_metric() {
        let diag = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0f64 } else { 0.0 });
        assert_eq!(monotonicity_ratio(&diag), 1.0);
        let rev = Tensor::from_fn(&[3, 3], |i| if i / 3 + i % 3 == 2 { 1.0f64 } else { 0.0 });
        assert_eq!(monotonicity_ratio(&rev), 0.0);
    }
}
