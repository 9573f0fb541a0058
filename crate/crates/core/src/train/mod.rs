//! Training loops for both networks, ground-truth-aligned feature
//! generation and objective evaluation.
//!
//! Every random choice made at step `n` (batch selection, crop offsets,
//! dropout masks) is drawn from a stream keyed on `(seed, stage, n)`, so a run
//! resumed from the checkpoint written after step `n` continues exactly as the
//! uninterrupted run would have.

pub mod config;
pub mod eval;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    apply_stat_updates, clip_global_norm, AdamState, Checkpoint, EmaState, Graph, Mode, ParamStore,
    Tensor,
};
use crate::error::{Error, Result};
use crate::predictor::{Predictor, PredictorConfig};
use crate::scalar::Scalar;
use crate::text::CharSequence;
use crate::vocoder::{Vocoder, VocoderConfig};

pub use config::TrainConfig;
pub use eval::{dtw_distance, evaluate_predictor, evaluate_vocoder, PredictorMetrics};

const PREDICTOR_STREAM: u64 = 1;
const VOCODER_STREAM: u64 = 2;
const GTA_SEED: u64 = 0x67_74_61;

/// SplitMix64 finalizer over the combined inputs.
pub fn stream_seed(seed: u64, stage: u64, step: u64, item: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stage.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(step.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(item.wrapping_mul(0x94D0_49BB_1331_11EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One utterance for the predictor: characters and target frames.
#[derive(Debug, Clone)]
pub struct PredictorExample<T> {
    pub id: String,
    pub chars: CharSequence,
    pub target: Tensor<T>,
}

/// One utterance for the vocoder: conditioning frames and the audio they
/// cover, in `[−1, 1]`, `frames·hop` samples long.
#[derive(Debug, Clone)]
pub struct VocoderExample<T> {
    pub id: String,
    pub features: Tensor<T>,
    pub audio: Vec<T>,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub stage: String,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mel_before: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mel_after: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub stop_bce: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub nll: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_s: f64,
}

fn collect_grads<T: Scalar>(g: &Graph<'_, T>, acc: &mut [Option<Vec<T>>], weight: T) {
    for (id, gr) in g.param_grads() {
        let slot = acc[id.index()].get_or_insert_with(|| vec![T::zero(); gr.len()]);
        for (a, &x) in slot.iter_mut().zip(gr) {
            *a += x * weight;
        }
    }
}

fn default_pad<T: Scalar>() -> T {
    T::lit(crate::dsp::DspConfig::default().clip_floor.ln())
}

fn pad_rows<T: Scalar>(t: &Tensor<T>, rows: usize, value: T) -> Result<Tensor<T>> {
    if t.rows() >= rows {
        return Ok(t.clone());
    }
    let mut data = t.data().to_vec();
    data.resize(rows * t.cols(), value);
    Tensor::new(vec![rows, t.cols()], data)
}

fn grad_norm<T: Scalar>(grads: &mut [Option<Vec<T>>], clip: f64) -> f64 {
    clip_global_norm(grads, if clip > 0.0 { clip } else { f64::INFINITY })
}

/// Common surface of the two trainers, used by [`run`].
pub trait Stage<T: Scalar> {
    type Example;
    const NAME: &'static str;
    /// Completed optimizer steps.
    fn steps_done(&self) -> u64;
    fn train_step(&mut self, data: &[Self::Example]) -> Result<LogRecord>;
    fn checkpoint(&self) -> Checkpoint<T>;
}

pub struct PredictorTrainer<T: Scalar> {
    pub model: Predictor<T>,
    pub adam: AdamState<T>,
    pub cfg: TrainConfig,
    /// Value of padding frames, the log of the feature clip floor. Shorter
    /// utterances in a batch are padded to the longest, with stop target one
    /// across the padding.
    pub pad_value: T,
}

impl<T: Scalar> PredictorTrainer<T> {
    pub fn new(model: Predictor<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(&model.store, cfg.predictor_adam());
        Ok(Self {
            model,
            adam,
            cfg,
            pad_value: default_pad(),
        })
    }

    pub fn resume(ckpt: Checkpoint<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let pcfg: PredictorConfig = serde_json::from_str(&ckpt.config)
            .map_err(|e| Error::Format(format!("predictor checkpoint config: {e}")))?;
        let model = Predictor::from_store(pcfg, ckpt.params)?;
        let adam = ckpt.adam.ok_or_else(|| {
            Error::Format("checkpoint has no optimizer state to resume from".into())
        })?;
        Ok(Self {
            model,
            adam,
            cfg,
            pad_value: default_pad(),
        })
    }

    /// Pads with `ln(clip_floor)`, matching silence in the features.
    pub fn with_clip_floor(mut self, clip_floor: f64) -> Self {
        self.pad_value = T::lit(clip_floor.ln());
        self
    }

    fn batch(&self, n: usize, step: u64) -> Vec<usize> {
        let b = self.cfg.predictor_batch_size;
        if b >= n {
            return (0..n).collect();
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(stream_seed(self.cfg.seed, PREDICTOR_STREAM, step, 0));
        let mut idx = index::sample(&mut rng, n, b).into_vec();
        idx.sort_unstable();
        idx
    }
}

pub fn predictor_checkpoint<T: Scalar>(
    model: &Predictor<T>,
    adam: Option<&AdamState<T>>,
    step: u64,
) -> Checkpoint<T> {
    Checkpoint {
        step,
        config: serde_json::to_string(&model.cfg).expect("config serializes"),
        params: model.store.clone(),
        adam: adam.cloned(),
        ema: None,
    }
}

pub fn predictor_from_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<Predictor<T>> {
    let cfg: PredictorConfig = serde_json::from_str(&ckpt.config)
        .map_err(|e| Error::Format(format!("predictor checkpoint config: {e}")))?;
    Predictor::from_store(cfg, ckpt.params.clone())
}

impl<T: Scalar> Stage<T> for PredictorTrainer<T> {
    type Example = PredictorExample<T>;
    const NAME: &'static str = "predictor";

    fn steps_done(&self) -> u64 {
        self.adam.step
    }

    fn train_step(&mut self, data: &[PredictorExample<T>]) -> Result<LogRecord> {
        if data.is_empty() {
            return Err(Error::EmptyInput);
        }
        let started = Instant::now();
        let step = self.adam.step;
        let batch = self.batch(data.len(), step);
        let weight = T::one() / T::from_usize_lossy(batch.len());
        let mut grads = vec![None; self.model.store.len()];
        let mut stats = Vec::new();
        let mut terms = [0.0f64; 4];
        let longest = batch
            .iter()
            .map(|&i| data[i].target.rows())
            .max()
            .unwrap_or(0);
        for (slot, &i) in batch.iter().enumerate() {
            let ex = &data[i];
            let seed = stream_seed(self.cfg.seed, PREDICTOR_STREAM, step, 1 + slot as u64);
            let target = pad_rows(&ex.target, longest, self.pad_value)?;
            let mut g = Graph::new(&self.model.store, Mode::Train, seed);
            let v = self
                .model
                .forward_teacher_forced_graph(&mut g, &ex.chars, &target)?;
            let (total, parts) =
                self.model
                    .padded_loss_graph(&mut g, &v, &target, ex.target.rows())?;
            let value = g.value(total).data()[0].to_f64_lossy();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { step, batch: i });
            }
            terms[0] += value;
            for (t, p) in terms[1..].iter_mut().zip(parts) {
                *t += g.value(p).data()[0].to_f64_lossy();
            }
            g.backward(total)?;
            collect_grads(&g, &mut grads, weight);
            stats.extend(g.take_stat_updates());
        }
        let norm = grad_norm(&mut grads, self.cfg.grad_clip);
        let lr = self.cfg.predictor_schedule().at(step);
        self.adam.step(&mut self.model.store, &grads, lr)?;
        apply_stat_updates(&mut self.model.store, &stats, self.cfg.bn_momentum);
        let n = batch.len() as f64;
        Ok(LogRecord {
            step,
            stage: Self::NAME.into(),
            loss: terms[0] / n,
            mel_before: Some(terms[1] / n),
            mel_after: Some(terms[2] / n),
            stop_bce: Some(terms[3] / n),
            nll: None,
            lr,
            grad_norm: norm,
            wall_s: started.elapsed().as_secs_f64(),
        })
    }

    fn checkpoint(&self) -> Checkpoint<T> {
        predictor_checkpoint(&self.model, Some(&self.adam), self.adam.step)
    }
}

pub struct VocoderTrainer<T: Scalar> {
    pub model: Vocoder<T>,
    pub adam: AdamState<T>,
    pub ema: EmaState<T>,
    pub cfg: TrainConfig,
}

impl<T: Scalar> VocoderTrainer<T> {
    pub fn new(model: Vocoder<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(&model.store, cfg.vocoder_adam());
        let ema = EmaState::new(&model.store, cfg.ema_decay);
        Ok(Self {
            model,
            adam,
            ema,
            cfg,
        })
    }

    pub fn resume(ckpt: Checkpoint<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let vcfg = vocoder_config_of(&ckpt)?;
        let model = Vocoder::from_store(vcfg, ckpt.params)?;
        let adam = ckpt.adam.ok_or_else(|| {
            Error::Format("checkpoint has no optimizer state to resume from".into())
        })?;
        let ema = ckpt
            .ema
            .ok_or_else(|| Error::Format("vocoder checkpoint has no moving average".into()))?;
        Ok(Self {
            model,
            adam,
            ema,
            cfg,
        })
    }

    /// The model with averaged parameters swapped in.
    pub fn ema_model(&self) -> Result<Vocoder<T>> {
        Vocoder::from_store(self.model.cfg.clone(), self.ema.shadow.clone())
    }

    /// Frames per crop and the chosen start frame for one example.
    pub fn crop(&self, frames: usize, rng: &mut impl Rng) -> (usize, usize) {
        let want = (self.cfg.crop_samples / self.model.hop()).max(1);
        if frames <= want {
            (0, frames)
        } else {
            (rng.random_range(0..=frames - want), want)
        }
    }
}

fn vocoder_config_of<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<VocoderConfig> {
    serde_json::from_str(&ckpt.config)
        .map_err(|e| Error::Format(format!("vocoder checkpoint config: {e}")))
}

/// Rebuilds a vocoder for inference, preferring the moving-average weights.
pub fn vocoder_from_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<Vocoder<T>> {
    let cfg = vocoder_config_of(ckpt)?;
    let store: ParamStore<T> = match &ckpt.ema {
        Some(ema) => ema.shadow.clone(),
        None => ckpt.params.clone(),
    };
    Vocoder::from_store(cfg, store)
}

impl<T: Scalar> Stage<T> for VocoderTrainer<T> {
    type Example = VocoderExample<T>;
    const NAME: &'static str = "vocoder";

    fn steps_done(&self) -> u64 {
        self.adam.step
    }

    fn train_step(&mut self, data: &[VocoderExample<T>]) -> Result<LogRecord> {
        if data.is_empty() {
            return Err(Error::EmptyInput);
        }
        let started = Instant::now();
        let step = self.adam.step;
        let hop = self.model.hop();
        let scale = T::lit(self.model.cfg.target_scale);
        let mut rng =
            ChaCha8Rng::seed_from_u64(stream_seed(self.cfg.seed, VOCODER_STREAM, step, 0));
        let b = self.cfg.vocoder_batch_size;
        let weight = T::one() / T::from_usize_lossy(b);
        let mut grads = vec![None; self.model.store.len()];
        let mut total = 0.0;
        for _ in 0..b {
            let i = rng.random_range(0..data.len());
            let ex = &data[i];
            let frames = ex.features.rows();
            if ex.audio.len() != frames * hop {
                return Err(Error::Invalid(format!(
                    "utterance `{}` has {} samples for {frames} frames",
                    ex.id,
                    ex.audio.len()
                )));
            }
            let (start, len) = self.crop(frames, &mut rng);
            let c = ex.features.cols();
            let feats = Tensor::new(
                vec![len, c],
                ex.features.data()[start * c..(start + len) * c].to_vec(),
            )?;
            let audio: Vec<T> = ex.audio[start * hop..(start + len) * hop]
                .iter()
                .map(|&x| x * scale)
                .collect();
            let mut g = Graph::new(&self.model.store, Mode::Train, 0);
            let p = self.model.forward_graph(&mut g, &audio, &feats)?;
            let loss = self.model.nll_graph(&mut g, p, &audio)?;
            let value = g.value(loss).data()[0].to_f64_lossy();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { step, batch: i });
            }
            total += value;
            g.backward(loss)?;
            collect_grads(&g, &mut grads, weight);
        }
        let norm = grad_norm(&mut grads, self.cfg.grad_clip);
        let lr = self.cfg.vocoder_lr;
        self.adam.step(&mut self.model.store, &grads, lr)?;
        self.ema.update(&self.model.store)?;
        let nll = total / b as f64;
        Ok(LogRecord {
            step,
            stage: Self::NAME.into(),
            loss: nll,
            mel_before: None,
            mel_after: None,
            stop_bce: None,
            nll: Some(nll),
            lr,
            grad_norm: norm,
            wall_s: started.elapsed().as_secs_f64(),
        })
    }

    fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            step: self.adam.step,
            config: serde_json::to_string(&self.model.cfg).expect("config serializes"),
            params: self.model.store.clone(),
            adam: Some(self.adam.clone()),
            ema: Some(self.ema.clone()),
        }
    }
}

pub fn checkpoint_path(dir: &Path, stage: &str, step: u64) -> PathBuf {
    dir.join(format!("{stage}-{step:08}.ckpt"))
}

/// Trains until `steps_done() == until`, appending one JSON object per step
/// to `log`. Checkpoints go to `dir` every `checkpoint_every` steps and after
/// the final step.
pub fn run<T: Scalar, S: Stage<T>>(
    trainer: &mut S,
    data: &[S::Example],
    until: u64,
    checkpoint_every: u64,
    dir: Option<&Path>,
    log: &mut dyn Write,
) -> Result<Vec<LogRecord>> {
    let mut records = Vec::new();
    while trainer.steps_done() < until {
        let rec = trainer.train_step(data)?;
        writeln!(
            log,
            "{}",
            serde_json::to_string(&rec).expect("record serializes")
        )?;
        records.push(rec);
        let done = trainer.steps_done();
        if let Some(dir) = dir {
            if (checkpoint_every > 0 && done % checkpoint_every == 0) || done == until {
                trainer
                    .checkpoint()
                    .save(checkpoint_path(dir, S::NAME, done))?;
            }
        }
    }
    log.flush()?;
    Ok(records)
}

/// Teacher-forced post-net outputs, one per utterance, frame-aligned with the
/// ground truth.
pub fn make_gta<T: Scalar>(
    model: &Predictor<T>,
    data: &[PredictorExample<T>],
) -> Result<Vec<Tensor<T>>> {
    data.iter()
        .map(|ex| {
            let out = model.forward_teacher_forced(&ex.chars, &ex.target, Mode::Infer, GTA_SEED)?;
            if out.after_postnet.shape() != ex.target.shape() {
                return Err(Error::Invariant(format!(
                    "GTA features for `{}` have shape {:?}, ground truth {:?}",
                    ex.id,
                    out.after_postnet.shape(),
                    ex.target.shape()
                )));
            }
            Ok(out.after_postnet)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_predictor_data() -> Vec<PredictorExample<f64>> {
        (0..3)
            .map(|u| PredictorExample {
                id: format!("u{u}"),
                chars: CharSequence::from_ids(vec![3 + u, 7, 9 + u]).unwrap(),
                target: Tensor::from_fn(&[4 + u, 3], |i| ((i + u) as f64 * 0.37).sin()),
            })
            .collect()
    }

    #[test]
    fn stream_seeds_differ() {
        assert_ne!(stream_seed(0, 1, 0, 0), stream_seed(0, 1, 1, 0));
        assert_ne!(stream_seed(0, 1, 0, 0), stream_seed(0, 2, 0, 0));
        assert_eq!(stream_seed(5, 1, 2, 3), stream_seed(5, 1, 2, 3));
    }

    #[test]
    fn predictor_step_lowers_loss_and_logs() {
        let model = Predictor::<f64>::new(PredictorConfig::tiny(), 1).unwrap();
        let cfg = TrainConfig {
            predictor_lr_init: 1e-2,
            predictor_lr_final: 1e-2,
            ..TrainConfig::default()
        };
        let mut tr = PredictorTrainer::new(model, cfg).unwrap();
        let data = toy_predictor_data();
        let mut log = Vec::new();
        let recs = run(&mut tr, &data, 30, 0, None, &mut log).unwrap();
        assert_eq!(recs.len(), 30);
        assert!(recs[29].loss < recs[0].loss);
        assert_eq!(recs[0].lr, 1e-2);
        let lines: Vec<LogRecord> = String::from_utf8(log)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 30);
        assert!(lines.windows(2).all(|w| w[1].step == w[0].step + 1));
    }

    #[test]
    fn gta_is_frame_aligned_and_differs() {
        let model = Predictor::<f64>::new(PredictorConfig::tiny(), 2).unwrap();
        let data = toy_predictor_data();
        let gta = make_gta(&model, &data).unwrap();
        for (g, ex) in gta.iter().zip(&data) {
            assert_eq!(g.rows(), ex.target.rows());
            assert!(g.max_abs_diff(&ex.target) > 0.0);
        }
    }

    #[test]
    fn vocoder_ema_after_one_step() {
        let vcfg = VocoderConfig::tiny();
        let model = Vocoder::<f64>::new(vcfg.clone(), 3).unwrap();
        let init = model.store.clone();
        let mut tr = VocoderTrainer::new(model, TrainConfig::default()).unwrap();
        let data = vec![VocoderExample {
            id: "a".into(),
            features: Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.3).cos()),
            audio: (0..24).map(|i| (i as f64 * 0.2).sin() * 0.5).collect(),
        }];
        tr.train_step(&data).unwrap();
        for ((_, e), ((_, i), (_, n))) in tr
            .ema
            .shadow
            .iter()
            .zip(init.iter().zip(tr.model.store.iter()))
        {
            for ((&e, &i), &n) in e
                .value
                .data()
                .iter()
                .zip(i.value.data())
                .zip(n.value.data())
            {
                assert!((e - (0.9999 * i + 0.0001 * n)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn crops_follow_hop_arithmetic() {
        let model = Vocoder::<f32>::new(VocoderConfig::desk(), 0).unwrap();
        let tr = VocoderTrainer::new(model, TrainConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let (start, len) = tr.crop(50, &mut rng);
            assert_eq!(len, 16);
            assert!(start + len <= 50);
        }
        assert_eq!(tr.crop(10, &mut rng), (0, 10));
    }
}
