//! Objective proxies for listening tests.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tensor};
use crate::error::{Error, Result};
use crate::predictor::{loss_terms, monotonicity_ratio, stop_targets, Predictor};
use crate::scalar::Scalar;
use crate::train::{PredictorExample, VocoderExample};
use crate::vocoder::Vocoder;

const EVAL_SEED: u64 = 0xe7a1;

/// Dynamic-time-warped distance between two frame sequences: the Euclidean
/// frame distance summed along the cheapest monotone path, divided by the
/// path length.
pub fn dtw_distance<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::shape("dtw", a.shape(), b.shape()));
    }
    let (n, m) = (a.rows(), b.rows());
    if n == 0 || m == 0 {
        return Err(Error::EmptyInput);
    }
    let dist = |i: usize, j: usize| {
        a.row(i)
            .iter()
            .zip(b.row(j))
            .map(|(&x, &y)| {
                let d = (x - y).to_f64_lossy();
                d * d
            })
            .sum::<f64>()
            .sqrt()
    };
    // (cost, steps) per cell; ties prefer the shorter path
    let mut cost = vec![(f64::INFINITY, 0usize); (n + 1) * (m + 1)];
    cost[0] = (0.0, 0);
    for i in 1..=n {
        for j in 1..=m {
            let prev = [
                cost[(i - 1) * (m + 1) + j - 1],
                cost[(i - 1) * (m + 1) + j],
                cost[i * (m + 1) + j - 1],
            ];
            let best = prev
                .iter()
                .copied()
                .min_by(|x, y| {
                    x.0.partial_cmp(&y.0)
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(x.1.cmp(&y.1))
                })
                .expect("three candidates");
            cost[i * (m + 1) + j] = (best.0 + dist(i - 1, j - 1), best.1 + 1);
        }
    }
    let (c, len) = cost[n * (m + 1) + m];
    Ok(c / len as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorMetrics {
    pub utterances: usize,
    pub teacher_forced_loss: f64,
    pub mel_before: f64,
    pub mel_after: f64,
    pub stop_bce: f64,
    /// Fraction of teacher-forced frames whose stop decision matches the target.
    pub stop_accuracy: f64,
    pub free_running_dtw: f64,
    pub monotonicity: f64,
    /// Mean ratio of free-running to ground-truth frame counts.
    pub length_ratio: f64,
    /// Utterances whose free-running decode hit the step limit.
    pub truncated: usize,
}

pub fn evaluate_predictor<T: Scalar>(
    model: &Predictor<T>,
    data: &[PredictorExample<T>],
) -> Result<PredictorMetrics> {
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = data.len() as f64;
    let mut m = PredictorMetrics {
        utterances: data.len(),
        teacher_forced_loss: 0.0,
        mel_before: 0.0,
        mel_after: 0.0,
        stop_bce: 0.0,
        stop_accuracy: 0.0,
        free_running_dtw: 0.0,
        monotonicity: 0.0,
        length_ratio: 0.0,
        truncated: 0,
    };
    let threshold = model.cfg.stop_threshold;
    for ex in data {
        let tf = model.forward_teacher_forced(&ex.chars, &ex.target, Mode::Infer, EVAL_SEED)?;
        let terms = loss_terms(&tf, &ex.target)?;
        m.teacher_forced_loss += terms.total() / n;
        m.mel_before += terms.before / n;
        m.mel_after += terms.after / n;
        m.stop_bce += terms.stop / n;
        let st = stop_targets::<f64>(tf.frames());
        let correct = tf
            .stop_probs
            .iter()
            .zip(&st)
            .filter(|(p, &y)| (p.to_f64_lossy() > threshold) == (y > 0.5))
            .count();
        m.stop_accuracy += correct as f64 / st.len() as f64 / n;

        let fr = model.infer(&ex.chars, EVAL_SEED)?;
        m.free_running_dtw += dtw_distance(&fr.after_postnet, &ex.target)? / n;
        m.monotonicity += monotonicity_ratio(&fr.alignments) / n;
        m.length_ratio += fr.frames() as f64 / ex.target.rows() as f64 / n;
        m.truncated += usize::from(fr.truncated);
    }
    Ok(m)
}

/// Mean per-sample negative log-likelihood over whole utterances.
pub fn evaluate_vocoder<T: Scalar>(model: &Vocoder<T>, data: &[VocoderExample<T>]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    let scale = T::lit(model.cfg.target_scale);
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in data {
        let audio: Vec<T> = ex.audio.iter().map(|&x| x * scale).collect();
        total += model.nll(&audio, &ex.features)? * audio.len() as f64;
        count += audio.len();
    }
    Ok(total / count as f64)
}
