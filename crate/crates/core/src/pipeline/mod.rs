//! Dataset ingestion, feature persistence, configuration and the end-to-end
//! operations behind the command-line tool.

pub mod config;
pub mod features;
pub mod manifest;
pub mod toy;

use std::path::{Path, PathBuf};

use crate::autodiff::{Checkpoint, Tensor};
use crate::dsp::wav::read_wav;
use crate::dsp::{
    exp_linear_spectrogram, griffin_lim, log_linear_spectrogram, mel_spectrogram, DspConfig,
    Waveform,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::text::{normalize_text, CharSequence};
use crate::train::{
    predictor_from_checkpoint, vocoder_from_checkpoint, PredictorExample, VocoderExample,
};
use crate::vocoder::receptive_field;

pub use config::{FeatureKind, RunConfig};
pub use manifest::{read_index, read_manifest, IndexEntry, ManifestEntry, INDEX_FILE};

/// Outcome of [`preprocess`]: written utterances and per-utterance failures.
#[derive(Debug, Default)]
pub struct PreprocessReport {
    pub written: Vec<IndexEntry>,
    pub failures: Vec<(String, String)>,
}

pub fn feature_path(dir: &Path, id: &str, kind: FeatureKind) -> PathBuf {
    dir.join(format!("{id}.{}", kind.extension()))
}

fn preprocess_one(e: &ManifestEntry, cfg: &RunConfig, out: &Path) -> Result<IndexEntry> {
    let chars = normalize_text(&e.text)?;
    let wav: Waveform<f32> = read_wav(&e.wav, cfg.dsp.sample_rate_hz)?;
    let mel = mel_spectrogram(&wav, &cfg.dsp)?;
    features::write(feature_path(out, &e.id, FeatureKind::Mel), &mel.0)?;
    if cfg.features == FeatureKind::Linear {
        let lin = log_linear_spectrogram(&wav, &cfg.dsp)?;
        features::write(feature_path(out, &e.id, FeatureKind::Linear), &lin)?;
    }
    Ok(IndexEntry {
        id: e.id.clone(),
        text: chars.normalized(),
        ids: chars.ids,
        frames: mel.frames(),
        wav: std::path::absolute(&e.wav)?,
    })
}

/// Extracts features for every manifest entry into `out` and writes the
/// index of the utterances that succeeded. Reruns overwrite byte for byte.
pub fn preprocess(
    entries: &[ManifestEntry],
    cfg: &RunConfig,
    out: &Path,
) -> Result<PreprocessReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let mut report = PreprocessReport::default();
    for e in entries {
        match preprocess_one(e, cfg, out) {
            Ok(entry) => report.written.push(entry),
            Err(err) => report.failures.push((e.id.clone(), err.to_string())),
        }
    }
    std::fs::write(
        out.join(INDEX_FILE),
        manifest::format_index(&report.written),
    )?;
    Ok(report)
}

/// Predictor training pairs from a preprocessed directory.
pub fn load_predictor_examples<T: Scalar>(
    dir: &Path,
    kind: FeatureKind,
) -> Result<Vec<PredictorExample<T>>> {
    read_index(dir)?
        .into_iter()
        .map(|e| {
            let target: Tensor<T> = features::read(feature_path(dir, &e.id, kind))?;
            if target.rows() != e.frames {
                return Err(Error::Format(format!(
                    "`{}`: {} feature frames, index says {}",
                    e.id,
                    target.rows(),
                    e.frames
                )));
            }
            Ok(PredictorExample {
                id: e.id,
                chars: CharSequence::from_ids(e.ids)?,
                target,
            })
        })
        .collect()
}

/// Audio zero-padded to whole frames, as the STFT sees it.
pub fn load_padded_audio<T: Scalar>(path: &Path, frames: usize, dsp: &DspConfig) -> Result<Vec<T>> {
    let wav: Waveform<T> = read_wav(path, dsp.sample_rate_hz)?;
    let n = frames * dsp.hop_length();
    if wav.len() > n {
        return Err(Error::Invalid(format!(
            "{} has {} samples, more than {frames} frames cover",
            path.display(),
            wav.len()
        )));
    }
    let mut samples = wav.samples;
    samples.resize(n, T::zero());
    Ok(samples)
}

/// Vocoder training pairs: mel features from `feature_dir` (ground truth or
/// GTA) with the audio listed in its index.
pub fn load_vocoder_examples<T: Scalar>(
    feature_dir: &Path,
    dsp: &DspConfig,
) -> Result<Vec<VocoderExample<T>>> {
    read_index(feature_dir)?
        .into_iter()
        .map(|e| {
            let features: Tensor<T> =
                features::read(feature_path(feature_dir, &e.id, FeatureKind::Mel))?;
            let audio = load_padded_audio(&e.wav, features.rows(), dsp)?;
            Ok(VocoderExample {
                id: e.id,
                features,
                audio,
            })
        })
        .collect()
}

/// Which vocoder turns predicted frames into audio.
#[derive(Debug, Clone, PartialEq)]
pub enum VocoderChoice {
    WaveNet(PathBuf),
    GriffinLim,
}

#[derive(Debug, Clone)]
pub struct Synthesis {
    pub waveform: Waveform<f32>,
    pub frames: usize,
    pub truncated: bool,
}

/// Text to waveform. The Griffin-Lim path needs a predictor trained on
/// linear spectrograms; the WaveNet path needs one trained on mel frames.
pub fn synthesize(
    text: &str,
    predictor_ckpt: &Path,
    vocoder: &VocoderChoice,
    dsp: &DspConfig,
    seed: u64,
) -> Result<Synthesis> {
    dsp.validate()?;
    let chars = normalize_text(text)?;
    let predictor = predictor_from_checkpoint(&Checkpoint::<f32>::load(predictor_ckpt)?)?;
    let dim = predictor.cfg.output_dim;
    let kind = if dim == dsp.mel_channels {
        FeatureKind::Mel
    } else if dim == dsp.num_bins() {
        FeatureKind::Linear
    } else {
        return Err(Error::Config(format!(
            "predictor emits {dim} channels, which matches neither {} mel channels nor {} linear bins",
            dsp.mel_channels,
            dsp.num_bins()
        )));
    };
    let vocoder_model = match (vocoder, kind) {
        (VocoderChoice::GriffinLim, FeatureKind::Mel) => {
            return Err(Error::Config(
                "Griffin-Lim needs a predictor trained on linear spectrograms; this one predicts mel frames, \
                 which carry too little detail for phase reconstruction. Use a WaveNet checkpoint or a \
                 linear-output predictor"
                    .into(),
            ))
        }
        (VocoderChoice::WaveNet(_), FeatureKind::Linear) => {
            return Err(Error::Config(
                "the WaveNet vocoder is conditioned on mel frames; this predictor emits linear spectrograms".into(),
            ))
        }
        (VocoderChoice::WaveNet(path), FeatureKind::Mel) => {
            let v = vocoder_from_checkpoint(&Checkpoint::<f32>::load(path)?)?;
            v.cfg.validate_for_hop(dsp.hop_length(), dsp.mel_channels)?;
            Some(v)
        }
        (VocoderChoice::GriffinLim, FeatureKind::Linear) => None,
    };
    let out = predictor.infer(&chars, seed)?;
    let frames = out.frames();
    let waveform = match vocoder_model {
        Some(v) => v.generate(&out.after_postnet, seed)?,
        None => {
            // Griffin-Lim needs at least one full frame of hops
            let need = dsp.frame_length().div_ceil(dsp.hop_length());
            let mut spec = out.after_postnet.clone();
            if frames < need {
                let floor = dsp.clip_floor.ln() as f32;
                let mut data = spec.into_data();
                data.resize(need * dim, floor);
                spec = Tensor::new(vec![need, dim], data)?;
            }
            let mut w = griffin_lim(
                &exp_linear_spectrogram(&spec),
                dsp,
                dsp.griffin_lim_iters,
                seed,
            )?;
            w.samples.truncate(frames * dsp.hop_length());
            for s in &mut w.samples {
                *s = s.clamp(-1.0, 1.0);
            }
            w
        }
    };
    Ok(Synthesis {
        waveform,
        frames,
        truncated: out.truncated,
    })
}

/// `"6,139 / 255.8"` style receptive-field line for a stack of
/// `cycles × cycle_size` layers.
pub fn analyze_receptive_field(layers: usize, cycles: usize, cycle_size: usize) -> Result<String> {
    if layers == 0 || cycles == 0 || cycle_size == 0 {
        return Err(Error::Invalid(
            "layers, cycles and cycle size must be positive".into(),
        ));
    }
    if cycles * cycle_size != layers {
        return Err(Error::Invalid(format!(
            "{cycles} cycles of {cycle_size} layers is {}, not {layers}",
            cycles * cycle_size
        )));
    }
    let (samples, ms) = receptive_field(layers, cycle_size, 3);
    Ok(format!("{} / {}", group_thousands(samples), format_ms(ms)))
}

fn group_thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// One decimal, or the exact value when one decimal would hide it.
fn format_ms(ms: f64) -> String {
    let one = format!("{ms:.1}");
    if (one.parse::<f64>().unwrap_or(f64::NAN) - ms).abs() < 1e-9 || ms >= 1.0 {
        one
    } else {
        let s = format!("{ms:.6}");
        s.trim_end_matches('0').to_string()
    }
}

/// The four stack geometries compared for depth and receptive field.
pub const TABLE4: [(usize, usize, usize); 4] = [(30, 3, 10), (24, 4, 6), (12, 2, 6), (30, 30, 1)];

pub fn table4_report() -> String {
    let mut s = String::from("layers  cycles  cycle size  receptive field (samples / ms)\n");
    for (l, c, k) in TABLE4 {
        let line = analyze_receptive_field(l, c, k).expect("table rows are consistent");
        s.push_str(&format!("{l:>6}  {c:>6}  {k:>10}  {line}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn receptive_field_lines() {
        assert_eq!(analyze_receptive_field(30, 3, 10).unwrap(), "6,139 / 255.8");
        assert_eq!(analyze_receptive_field(12, 2, 6).unwrap(), "253 / 10.5");
        assert_eq!(analyze_receptive_field(1, 1, 1).unwrap(), "3 / 0.125");
        assert!(analyze_receptive_field(12, 3, 6).is_err());
        let t = table4_report();
        for row in ["6,139 / 255.8", "505 / 21.0", "253 / 10.5", "61 / 2.5"] {
            assert!(t.contains(row), "{t}");
        }
    }

    #[test]
    fn thousands_grouping() {
        assert_eq!(group_thousands(7), "7");
        assert_eq!(group_thousands(1234567), "1,234,567");
    }
}
