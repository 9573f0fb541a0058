//! Run configuration file: TOML with `[dsp]`, `[predictor]`, `[vocoder]` and
//! `[train]` tables plus a top-level `features` key. Missing keys take the
//! defaults of their table; unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::DspConfig;
use crate::error::{Error, Result};
use crate::predictor::PredictorConfig;
use crate::train::TrainConfig;
use crate::vocoder::VocoderConfig;

/// What the predictor is trained to output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    /// Log mel filterbank energies, vocoded by the WaveNet.
    Mel,
    /// Log STFT magnitudes, vocoded by Griffin-Lim.
    Linear,
}

impl FeatureKind {
    pub fn extension(self) -> &'static str {
        match self {
            FeatureKind::Mel => "mel.tft",
            FeatureKind::Linear => "linear.tft",
        }
    }

    pub fn dim(self, dsp: &DspConfig) -> usize {
        match self {
            FeatureKind::Mel => dsp.mel_channels,
            FeatureKind::Linear => dsp.num_bins(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_features")]
    pub features: FeatureKind,
    #[serde(default)]
    pub dsp: DspConfig,
    #[serde(default)]
    pub predictor: PredictorConfig,
    #[serde(default)]
    pub vocoder: VocoderConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_features() -> FeatureKind {
    FeatureKind::Mel
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            features: FeatureKind::Mel,
            dsp: DspConfig::default(),
            predictor: PredictorConfig::default(),
            vocoder: VocoderConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Widths small enough to train on one CPU core.
    pub fn desk() -> Self {
        Self {
            predictor: PredictorConfig::desk(),
            vocoder: VocoderConfig::desk(),
            ..Self::default()
        }
    }

    /// Predictor emitting linear spectrograms, for the Griffin-Lim path.
    pub fn desk_linear() -> Self {
        let mut c = Self::desk();
        c.features = FeatureKind::Linear;
        c.predictor.output_dim = c.dsp.num_bins();
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.dsp.validate()?;
        self.predictor.validate()?;
        self.train.validate()?;
        let want = self.features.dim(&self.dsp);
        if self.predictor.output_dim != want {
            return Err(Error::Config(format!(
                "predictor.output_dim is {} but {:?} features have {want} channels",
                self.predictor.output_dim, self.features
            )));
        }
        self.vocoder
            .validate_for_hop(self.dsp.hop_length(), self.dsp.mel_channels)?;
        if self.vocoder.sample_rate != self.dsp.sample_rate_hz {
            return Err(Error::Config(format!(
                "vocoder.sample_rate {} differs from dsp.sample_rate_hz {}",
                self.vocoder.sample_rate, self.dsp.sample_rate_hz
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
