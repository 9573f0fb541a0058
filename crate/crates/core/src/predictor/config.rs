use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text;

/// Which decoder LSTM output queries the attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionQuery {
    First,
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub encoder_conv_layers: usize,
    pub encoder_conv_filters: usize,
    pub encoder_conv_width: usize,
    /// Total over both directions.
    pub encoder_lstm_units: usize,
    pub attention_dim: usize,
    pub location_filters: usize,
    pub location_kernel: usize,
    pub attention_query: AttentionQuery,
    pub prenet_layers: usize,
    pub prenet_units: usize,
    pub decoder_lstm_layers: usize,
    pub decoder_lstm_units: usize,
    pub output_dim: usize,
    pub postnet_enabled: bool,
    pub postnet_layers: usize,
    pub postnet_filters: usize,
    pub postnet_width: usize,
    /// Encoder and post-net convolutions, training only.
    pub dropout_p: f64,
    /// Pre-net dropout, applied in training and inference.
    pub prenet_dropout_p: f64,
    pub zoneout_p: f64,
    pub stop_threshold: f64,
    pub max_decoder_steps: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            vocab_size: text::vocab_size(),
            embedding_dim: 512,
            encoder_conv_layers: 3,
            encoder_conv_filters: 512,
            encoder_conv_width: 5,
            encoder_lstm_units: 512,
            attention_dim: 128,
            location_filters: 32,
            location_kernel: 31,
            attention_query: AttentionQuery::Last,
            prenet_layers: 2,
            prenet_units: 256,
            decoder_lstm_layers: 2,
            decoder_lstm_units: 1024,
            output_dim: 80,
            postnet_enabled: true,
            postnet_layers: 5,
            postnet_filters: 512,
            postnet_width: 5,
            dropout_p: 0.5,
            prenet_dropout_p: 0.5,
            zoneout_p: 0.1,
            stop_threshold: 0.5,
            max_decoder_steps: 1000,
        }
    }
}

impl PredictorConfig {
    /// Small widths that train on a CPU in minutes.
    pub fn desk() -> Self {
        Self {
            embedding_dim: 32,
            encoder_conv_filters: 32,
            encoder_lstm_units: 32,
            attention_dim: 64,
            location_filters: 8,
            location_kernel: 15,
            prenet_units: 64,
            decoder_lstm_units: 128,
            postnet_filters: 32,
            max_decoder_steps: 400,
            ..Self::default()
        }
    }

    /// Every width at most 8, for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            embedding_dim: 4,
            encoder_conv_layers: 1,
            encoder_conv_filters: 4,
            encoder_conv_width: 3,
            encoder_lstm_units: 4,
            attention_dim: 4,
            location_filters: 2,
            location_kernel: 3,
            prenet_units: 4,
            decoder_lstm_units: 4,
            output_dim: 3,
            postnet_layers: 2,
            postnet_filters: 4,
            postnet_width: 3,
            max_decoder_steps: 20,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("vocab_size", self.vocab_size),
            ("embedding_dim", self.embedding_dim),
            ("encoder_conv_filters", self.encoder_conv_filters),
            ("encoder_conv_width", self.encoder_conv_width),
            ("encoder_lstm_units", self.encoder_lstm_units),
            ("attention_dim", self.attention_dim),
            ("location_filters", self.location_filters),
            ("location_kernel", self.location_kernel),
            ("prenet_layers", self.prenet_layers),
            ("prenet_units", self.prenet_units),
            ("decoder_lstm_layers", self.decoder_lstm_layers),
            ("decoder_lstm_units", self.decoder_lstm_units),
            ("output_dim", self.output_dim),
            ("max_decoder_steps", self.max_decoder_steps),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("predictor.{name} must be positive")));
            }
        }
        if self.postnet_enabled
            && (self.postnet_layers == 0 || self.postnet_filters == 0 || self.postnet_width == 0)
        {
            return Err(Error::Config(
                "post-net sizes must be positive when enabled".into(),
            ));
        }
        for (name, k) in [
            ("encoder_conv_width", self.encoder_conv_width),
            ("location_kernel", self.location_kernel),
            ("postnet_width", self.postnet_width),
        ] {
            if k % 2 == 0 {
                return Err(Error::Config(format!(
                    "predictor.{name} must be odd for same padding, got {k}"
                )));
            }
        }
        if !self.encoder_lstm_units.is_multiple_of(2) {
            return Err(Error::Config(
                "predictor.encoder_lstm_units must be even (split across directions)".into(),
            ));
        }
        for (name, p) in [
            ("dropout_p", self.dropout_p),
            ("prenet_dropout_p", self.prenet_dropout_p),
            ("zoneout_p", self.zoneout_p),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "predictor.{name} must lie in [0, 1), got {p}"
                )));
            }
        }
        if !(self.stop_threshold > 0.0 && self.stop_threshold < 1.0) {
            return Err(Error::Config(format!(
                "predictor.stop_threshold must lie in (0, 1), got {}",
                self.stop_threshold
            )));
        }
        Ok(())
    }
}
