use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocoder::mol::{MolSpec, LOG_SCALE_FLOOR};

/// Sample rate used when reporting receptive fields in milliseconds.
pub const REFERENCE_RATE_HZ: u32 = 24_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocoderConfig {
    pub total_layers: usize,
    pub dilation_cycle_size: usize,
    /// Only 3 is supported: taps at `t`, `t − d` and `t − 2d`.
    pub kernel_size: usize,
    pub residual_channels: usize,
    pub skip_channels: usize,
    pub conditioning_channels: usize,
    /// Strides of the two transposed convolutions; their product is the hop.
    pub upsample_factors: [usize; 2],
    pub upsample_leaky_slope: f64,
    pub mol_components: usize,
    pub sample_rate: u32,
    pub target_scale: f64,
    pub log_scale_floor: f64,
}

impl Default for VocoderConfig {
    fn default() -> Self {
        Self {
            total_layers: 30,
            dilation_cycle_size: 10,
            kernel_size: 3,
            residual_channels: 512,
            skip_channels: 256,
            conditioning_channels: 80,
            upsample_factors: [15, 20],
            upsample_leaky_slope: 0.4,
            mol_components: 10,
            sample_rate: 24_000,
            target_scale: 127.5,
            log_scale_floor: LOG_SCALE_FLOOR,
        }
    }
}

impl VocoderConfig {
    pub fn desk() -> Self {
        Self {
            total_layers: 12,
            dilation_cycle_size: 6,
            residual_channels: 64,
            skip_channels: 128,
            ..Self::default()
        }
    }

    /// Two layers at width 4 over a 6-sample hop, for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            total_layers: 2,
            dilation_cycle_size: 2,
            residual_channels: 4,
            skip_channels: 4,
            conditioning_channels: 3,
            upsample_factors: [2, 3],
            mol_components: 2,
            ..Self::default()
        }
    }

    pub fn hop(&self) -> usize {
        self.upsample_factors[0] * self.upsample_factors[1]
    }

    pub fn dilation(&self, layer: usize) -> usize {
        dilation_of(layer, self.dilation_cycle_size)
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(
            self.total_layers,
            self.dilation_cycle_size,
            self.kernel_size,
        )
        .0
    }

    pub fn mol(&self) -> MolSpec {
        MolSpec {
            log_scale_floor: self.log_scale_floor,
            ..MolSpec::new(self.mol_components, self.target_scale)
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("total_layers", self.total_layers),
            ("dilation_cycle_size", self.dilation_cycle_size),
            ("residual_channels", self.residual_channels),
            ("skip_channels", self.skip_channels),
            ("conditioning_channels", self.conditioning_channels),
            ("mol_components", self.mol_components),
            ("upsample_factors[0]", self.upsample_factors[0]),
            ("upsample_factors[1]", self.upsample_factors[1]),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("vocoder.{name} must be positive")));
            }
        }
        if self.kernel_size != 3 {
            return Err(Error::Config(format!(
                "vocoder.kernel_size must be 3, got {}",
                self.kernel_size
            )));
        }
        if self.dilation_cycle_size > 40 {
            return Err(Error::Config(
                "vocoder.dilation_cycle_size is too large".into(),
            ));
        }
        if self.sample_rate == 0 || !(self.target_scale > 0.0) || !self.log_scale_floor.is_finite()
        {
            return Err(Error::Config(
                "vocoder.sample_rate and vocoder.target_scale must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.upsample_leaky_slope) {
            return Err(Error::Config(
                "vocoder.upsample_leaky_slope must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Checks that the upsampler maps one frame onto exactly one hop of samples.
    pub fn validate_for_hop(&self, hop: usize, mel_channels: usize) -> Result<()> {
        self.validate()?;
        if self.hop() != hop {
            return Err(Error::Config(format!(
                "vocoder.upsample_factors {:?} multiply to {}, but the hop is {hop} samples",
                self.upsample_factors,
                self.hop()
            )));
        }
        if self.conditioning_channels != mel_channels {
            return Err(Error::Config(format!(
                "vocoder.conditioning_channels is {}, features have {mel_channels} channels",
                self.conditioning_channels
            )));
        }
        Ok(())
    }
}

/// `2^(k mod cycle_size)`.
pub fn dilation_of(k: usize, cycle_size: usize) -> usize {
    1 << (k % cycle_size.max(1))
}

/// Samples seen by one output, and that span in milliseconds at 24 kHz.
pub fn receptive_field(layers: usize, cycle_size: usize, kernel_size: usize) -> (usize, f64) {
    let sum: usize = (0..layers).map(|k| dilation_of(k, cycle_size)).sum();
    let samples = 1 + (kernel_size - 1) * sum;
    (samples, samples as f64 / REFERENCE_RATE_HZ as f64 * 1000.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dilation_schedule() {
        assert_eq!(dilation_of(0, 10), 1);
        assert_eq!(dilation_of(9, 10), 512);
        assert_eq!(dilation_of(10, 10), 1);
        assert_eq!(dilation_of(13, 6), 2);
        assert!((0..20).all(|k| dilation_of(k, 1) == 1));
    }

    #[test]
    fn receptive_field_rows() {
        for (layers, cycle, samples, ms) in [
            (30, 10, 6139, "255.8"),
            (24, 6, 505, "21.0"),
            (12, 6, 253, "10.5"),
            (30, 1, 61, "2.5"),
        ] {
            let (s, m) = receptive_field(layers, cycle, 3);
            assert_eq!(s, samples);
            assert_eq!(format!("{m:.1}"), ms);
        }
        assert_eq!(receptive_field(1, 1, 3).0, 3);
        assert_eq!(VocoderConfig::default().receptive_field(), 6139);
    }

    #[test]
    fn presets_and_validation() {
        VocoderConfig::default().validate_for_hop(300, 80).unwrap();
        VocoderConfig::desk().validate_for_hop(300, 80).unwrap();
        VocoderConfig::tiny().validate_for_hop(6, 3).unwrap();
        let swapped = VocoderConfig {
            upsample_factors: [20, 15],
            ..VocoderConfig::default()
        };
        swapped.validate_for_hop(300, 80).unwrap();
        assert!(VocoderConfig::default().validate_for_hop(240, 80).is_err());
        let k5 = VocoderConfig {
            kernel_size: 5,
            ..VocoderConfig::default()
        };
        assert!(k5.validate().is_err());
    }
}
