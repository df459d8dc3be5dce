use alloc::boxed::Box;
use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{conv_out_len, BasicBlock, Conv2d, Layer, MaxPool2d, Stream};
use super::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BackboneVariant {
    /// Three stride-2 3x3 convolutions with ReLU.
    ToyCnn,
    /// 7x7 stem, max-pool and four stages of two residual blocks.
    Resnet18Style,
}

impl BackboneVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            BackboneVariant::ToyCnn => "TOY_CNN",
            BackboneVariant::Resnet18Style => "RESNET18_STYLE",
        }
    }
}

impl core::str::FromStr for BackboneVariant {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "TOY_CNN" => Ok(BackboneVariant::ToyCnn),
            "RESNET18_STYLE" => Ok(BackboneVariant::Resnet18Style),
            other => Err(NnError::InvalidConfig(format!("unknown backbone variant {other}"))),
        }
    }
}

/// Shape of one flow stream. Both streams use the same configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    /// Output channels of each stream; the concatenated map has twice as many.
    pub stream_channels: usize,
    /// Side length of the square region crops fed to the streams.
    pub input_size: usize,
    /// Start the stream weights from an externally supplied checkpoint.
    pub pretrained_init: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::toy(32)
    }
}

impl BackboneConfig {
    pub fn toy(input_size: usize) -> Self {
        Self {
            variant: BackboneVariant::ToyCnn,
            stream_channels: 8,
            input_size,
            pretrained_init: false,
        }
    }

    pub fn resnet18(input_size: usize) -> Self {
        Self {
            variant: BackboneVariant::Resnet18Style,
            stream_channels: 512,
            input_size,
            pretrained_init: false,
        }
    }

    /// Channel count `C` of a region feature map.
    pub fn channels(&self) -> usize {
        2 * self.stream_channels
    }

    /// Spatial side of a region feature map.
    pub fn output_size(&self) -> usize {
        let s = self.input_size;
        match self.variant {
            BackboneVariant::ToyCnn => (0..3).fold(s, |n, _| conv_out_len(n, 3, 2, 1)),
            BackboneVariant::Resnet18Style => {
                let stem = conv_out_len(s, 7, 2, 3);
                let pooled = conv_out_len(stem, 3, 2, 1);
                (0..3).fold(pooled, |n, _| conv_out_len(n, 3, 2, 1))
            }
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.stream_channels == 0 {
            return Err(NnError::InvalidConfig("stream_channels must be positive".into()));
        }
        if self.input_size < 2 {
            return Err(NnError::InvalidConfig(format!("input size {} too small", self.input_size)));
        }
        if self.variant == BackboneVariant::Resnet18Style && self.stream_channels % 8 != 0 {
            return Err(NnError::InvalidConfig(format!(
                "residual stream needs channels divisible by 8, got {}",
                self.stream_channels
            )));
        }
        Ok(())
    }

    pub(crate) fn build_stream<R: Rng + ?Sized>(&self, rng: &mut R) -> Stream {
        let c = self.stream_channels;
        let mut layers = Vec::new();
        match self.variant {
            BackboneVariant::ToyCnn => {
                let mut inputs = 1;
                for _ in 0..3 {
                    layers.push(Layer::Conv(Conv2d::new(inputs, c, 3, 2, 1, rng)));
                    layers.push(Layer::Relu);
                    inputs = c;
                }
            }
            BackboneVariant::Resnet18Style => {
                let widths = [c / 8, c / 4, c / 2, c];
                layers.push(Layer::Conv(Conv2d::new(1, widths[0], 7, 2, 3, rng)));
                layers.push(Layer::Relu);
                layers.push(Layer::MaxPool(MaxPool2d { kernel: 3, stride: 2, pad: 1 }));
                let mut inputs = widths[0];
                for (stage, &w) in widths.iter().enumerate() {
                    let stride = if stage == 0 { 1 } else { 2 };
                    layers.push(Layer::Block(Box::new(BasicBlock::new(inputs, w, stride, rng))));
                    layers.push(Layer::Block(Box::new(BasicBlock::new(w, w, 1, rng))));
                    inputs = w;
                }
            }
        }
        Stream { layers }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::FeatureMap;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_sizes() {
        assert_eq!(BackboneConfig::toy(32).output_size(), 4);
        assert_eq!(BackboneConfig::toy(8).output_size(), 1);
        assert_eq!(BackboneConfig::resnet18(224).output_size(), 7);
        assert_eq!(BackboneConfig::toy(32).channels(), 16);
    }

    #[test]
    fn built_streams_produce_declared_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for cfg in [BackboneConfig::toy(32), BackboneConfig { stream_channels: 16, ..BackboneConfig::resnet18(64) }] {
            let stream = cfg.build_stream(&mut rng);
            let n = cfg.input_size;
            let y = stream.forward(FeatureMap::zeros(1, n, n));
            assert_eq!((y.channels, y.height, y.width), (cfg.stream_channels, cfg.output_size(), cfg.output_size()));
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [BackboneVariant::ToyCnn, BackboneVariant::Resnet18Style] {
            assert_eq!(v.as_str().parse::<BackboneVariant>().unwrap(), v);
        }
        assert!("vgg".parse::<BackboneVariant>().is_err());
    }

    #[test]
    fn residual_width_must_split_in_eight() {
        let cfg = BackboneConfig { stream_channels: 12, ..BackboneConfig::resnet18(64) };
        assert!(cfg.validate().is_err());
    }
}
