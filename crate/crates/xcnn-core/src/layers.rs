//! The layer catalogue: declarative descriptions of the operations a network
//! stage is made of.  A [`LayerSpec`] holds hyperparameters only; parameters
//! are created when a graph materialises the spec.

use alloc::format;
use alloc::string::String;

use crate::error::{Error, Result};

/// One step of a feed-forward stage.
///
/// Convolution channel counts are literal: a conv feeding a `Maxout { pieces }`
/// must already include the factor `pieces` in `out_channels`.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// Square kernel, stride 1, zero "same" padding of `(kernel - 1) / 2`.
    Conv { out_channels: usize, kernel: usize },
    Relu,
    /// Max over groups of `pieces` consecutive channels.
    Maxout { pieces: usize },
    /// Window == stride; halves (or generally divides) the spatial extent.
    MaxPool { window: usize },
    /// Pools each feature map down to a single value.
    GlobalMaxPool,
    BatchNorm,
    Dropout { rate: f64 },
    Dense { units: usize },
    Flatten,
    Identity,
    Softmax,
}

impl LayerSpec {
    /// Channel/feature count after applying this layer to `channels` inputs.
    /// Spatial bookkeeping lives in the graph; this is the part needed for
    /// wiring and parameter shapes.
    pub fn out_channels(&self, channels: usize) -> Result<usize> {
        match *self {
            LayerSpec::Conv { out_channels, kernel } => {
                if out_channels == 0 || kernel == 0 || kernel % 2 == 0 {
                    return Err(Error::invalid(
                        "layer",
                        format!("conv needs odd kernel and positive channels, got {kernel}/{out_channels}"),
                    ));
                }
                Ok(out_channels)
            }
            LayerSpec::Maxout { pieces } => {
                if pieces == 0 || channels % pieces != 0 {
                    return Err(Error::invalid(
                        "layer",
                        format!("maxout of {pieces} pieces does not divide {channels} channels"),
                    ));
                }
                Ok(channels / pieces)
            }
            LayerSpec::Dense { units } => Ok(units),
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::invalid("layer", format!("dropout rate {rate} outside [0, 1)")));
                }
                Ok(channels)
            }
            _ => Ok(channels),
        }
    }

    /// Short name used in layer-site identifiers.
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Relu => "relu",
            LayerSpec::Maxout { .. } => "maxout",
            LayerSpec::MaxPool { .. } => "pool",
            LayerSpec::GlobalMaxPool => "gpool",
            LayerSpec::BatchNorm => "bn",
            LayerSpec::Dropout { .. } => "drop",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Identity => "id",
            LayerSpec::Softmax => "softmax",
        }
    }
}

/// How one superlayer feeds another inside a cross-connection segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EdgeSpec {
    /// Feature maps pass through untouched (the usual self edge).
    Identity,
    /// A learned 1x1 convolution remapping to `out_channels` maps.
    Conv1x1 { out_channels: usize },
}

impl EdgeSpec {
    pub fn describe(&self) -> String {
        match self {
            EdgeSpec::Identity => String::from("identity"),
            EdgeSpec::Conv1x1 { out_channels } => format!("1x1 conv -> {out_channels}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_arithmetic() {
        assert_eq!(LayerSpec::Conv { out_channels: 64, kernel: 3 }.out_channels(3).unwrap(), 64);
        assert_eq!(LayerSpec::Maxout { pieces: 2 }.out_channels(64).unwrap(), 32);
        assert_eq!(LayerSpec::Dense { units: 512 }.out_channels(8192).unwrap(), 512);
        assert_eq!(LayerSpec::Relu.out_channels(7).unwrap(), 7);
    }

    #[test]
    fn bad_hyperparameters_are_rejected() {
        assert!(LayerSpec::Conv { out_channels: 8, kernel: 2 }.out_channels(3).is_err());
        assert!(LayerSpec::Maxout { pieces: 3 }.out_channels(64).is_err());
        assert!(LayerSpec::Dropout { rate: 1.0 }.out_channels(4).is_err());
    }
}
