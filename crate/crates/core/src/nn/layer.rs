use serde::{Deserialize, Serialize};

use super::{ConvGeom, NnError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Conv2D,
    ConvTranspose2D,
    BatchNorm2D,
    Dropout2D,
    LeakyReLU,
    GELU,
    Linear,
    Softmax,
}

/// One layer of a sequential network description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerConfig {
    Conv2D {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2D {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        /// Filled in by the shape harness when a model is built.
        #[serde(default)]
        output_padding: usize,
    },
    BatchNorm2D {
        channels: usize,
        epsilon: f64,
        momentum: f64,
    },
    Dropout2D {
        rate: f64,
    },
    LeakyReLU {
        negative_slope: f64,
    },
    GELU,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Softmax,
}

impl LayerConfig {
    pub fn conv(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self::Conv2D {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn conv_t(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self::ConvTranspose2D {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            output_padding: 0,
        }
    }

    /// Batch norm with ε = 1e-5 and momentum 0.1.
    pub fn bn(channels: usize) -> Self {
        Self::BatchNorm2D {
            channels,
            epsilon: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn leaky(negative_slope: f64) -> Self {
        Self::LeakyReLU { negative_slope }
    }

    pub fn dropout(rate: f64) -> Self {
        Self::Dropout2D { rate }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Self::Conv2D { .. } => LayerKind::Conv2D,
            Self::ConvTranspose2D { .. } => LayerKind::ConvTranspose2D,
            Self::BatchNorm2D { .. } => LayerKind::BatchNorm2D,
            Self::Dropout2D { .. } => LayerKind::Dropout2D,
            Self::LeakyReLU { .. } => LayerKind::LeakyReLU,
            Self::GELU => LayerKind::GELU,
            Self::Linear { .. } => LayerKind::Linear,
            Self::Softmax => LayerKind::Softmax,
        }
    }

    /// Channel counts `(in, out)` for layers that change them.
    pub fn channels(&self) -> Option<(usize, usize)> {
        match *self {
            Self::Conv2D {
                in_channels,
                out_channels,
                ..
            }
            | Self::ConvTranspose2D {
                in_channels,
                out_channels,
                ..
            } => Some((in_channels, out_channels)),
            Self::BatchNorm2D { channels, .. } => Some((channels, channels)),
            Self::Linear {
                in_features,
                out_features,
            } => Some((in_features, out_features)),
            _ => None,
        }
    }

    pub fn geom(&self) -> Option<ConvGeom> {
        match *self {
            Self::Conv2D {
                kernel,
                stride,
                padding,
                ..
            }
            | Self::ConvTranspose2D {
                kernel,
                stride,
                padding,
                ..
            } => Some(ConvGeom {
                kernel,
                stride,
                padding,
            }),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |msg: String| Err(NnError::InvalidConfig(msg));
        match *self {
            Self::Conv2D {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            }
            | Self::ConvTranspose2D {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if kernel == 0 || stride == 0 || in_channels == 0 || out_channels == 0 {
                    return bad(format!(
                        "{self:?}: kernel, stride and channels must be >= 1"
                    ));
                }
                if let Self::ConvTranspose2D { output_padding, .. } = *self {
                    if output_padding >= stride.max(1) && output_padding > 0 {
                        return bad(format!(
                            "output_padding {output_padding} must be < stride {stride}"
                        ));
                    }
                }
                Ok(())
            }
            Self::BatchNorm2D {
                channels,
                epsilon,
                momentum,
            } => {
                if channels == 0
                    || epsilon.is_nan()
                    || epsilon <= 0.0
                    || !(0.0..=1.0).contains(&momentum)
                {
                    return bad(format!("{self:?}"));
                }
                Ok(())
            }
            Self::Dropout2D { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return bad(format!("dropout rate {rate} not in [0, 1)"));
                }
                Ok(())
            }
            Self::LeakyReLU { negative_slope } => {
                if !negative_slope.is_finite() {
                    return bad("non-finite negative slope".into());
                }
                Ok(())
            }
            Self::Linear {
                in_features,
                out_features,
            } => {
                if in_features == 0 || out_features == 0 {
                    return bad("linear layer with zero features".into());
                }
                Ok(())
            }
            Self::GELU | Self::Softmax => Ok(()),
        }
    }
}
