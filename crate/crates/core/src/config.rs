//! Network description files.
//!
//! A config is a TOML document with an `[input]` table and one `[[layer]]`
//! stanza per layer, in order:
//!
//! ```toml
//! [input]
//! channels = 3
//! height = 32
//! width = 32
//!
//! [[layer]]
//! type = "comp-conv"
//! features = 32
//! kernel = [7, 7]        # rows, cols
//! components = [2, 2]    # rows, cols of the initial mean lattice
//!
//! [[layer]]
//! type = "relu"
//!
//! [[layer]]
//! type = "maxpool"
//! window = 3
//! stride = 1
//!
//! [[layer]]
//! type = "fully-connected"
//! outputs = 10
//!
//! [[layer]]
//! type = "softmax-loss"
//! ```
//!
//! `dense-conv` stanzas take `features` and `kernel` only.

use serde::{Deserialize, Serialize};

use crate::error::{DcnError, Result};
use crate::gaussian::KernelGeometry;
use crate::tensor::pooled_len;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerSpec {
    CompConv {
        features: usize,
        kernel: [usize; 2],
        components: [usize; 2],
    },
    DenseConv {
        features: usize,
        kernel: [usize; 2],
    },
    Relu,
    Maxpool {
        window: usize,
        stride: usize,
    },
    FullyConnected {
        outputs: usize,
    },
    SoftmaxLoss,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::CompConv { .. } => "comp-conv",
            LayerSpec::DenseConv { .. } => "dense-conv",
            LayerSpec::Relu => "relu",
            LayerSpec::Maxpool { .. } => "maxpool",
            LayerSpec::FullyConnected { .. } => "fully-connected",
            LayerSpec::SoftmaxLoss => "softmax-loss",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub input: InputSpec,
    #[serde(rename = "layer")]
    pub layers: Vec<LayerSpec>,
}

/// Activation shape `(channels, height, width)` flowing between layers.
pub type Shape3 = (usize, usize, usize);

impl NetworkConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: NetworkConfig =
            toml::from_str(text).map_err(|e| DcnError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(crate::error::io_err(path))?;
        Self::parse(&text).map_err(|e| match e {
            DcnError::Config(msg) => DcnError::Config(format!("{}: {}", path.display(), msg)),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Number of output classes (outputs of the last fully-connected layer).
    pub fn classes(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                LayerSpec::FullyConnected { outputs } => Some(*outputs),
                _ => None,
            })
            .unwrap_or(0)
    }

    /// Shapes entering every layer, followed by the final output shape.
    pub fn shapes(&self) -> Result<Vec<Shape3>> {
        let mut shape = (self.input.channels, self.input.height, self.input.width);
        if shape.0 == 0 || shape.1 == 0 || shape.2 == 0 {
            return Err(DcnError::Config("input dims must be positive".into()));
        }
        let mut shapes = vec![shape];
        for (i, layer) in self.layers.iter().enumerate() {
            let err = |msg: String| {
                DcnError::Config(format!("layer {} ({}): {}", i + 1, layer.kind(), msg))
            };
            shape = match *layer {
                LayerSpec::CompConv {
                    features,
                    kernel,
                    components,
                } => {
                    KernelGeometry::new(kernel[1], kernel[0]).map_err(|e| err(e.to_string()))?;
                    if components[0] == 0 || components[1] == 0 {
                        return Err(err("component grid must be at least 1x1".into()));
                    }
                    conv_shape(shape, features, kernel).map_err(err)?
                }
                LayerSpec::DenseConv { features, kernel } => {
                    conv_shape(shape, features, kernel).map_err(err)?
                }
                LayerSpec::Relu => shape,
                LayerSpec::Maxpool { window, stride } => {
                    if window == 0 || stride == 0 {
                        return Err(err("window and stride must be at least 1".into()));
                    }
                    if window > shape.1 || window > shape.2 {
                        return Err(err(format!(
                            "window {} larger than input {}x{}",
                            window, shape.1, shape.2
                        )));
                    }
                    (
                        shape.0,
                        pooled_len(shape.1, window, stride),
                        pooled_len(shape.2, window, stride),
                    )
                }
                LayerSpec::FullyConnected { outputs } => {
                    if outputs == 0 {
                        return Err(err("outputs must be positive".into()));
                    }
                    (outputs, 1, 1)
                }
                LayerSpec::SoftmaxLoss => shape,
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes()?;
        let last = self.layers.len().checked_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            if matches!(layer, LayerSpec::SoftmaxLoss) && Some(i) != last {
                return Err(DcnError::Config(format!(
                    "layer {}: softmax-loss must be the last layer",
                    i + 1
                )));
            }
        }
        match self.layers.last() {
            Some(LayerSpec::SoftmaxLoss) => {}
            _ => {
                return Err(DcnError::Config(
                    "the last layer must be softmax-loss".into(),
                ))
            }
        }
        if !matches!(
            self.layers.iter().rev().nth(1),
            Some(LayerSpec::FullyConnected { .. })
        ) {
            return Err(DcnError::Config(
                "softmax-loss must follow a fully-connected layer".into(),
            ));
        }
        Ok(())
    }
}

fn conv_shape(
    shape: Shape3,
    features: usize,
    kernel: [usize; 2],
) -> std::result::Result<Shape3, String> {
    if features == 0 {
        return Err("features must be positive".into());
    }
    if kernel[0] == 0 || kernel[1] == 0 {
        return Err("kernel dims must be positive".into());
    }
    if kernel[0] > shape.1 || kernel[1] > shape.2 {
        return Err(format!(
            "kernel {}x{} larger than input {}x{}",
            kernel[0], kernel[1], shape.1, shape.2
        ));
    }
    Ok((features, shape.1 - kernel[0] + 1, shape.2 - kernel[1] + 1))
}

/// The compositional CIFAR-10 network: two compositional layers (7x7 with a
/// 2x2 component grid, 9x9 with 3x3), max-pooling and a 10-way classifier.
pub const CIFAR10_COMPOSITIONAL: &str = include_str!("../../../configs/cifar10-compositional.toml");
/// The matching standard CNN with 5x5 dense filters.
pub const CIFAR10_STANDARD: &str = include_str!("../../../configs/cifar10-standard.toml");
