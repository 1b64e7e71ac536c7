//! Architecture descriptions for the autoencoders and classifiers.

use std::fmt;

use sha2::{Digest, Sha256};

use crate::autodiff::Padding;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dataset {
    Mnist,
    Cifar10,
}

impl Dataset {
    pub fn as_str(self) -> &'static str {
        match self {
            Dataset::Mnist => "mnist",
            Dataset::Cifar10 => "cifar10",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(Dataset::Mnist),
            "cifar10" => Ok(Dataset::Cifar10),
            other => Err(Error::Argument(format!("unknown dataset id {other:?}"))),
        }
    }

    /// `[H, W, C]` of one image.
    pub fn image_shape(self) -> [usize; 3] {
        match self {
            Dataset::Mnist => [28, 28, 1],
            Dataset::Cifar10 => [32, 32, 3],
        }
    }

    pub fn num_classes(self) -> usize {
        10
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerActivation {
    None,
    Relu,
    Sigmoid,
    Softmax,
}

impl LayerActivation {
    fn as_str(self) -> &'static str {
        match self {
            LayerActivation::None => "none",
            LayerActivation::Relu => "relu",
            LayerActivation::Sigmoid => "sigmoid",
            LayerActivation::Softmax => "softmax",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerSpec {
    Conv { kernel: usize, filters: usize, padding: Padding, activation: LayerActivation },
    MaxPool,
    AvgPool,
    Upsample,
    Dense { units: usize, activation: LayerActivation },
    Dropout { rate: f64 },
    GlobalAvgPool,
    Flatten,
}

impl LayerSpec {
    /// 3x3 same-padded convolution.
    pub fn conv(filters: usize, activation: LayerActivation) -> Self {
        LayerSpec::Conv { kernel: 3, filters, padding: Padding::Same, activation }
    }

    fn describe(&self) -> String {
        match *self {
            LayerSpec::Conv { kernel, filters, padding, activation } => {
                format!("conv{kernel}x{kernel}x{filters}:{}:{}", padding.as_str(), activation.as_str())
            }
            LayerSpec::MaxPool => "maxpool2x2".into(),
            LayerSpec::AvgPool => "avgpool2x2".into(),
            LayerSpec::Upsample => "upsample2x2".into(),
            LayerSpec::Dense { units, activation } => format!("dense{units}:{}", activation.as_str()),
            LayerSpec::Dropout { rate } => format!("dropout{rate}"),
            LayerSpec::GlobalAvgPool => "globalavgpool".into(),
            LayerSpec::Flatten => "flatten".into(),
        }
    }

    /// Output shape (without batch axis) for a given input shape.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let spatial = || -> Result<[usize; 3]> {
            match *input {
                [h, w, c] => Ok([h, w, c]),
                _ => Err(Error::shape(format!("{} needs an [H,W,C] input, got {input:?}", self.describe()))),
            }
        };
        Ok(match *self {
            LayerSpec::Conv { kernel, filters, padding, .. } => {
                let [h, w, _] = spatial()?;
                match padding {
                    Padding::Same => vec![h, w, filters],
                    Padding::Valid => {
                        if h < kernel || w < kernel {
                            return Err(Error::shape(format!("valid conv on {input:?}")));
                        }
                        vec![h - kernel + 1, w - kernel + 1, filters]
                    }
                }
            }
            LayerSpec::MaxPool | LayerSpec::AvgPool => {
                let [h, w, c] = spatial()?;
                vec![h.div_ceil(2), w.div_ceil(2), c]
            }
            LayerSpec::Upsample => {
                let [h, w, c] = spatial()?;
                vec![2 * h, 2 * w, c]
            }
            LayerSpec::Dense { units, .. } => {
                if input.len() != 1 {
                    return Err(Error::shape(format!("dense needs a flat input, got {input:?}")));
                }
                vec![units]
            }
            LayerSpec::Dropout { .. } => input.to_vec(),
            LayerSpec::GlobalAvgPool => vec![spatial()?[2]],
            LayerSpec::Flatten => vec![input.iter().product()],
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelRole {
    Classifier,
    /// The first `encoder_layers` layers form the encoder.
    Autoencoder { encoder_layers: usize },
}

/// Layer-by-layer architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub dataset: Dataset,
    pub role: ModelRole,
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

/// Name and shape of one learnable tensor, plus the layer it belongs to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub layer: usize,
    pub fan_in: usize,
    pub fan_out: usize,
    pub is_bias: bool,
}

impl ModelSpec {
    /// Convolutional autoencoder: three conv+pool encoder stages, three
    /// conv+upsample decoder stages and a sigmoid output conv.
    ///
    /// MNIST: 16/8/8 filters with max pooling, code 4x4x8. The third decoder
    /// conv is unpadded so 16x16 shrinks to 14x14 and the output returns to
    /// 28x28. CIFAR10: 32/16/16 filters with average pooling, code 4x4x16.
    pub fn autoencoder(dataset: Dataset) -> Self {
        use LayerActivation::{Relu, Sigmoid};
        let (x1, x2, x3, pool, last_decoder_padding) = match dataset {
            Dataset::Mnist => (16, 8, 1, LayerSpec::MaxPool, Padding::Valid),
            Dataset::Cifar10 => (32, 16, 3, LayerSpec::AvgPool, Padding::Same),
        };
        let layers = vec![
            LayerSpec::conv(x1, Relu),
            pool,
            LayerSpec::conv(x2, Relu),
            pool,
            LayerSpec::conv(x2, Relu),
            pool,
            LayerSpec::conv(x2, Relu),
            LayerSpec::Upsample,
            LayerSpec::conv(x2, Relu),
            LayerSpec::Upsample,
            LayerSpec::Conv { kernel: 3, filters: x1, padding: last_decoder_padding, activation: Relu },
            LayerSpec::Upsample,
            LayerSpec::conv(x3, Sigmoid),
        ];
        Self {
            dataset,
            role: ModelRole::Autoencoder { encoder_layers: 6 },
            input_shape: dataset.image_shape(),
            layers,
        }
    }

    pub fn classifier(dataset: Dataset) -> Self {
        use LayerActivation::{Relu, Softmax};
        let layers = match dataset {
            Dataset::Mnist => vec![
                LayerSpec::conv(16, Relu),
                LayerSpec::MaxPool,
                LayerSpec::conv(8, Relu),
                LayerSpec::MaxPool,
                LayerSpec::conv(8, Relu),
                LayerSpec::MaxPool,
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 128, activation: Relu },
                LayerSpec::Dense { units: 10, activation: Softmax },
            ],
            Dataset::Cifar10 => {
                let c1 = |f| LayerSpec::Conv { kernel: 1, filters: f, padding: Padding::Same, activation: Relu };
                vec![
                    LayerSpec::conv(96, Relu),
                    LayerSpec::conv(96, Relu),
                    LayerSpec::conv(96, Relu),
                    LayerSpec::MaxPool,
                    LayerSpec::Dropout { rate: 0.5 },
                    LayerSpec::conv(192, Relu),
                    LayerSpec::conv(192, Relu),
                    LayerSpec::conv(192, Relu),
                    LayerSpec::MaxPool,
                    LayerSpec::Dropout { rate: 0.5 },
                    LayerSpec::conv(192, Relu),
                    c1(192),
                    c1(10),
                    LayerSpec::GlobalAvgPool,
                    LayerSpec::Dense { units: 10, activation: Softmax },
                ]
            }
        };
        Self { dataset, role: ModelRole::Classifier, input_shape: dataset.image_shape(), layers }
    }

    pub fn is_classifier(&self) -> bool {
        self.role == ModelRole::Classifier
    }

    pub fn encoder_layers(&self) -> Option<usize> {
        match self.role {
            ModelRole::Autoencoder { encoder_layers } => Some(encoder_layers),
            ModelRole::Classifier => None,
        }
    }

    /// Per-layer output shapes, checking that consecutive layers compose.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer.output_shape(&shape)?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.layer_shapes()?.pop().unwrap_or_else(|| self.input_shape.to_vec()))
    }

    /// Shape of the encoder output for autoencoders.
    pub fn code_shape(&self) -> Result<Vec<usize>> {
        let split = self
            .encoder_layers()
            .ok_or_else(|| Error::Argument("classifier has no code layer".into()))?;
        Ok(self.layer_shapes()?[split - 1].clone())
    }

    /// Statically checks the invariants every built spec must satisfy.
    pub fn validate(&self) -> Result<()> {
        let shapes = self.layer_shapes()?;
        let last = shapes.last().ok_or_else(|| Error::Argument("empty model".into()))?;
        match self.role {
            ModelRole::Autoencoder { encoder_layers } => {
                if encoder_layers == 0 || encoder_layers >= self.layers.len() {
                    return Err(Error::Argument("encoder split out of range".into()));
                }
                if last[..] != self.input_shape[..] {
                    return Err(Error::shape(format!(
                        "autoencoder output {last:?} differs from input {:?}",
                        self.input_shape
                    )));
                }
            }
            ModelRole::Classifier => {
                let ok = matches!(
                    self.layers.last(),
                    Some(LayerSpec::Dense { units: 10, activation: LayerActivation::Softmax })
                );
                if !ok {
                    return Err(Error::Argument("classifier must end in Dense 10 + softmax".into()));
                }
            }
        }
        Ok(())
    }

    /// Learnable tensors in storage order.
    pub fn params(&self) -> Result<Vec<ParamSpec>> {
        let mut shape = self.input_shape.to_vec();
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv { kernel, filters, .. } => {
                    let cin = shape[2];
                    let kshape = vec![kernel, kernel, cin, filters];
                    out.push(ParamSpec {
                        name: format!("{i:02}_conv.kernel"),
                        shape: kshape,
                        layer: i,
                        fan_in: kernel * kernel * cin,
                        fan_out: kernel * kernel * filters,
                        is_bias: false,
                    });
                    out.push(ParamSpec {
                        name: format!("{i:02}_conv.bias"),
                        shape: vec![filters],
                        layer: i,
                        fan_in: 0,
                        fan_out: 0,
                        is_bias: true,
                    });
                }
                LayerSpec::Dense { units, .. } => {
                    let n = shape[0];
                    out.push(ParamSpec {
                        name: format!("{i:02}_dense.weights"),
                        shape: vec![n, units],
                        layer: i,
                        fan_in: n,
                        fan_out: units,
                        is_bias: false,
                    });
                    out.push(ParamSpec {
                        name: format!("{i:02}_dense.bias"),
                        shape: vec![units],
                        layer: i,
                        fan_in: 0,
                        fan_out: 0,
                        is_bias: true,
                    });
                }
                _ => {}
            }
            shape = layer.output_shape(&shape)?;
        }
        Ok(out)
    }

    /// Canonical one-line description; two specs are equal iff these match.
    pub fn canonical(&self) -> String {
        let role = match self.role {
            ModelRole::Classifier => "classifier".to_string(),
            ModelRole::Autoencoder { encoder_layers } => format!("autoencoder/{encoder_layers}"),
        };
        let [h, w, c] = self.input_shape;
        let layers: Vec<String> = self.layers.iter().map(LayerSpec::describe).collect();
        format!("{};{role};{h}x{w}x{c};{}", self.dataset, layers.join(","))
    }

    /// First 16 hex digits of the SHA-256 of [`ModelSpec::canonical`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
