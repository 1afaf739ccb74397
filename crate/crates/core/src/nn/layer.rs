use serde::{Deserialize, Serialize};

/// Activation shape of a single sample, channels first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape {
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Kind of a layer plus its shape hyperparameters.
///
/// Convolutions are stride 1 with "same" zero padding (`size / 2` on each
/// side), so `size` must be odd. Their weights form a tensor of shape
/// `(size, size, in_channels, filters)` stored row-major, i.e. the flat index
/// of `W[i][j][k][l]` is `((i * size + j) * in_channels + k) * filters + l`.
/// Dense weights are `(inputs, outputs)` row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv2d {
        size: usize,
        in_channels: usize,
        filters: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Relu,
    /// Non-overlapping `size x size` max pooling; trailing rows/columns are dropped.
    MaxPool {
        size: usize,
    },
    GlobalAvgPool,
    Flatten,
    /// Adds the output of layer `source` (an earlier layer) to the input.
    ResidualAdd {
        source: usize,
    },
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "max_pool",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::ResidualAdd { .. } => "residual_add",
        }
    }

    pub fn weight_len(&self) -> usize {
        match *self {
            LayerSpec::Conv2d {
                size,
                in_channels,
                filters,
            } => size * size * in_channels * filters,
            LayerSpec::Dense { inputs, outputs } => inputs * outputs,
            _ => 0,
        }
    }

    pub fn bias_len(&self) -> usize {
        match *self {
            LayerSpec::Conv2d { filters, .. } => filters,
            LayerSpec::Dense { outputs, .. } => outputs,
            _ => 0,
        }
    }

    pub fn has_params(&self) -> bool {
        self.weight_len() > 0
    }

    /// Output shape for `input`, or a message describing the mismatch.
    pub fn output_shape(&self, input: Shape) -> Result<Shape, String> {
        match *self {
            LayerSpec::Conv2d {
                size,
                in_channels,
                filters,
            } => {
                if size == 0 || size % 2 == 0 {
                    return Err(format!("conv filter size {size} must be odd"));
                }
                if in_channels != input.channels || filters == 0 {
                    return Err(format!(
                        "conv expects {in_channels} input channels, got {}",
                        input.channels
                    ));
                }
                Ok(Shape::new(filters, input.height, input.width))
            }
            LayerSpec::Dense { inputs, outputs } => {
                if input.height != 1 || input.width != 1 || input.channels != inputs {
                    return Err(format!("dense expects flat input of {inputs}, got {input}"));
                }
                if outputs == 0 {
                    return Err("dense layer with zero outputs".into());
                }
                Ok(Shape::new(outputs, 1, 1))
            }
            LayerSpec::Relu => Ok(input),
            LayerSpec::MaxPool { size } => {
                if size == 0 || input.height < size || input.width < size {
                    return Err(format!("cannot pool {input} with window {size}"));
                }
                Ok(Shape::new(input.channels, input.height / size, input.width / size))
            }
            LayerSpec::GlobalAvgPool => Ok(Shape::new(input.channels, 1, 1)),
            LayerSpec::Flatten => Ok(Shape::new(input.len(), 1, 1)),
            LayerSpec::ResidualAdd { .. } => Ok(input),
        }
    }
}

/// A named layer with its parameters. Parameterless layers have empty vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
    pub weights: Vec<f32>,
    pub biases: Vec<f32>,
}

impl Layer {
    /// Layer with zero-filled parameters.
    pub fn new(name: impl Into<String>, spec: LayerSpec) -> Self {
        Layer {
            name: name.into(),
            spec,
            weights: vec![0.0; spec.weight_len()],
            biases: vec![0.0; spec.bias_len()],
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.spec, LayerSpec::Conv2d { .. })
    }
}
