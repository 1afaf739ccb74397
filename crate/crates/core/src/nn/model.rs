use serde::{Deserialize, Serialize};

use super::layer::{Layer, LayerSpec, Shape};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// A feed-forward network with optional skip connections.
#[derive(Debug, Clone, PartialEq)]
pub struct HostModel {
    pub input_shape: Shape,
    pub num_classes: usize,
    pub layers: Vec<Layer>,
    /// Name of the convolution layer carrying a watermark, if any.
    pub embed_layer: Option<String>,
}

impl HostModel {
    /// Builds and validates a model from explicit layers.
    pub fn new(input_shape: Shape, num_classes: usize, layers: Vec<Layer>) -> Result<Self> {
        let model = HostModel {
            input_shape,
            num_classes,
            layers,
            embed_layer: None,
        };
        model.validate()?;
        Ok(model)
    }

    /// Checks shape compatibility, parameter sizes, finiteness and the
    /// embed-layer reference.
    pub fn validate(&self) -> Result<()> {
        self.shapes()?;
        let mut names = std::collections::HashSet::new();
        for layer in &self.layers {
            if !names.insert(layer.name.as_str()) {
                return Err(Error::config(format!("duplicate layer name {:?}", layer.name)));
            }
            if layer.weights.len() != layer.spec.weight_len()
                || layer.biases.len() != layer.spec.bias_len()
            {
                return Err(Error::config(format!(
                    "layer {:?}: parameter count does not match its shape",
                    layer.name
                )));
            }
            if layer
                .weights
                .iter()
                .chain(&layer.biases)
                .any(|v| !v.is_finite())
            {
                return Err(Error::numeric(&layer.name, "non-finite parameter"));
            }
        }
        if let Some(name) = &self.embed_layer {
            match self.layer(name) {
                Some(l) if l.is_conv() => {}
                _ => {
                    return Err(Error::config(format!(
                        "embed layer {name:?} is not a convolution layer of this model"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Activation shapes: entry 0 is the input, entry `i + 1` the output of layer `i`.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        if self.input_shape.is_empty() || self.num_classes == 0 {
            return Err(Error::config("empty input shape or zero classes"));
        }
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        shapes.push(self.input_shape);
        for (i, layer) in self.layers.iter().enumerate() {
            let input = shapes[i];
            if let LayerSpec::ResidualAdd { source } = layer.spec {
                if source >= i {
                    return Err(Error::config(format!(
                        "layer {:?}: residual source {source} is not an earlier layer",
                        layer.name
                    )));
                }
                if shapes[source + 1] != input {
                    return Err(Error::config(format!(
                        "layer {:?}: residual shapes {} and {input} differ",
                        layer.name,
                        shapes[source + 1]
                    )));
                }
            }
            let out = layer
                .spec
                .output_shape(input)
                .map_err(|m| Error::config(format!("layer {:?}: {m}", layer.name)))?;
            shapes.push(out);
        }
        let last = *shapes.last().unwrap();
        if last != Shape::new(self.num_classes, 1, 1) {
            return Err(Error::config(format!(
                "network output {last} does not match {} classes",
                self.num_classes
            )));
        }
        Ok(shapes)
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Layer> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Resolves a layer name or a group name (`conv3`) to a convolution layer.
    /// For groups the last convolution of the group is chosen.
    pub fn resolve_conv(&self, target: &str) -> Result<&Layer> {
        if let Some(l) = self.layer(target) {
            return if l.is_conv() {
                Ok(l)
            } else {
                Err(Error::config(format!("layer {target:?} is not a convolution")))
            };
        }
        let prefix = format!("{target}_");
        self.layers
            .iter()
            .rev()
            .find(|l| l.is_conv() && l.name.starts_with(&prefix))
            .ok_or_else(|| Error::config(format!("no convolution layer or group named {target:?}")))
    }

    /// He-style initialization: weights ~ N(0, 2 / fan_in), zero biases.
    /// Each layer draws from its own sub-stream of `seed`.
    pub fn initialize(&mut self, seed: u64) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let fan_in = match layer.spec {
                LayerSpec::Conv2d {
                    size, in_channels, ..
                } => size * size * in_channels,
                LayerSpec::Dense { inputs, .. } => inputs,
                _ => continue,
            };
            let std = (2.0 / fan_in as f64).sqrt();
            let mut rng = SplitMix64::stream(seed, i as u64);
            for w in &mut layer.weights {
                *w = (rng.normal() * std) as f32;
            }
            layer.biases.iter_mut().for_each(|b| *b = 0.0);
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }
}

/// One group of convolutions between pooling stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupConfig {
    pub channels: usize,
    #[serde(default = "one")]
    pub convs: usize,
    /// Skip connection from the first convolution's activation to the last one.
    #[serde(default)]
    pub residual: bool,
}

fn one() -> usize {
    1
}

/// Plain CNN host: groups `conv1..convN` of `conv2d + relu`, 2x2 max pooling
/// between groups, then global average pooling and a dense classifier.
/// Layers are named `conv{g}_{i}`, `conv{g}_{i}_relu`, `pool{g}`, `gap`, `flatten`, `fc`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub input: Shape,
    pub num_classes: usize,
    #[serde(default = "three")]
    pub kernel: usize,
    pub groups: Vec<GroupConfig>,
}

fn three() -> usize {
    3
}

impl Default for CnnConfig {
    /// Desk-scale host for 3x16x16 inputs. The second convolution of `conv4`
    /// sees 64 input channels, so its filter mean has M = 576 entries.
    fn default() -> Self {
        CnnConfig {
            input: Shape::new(3, 16, 16),
            num_classes: 4,
            kernel: 3,
            groups: vec![
                GroupConfig { channels: 8, convs: 1, residual: false },
                GroupConfig { channels: 16, convs: 1, residual: false },
                GroupConfig { channels: 32, convs: 1, residual: false },
                GroupConfig { channels: 64, convs: 2, residual: true },
            ],
        }
    }
}

impl CnnConfig {
    /// Builds the layer stack and initializes it from `seed`.
    pub fn build(&self, seed: u64) -> Result<HostModel> {
        if self.groups.is_empty() {
            return Err(Error::config("architecture needs at least one group"));
        }
        let mut layers = Vec::new();
        let mut channels = self.input.channels;
        for (g, group) in self.groups.iter().enumerate() {
            let gname = format!("conv{}", g + 1);
            if g > 0 {
                layers.push(Layer::new(format!("pool{}", g), LayerSpec::MaxPool { size: 2 }));
            }
            if group.convs == 0 {
                return Err(Error::config(format!("group {gname} has no convolutions")));
            }
            let mut skip_source = None;
            for c in 0..group.convs {
                let name = format!("{gname}_{}", c + 1);
                layers.push(Layer::new(
                    name.clone(),
                    LayerSpec::Conv2d {
                        size: self.kernel,
                        in_channels: channels,
                        filters: group.channels,
                    },
                ));
                channels = group.channels;
                let last = c + 1 == group.convs;
                if last && group.residual {
                    let source = skip_source.ok_or_else(|| {
                        Error::config(format!("residual group {gname} needs at least two convs"))
                    })?;
                    layers.push(Layer::new(format!("{gname}_add"), LayerSpec::ResidualAdd { source }));
                }
                layers.push(Layer::new(format!("{name}_relu"), LayerSpec::Relu));
                if c == 0 {
                    skip_source = Some(layers.len() - 1);
                }
            }
        }
        layers.push(Layer::new("gap", LayerSpec::GlobalAvgPool));
        layers.push(Layer::new("flatten", LayerSpec::Flatten));
        layers.push(Layer::new(
            "fc",
            LayerSpec::Dense {
                inputs: channels,
                outputs: self.num_classes,
            },
        ));
        let mut model = HostModel::new(self.input, self.num_classes, layers)?;
        model.initialize(seed);
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_architecture_shapes() {
        let model = CnnConfig::default().build(1).unwrap();
        let shapes = model.shapes().unwrap();
        assert_eq!(*shapes.last().unwrap(), Shape::new(4, 1, 1));
        let conv = model.resolve_conv("conv4").unwrap();
        assert_eq!(conv.name, "conv4_2");
        assert_eq!(
            conv.spec,
            LayerSpec::Conv2d { size: 3, in_channels: 64, filters: 64 }
        );
        assert_eq!(model.resolve_conv("conv2").unwrap().name, "conv2_1");
    }

    #[test]
    fn residual_needs_two_convs() {
        let mut cfg = CnnConfig::default();
        cfg.groups[0].residual = true;
        assert!(matches!(cfg.build(0), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_incompatible_layers() {
        let layers = vec![
            Layer::new("c", LayerSpec::Conv2d { size: 3, in_channels: 2, filters: 4 }),
            Layer::new("gap", LayerSpec::GlobalAvgPool),
            Layer::new("fc", LayerSpec::Dense { inputs: 4, outputs: 2 }),
        ];
        assert!(HostModel::new(Shape::new(3, 4, 4), 2, layers).is_err());
    }

    #[test]
    fn embed_layer_must_be_conv() {
        let mut model = CnnConfig::default().build(0).unwrap();
        model.embed_layer = Some("fc".into());
        assert!(model.validate().is_err());
        model.embed_layer = Some("conv3_1".into());
        model.validate().unwrap();
    }

    #[test]
    fn init_is_seeded_and_biases_zero() {
        let a = CnnConfig::default().build(7).unwrap();
        let b = CnnConfig::default().build(7).unwrap();
        let c = CnnConfig::default().build(8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.layers.iter().all(|l| l.biases.iter().all(|&b| b == 0.0)));
    }
}
