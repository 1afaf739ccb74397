//! Binary model file.
//!
//! ```text
//! "NNWM"  u32 version
//! u32 channels, u32 height, u32 width, u32 classes
//! str embed_layer (empty = none)
//! u32 layer_count
//! per layer: str name, u8 kind, u32 rank, rank x u32 dims,
//!            f32 weights[weight_len], f32 biases[bias_len]
//! u64 FNV-1a 64 of every preceding byte
//! ```
//! Integers and floats are little-endian; `str` is a u32 byte length
//! followed by UTF-8.

use std::path::Path;

use super::binary::{Reader, Writer};
use super::{read_file, write_atomic};
use crate::error::{Error, Result};
use crate::nn::{HostModel, Layer, LayerSpec, Shape};

pub const MODEL_MAGIC: &[u8; 4] = b"NNWM";
pub const MODEL_FORMAT_VERSION: u32 = 1;

fn kind_tag(spec: &LayerSpec) -> (u8, Vec<usize>) {
    match *spec {
        LayerSpec::Conv2d { size, in_channels, filters } => (0, vec![size, size, in_channels, filters]),
        LayerSpec::Dense { inputs, outputs } => (1, vec![inputs, outputs]),
        LayerSpec::Relu => (2, vec![]),
        LayerSpec::MaxPool { size } => (3, vec![size]),
        LayerSpec::GlobalAvgPool => (4, vec![]),
        LayerSpec::Flatten => (5, vec![]),
        LayerSpec::ResidualAdd { source } => (6, vec![source]),
    }
}

fn spec_from_tag(tag: u8, dims: &[usize], at: usize) -> Result<LayerSpec> {
    let bad = || Error::Invalid(format!("layer kind {tag} with dims {dims:?} near byte {at}"));
    Ok(match (tag, dims) {
        (0, &[s1, s2, d, l]) if s1 == s2 => LayerSpec::Conv2d { size: s1, in_channels: d, filters: l },
        (1, &[i, o]) => LayerSpec::Dense { inputs: i, outputs: o },
        (2, &[]) => LayerSpec::Relu,
        (3, &[s]) => LayerSpec::MaxPool { size: s },
        (4, &[]) => LayerSpec::GlobalAvgPool,
        (5, &[]) => LayerSpec::Flatten,
        (6, &[s]) => LayerSpec::ResidualAdd { source: s },
        _ => return Err(bad()),
    })
}

pub fn model_to_bytes(model: &HostModel) -> Result<Vec<u8>> {
    model.validate()?;
    let mut w = Writer::default();
    w.bytes(MODEL_MAGIC);
    w.u32(MODEL_FORMAT_VERSION as usize)?;
    let s = model.input_shape;
    for v in [s.channels, s.height, s.width, model.num_classes] {
        w.u32(v)?;
    }
    w.str(model.embed_layer.as_deref().unwrap_or(""))?;
    w.u32(model.layers.len())?;
    for layer in &model.layers {
        w.str(&layer.name)?;
        let (tag, dims) = kind_tag(&layer.spec);
        w.u8(tag);
        w.u32(dims.len())?;
        for d in dims {
            w.u32(d)?;
        }
        w.f32s(&layer.weights);
        w.f32s(&layer.biases);
    }
    Ok(w.finish())
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<HostModel> {
    let mut r = Reader::open(bytes, MODEL_MAGIC, MODEL_FORMAT_VERSION, "model")?;
    let input_shape = Shape::new(r.u32()?, r.u32()?, r.u32()?);
    let num_classes = r.u32()?;
    let embed = r.str()?;
    let count = r.u32()?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = r.str()?;
        let at = r.position();
        let tag = r.u8()?;
        let rank = r.u32()?;
        if rank > 4 {
            return Err(Error::Invalid(format!("layer {name:?}: rank {rank} too large")));
        }
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let spec = spec_from_tag(tag, &dims, at)?;
        let weights = r.f32s(spec.weight_len())?;
        let biases = r.f32s(spec.bias_len())?;
        layers.push(Layer { name, spec, weights, biases });
    }
    r.end()?;
    let model = HostModel {
        input_shape,
        num_classes,
        layers,
        embed_layer: (!embed.is_empty()).then_some(embed),
    };
    model.validate().map_err(|e| Error::Invalid(format!("model file: {e}")))?;
    Ok(model)
}

pub fn save_model(model: &HostModel, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &model_to_bytes(model)?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<HostModel> {
    model_from_bytes(&read_file(path.as_ref())?)
}
