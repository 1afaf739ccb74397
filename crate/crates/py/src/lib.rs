//! Python bindings: keys, extraction, the host model, synthetic data,
//! train-to-embed and pruning.

use std::path::PathBuf;

use nnwm::attacks::{prune as prune_model, PruneOrder, PruneSpec};
use nnwm::data::{synth_dataset as make_synth, Dataset, SynthSpec};
use nnwm::experiment::{run_embed, EmbedSpec, Situation};
use nnwm::nn::{evaluate, CnnConfig, HostModel, TrainConfig};
use nnwm::persistence::{load_model, model_from_bytes, model_to_bytes, save_model};
use nnwm::watermark::{self, ConvWeights, DetectionReport, FlatMeanParams, KeyFamily, KeyMatrix, Watermark, WatermarkBits};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

fn err(e: nnwm::Error) -> PyErr {
    match e {
        nnwm::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = nnwm::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

/// Secret projection matrix of shape (bits, dim).
#[pyclass(name = "KeyMatrix", module = "pynnwm", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyKeyMatrix(KeyMatrix);

#[pymethods]
impl PyKeyMatrix {
    #[staticmethod]
    fn generate(family: &str, bits: usize, dim: usize, seed: u64) -> PyResult<Self> {
        Ok(PyKeyMatrix(KeyMatrix::generate(parse(family)?, bits, dim, seed).map_err(err)?))
    }

    #[getter]
    fn family(&self) -> &'static str {
        self.0.family().as_str()
    }

    #[getter]
    fn bits(&self) -> usize {
        self.0.bits()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed()
    }

    /// Row-major entries.
    fn values(&self) -> Vec<f64> {
        self.0.values().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("KeyMatrix(family={:?}, bits={}, dim={}, seed={})", self.family(), self.bits(), self.dim(), self.seed())
    }
}

/// Filter mean of a (size, size, depth, filters) tensor given flat in row-major order.
#[pyfunction]
fn filter_mean(size: usize, depth: usize, filters: usize, data: Vec<f32>) -> PyResult<Vec<f64>> {
    let w = ConvWeights::new(size, depth, filters, &data).map_err(err)?;
    Ok(watermark::mean_over_filters(&w).0)
}

/// Extracted payload as a '0'/'1' string.
#[pyfunction]
fn extract(key: &PyKeyMatrix, w: Vec<f64>) -> PyResult<String> {
    Ok(watermark::extract(&key.0, &FlatMeanParams(w)).map_err(err)?.to_string())
}

#[pyfunction]
fn embedding_loss(key: &PyKeyMatrix, w: Vec<f64>, bits: &str) -> PyResult<f64> {
    watermark::embedding_loss(&key.0, &FlatMeanParams(w), &parse(bits)?).map_err(err)
}

#[pyfunction]
fn embedding_loss_grad(key: &PyKeyMatrix, w: Vec<f64>, bits: &str) -> PyResult<Vec<f64>> {
    watermark::embedding_loss_grad(&key.0, &FlatMeanParams(w), &parse(bits)?).map_err(err)
}

#[pyfunction]
fn bit_error_rate(extracted: &str, reference: &str) -> PyResult<f64> {
    watermark::bit_error_rate(&parse(extracted)?, &parse(reference)?).map_err(err)
}

/// Labeled images.
#[pyclass(name = "Dataset", module = "pynnwm", frozen)]
struct PyDataset(Dataset);

#[pymethods]
impl PyDataset {
    fn __len__(&self) -> usize {
        self.0.len()
    }

    /// (channels, height, width)
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.0.shape.channels, self.0.shape.height, self.0.shape.width)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes
    }

    fn labels(&self) -> Vec<usize> {
        self.0.labels.clone()
    }
}

/// Synthetic train and test sets.
#[pyfunction]
#[pyo3(signature = (seed=1, num_classes=4, train_per_class=500, test_per_class=125, image_size=16, noise=None, domain=0))]
fn synth_dataset(
    seed: u64,
    num_classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    image_size: usize,
    noise: Option<f64>,
    domain: u64,
) -> PyResult<(PyDataset, PyDataset)> {
    let spec = SynthSpec {
        num_classes,
        train_per_class,
        test_per_class,
        image_size,
        noise: noise.unwrap_or(SynthSpec::default().noise),
        seed,
        domain,
    };
    let (train, test) = make_synth(&spec).map_err(err)?;
    Ok((PyDataset(train), PyDataset(test)))
}

/// A host network.
#[pyclass(name = "HostModel", module = "pynnwm", skip_from_py_object)]
#[derive(Clone)]
struct PyHostModel(HostModel);

#[pymethods]
impl PyHostModel {
    /// Default desk-scale CNN for the given input and class count.
    #[staticmethod]
    #[pyo3(signature = (seed=0, input=(3, 16, 16), num_classes=4))]
    fn build(seed: u64, input: (usize, usize, usize), num_classes: usize) -> PyResult<Self> {
        let arch = CnnConfig {
            input: nnwm::nn::Shape::new(input.0, input.1, input.2),
            num_classes,
            ..CnnConfig::default()
        };
        Ok(PyHostModel(arch.build(seed).map_err(err)?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyHostModel(load_model(path).map_err(err)?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&self.0, path).map_err(err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &model_to_bytes(&self.0).map_err(err)?))
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(PyHostModel(model_from_bytes(data).map_err(err)?))
    }

    fn layer_names(&self) -> Vec<String> {
        self.0.layers.iter().map(|l| l.name.clone()).collect()
    }

    fn param_count(&self) -> usize {
        self.0.param_count()
    }

    #[getter]
    fn embed_layer(&self) -> Option<String> {
        self.0.embed_layer.clone()
    }

    /// Flat weights of a layer (or a group's last convolution).
    fn weights(&self, layer: &str) -> PyResult<Vec<f32>> {
        match self.0.layer(layer) {
            Some(l) => Ok(l.weights.clone()),
            None => Ok(self.0.resolve_conv(layer).map_err(err)?.weights.clone()),
        }
    }

    /// Filter mean of a convolution layer or group.
    fn filter_mean(&self, layer: &str) -> PyResult<Vec<f64>> {
        let l = self.0.resolve_conv(layer).map_err(err)?;
        Ok(watermark::mean_over_filters(&ConvWeights::from_layer(l).map_err(err)?).0)
    }

    fn evaluate(&self, data: &PyDataset) -> PyResult<f64> {
        evaluate(&self.0, &data.0).map_err(err)
    }

    fn __eq__(&self, other: &PyHostModel) -> bool {
        self.0 == other.0
    }
}

fn report_dict<'py>(py: Python<'py>, r: &DetectionReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("ber", r.ber)?;
    d.set_item("extracted", r.extracted.to_string())?;
    d.set_item("embedding_loss", r.embedding_loss)?;
    d.set_item("mean_abs_logit", r.mean_abs_logit)?;
    d.set_item("near_half_fraction", r.near_half_fraction)?;
    d.set_item("histogram", r.histogram.to_vec())?;
    d.set_item("activations", r.activations.clone())?;
    d.set_item("degenerate", r.degenerate)?;
    d.set_item("overdetermined", r.overdetermined)?;
    Ok(d)
}

/// Detection statistics of `bits` under `key` in `layer` of `model`.
#[pyfunction]
fn report<'py>(py: Python<'py>, model: &PyHostModel, key: &PyKeyMatrix, bits: &str, layer: &str) -> PyResult<Bound<'py, PyDict>> {
    let mark = Watermark::new(key.0.clone(), parse(bits)?, layer).map_err(err)?;
    report_dict(py, &mark.report(&model.0).map_err(err)?)
}

/// Train-to-embed on `train`; returns (model, key, report).
#[pyfunction]
#[pyo3(signature = (train, family="random", bits=64, layer="conv4", lam=0.01, epochs=20, seed=0, key_seed=None, payload=None))]
#[allow(clippy::too_many_arguments)]
fn embed<'py>(
    py: Python<'py>,
    train: &PyDataset,
    family: &str,
    bits: usize,
    layer: &str,
    lam: f64,
    epochs: usize,
    seed: u64,
    key_seed: Option<u64>,
    payload: Option<&str>,
) -> PyResult<(PyHostModel, PyKeyMatrix, Bound<'py, PyDict>)> {
    let ds = &train.0;
    let arch = CnnConfig { input: ds.shape, num_classes: ds.num_classes, ..CnnConfig::default() };
    let bits = match payload {
        Some(p) => parse::<WatermarkBits>(p)?,
        None => WatermarkBits::ones(bits).map_err(err)?,
    };
    let spec = EmbedSpec {
        situation: Situation::TrainToEmbed,
        family: parse::<KeyFamily>(family)?,
        key_seed: key_seed.unwrap_or(seed),
        key: None,
        layer: layer.into(),
        bits,
    };
    let cfg = TrainConfig { seed, lambda: lam, ..TrainConfig::default() }.with_epochs(epochs);
    let out = py
        .detach(|| run_embed(&arch, &spec, &cfg, ds, None, None))
        .map_err(err)?;
    let rep = report_dict(py, &out.report)?;
    Ok((PyHostModel(out.model), PyKeyMatrix(out.mark.key), rep))
}

/// Zeroes `floor(rate * P)` weights of `layer`.
#[pyfunction]
#[pyo3(signature = (model, layer, rate, order="ascending", seed=0))]
fn prune(model: &PyHostModel, layer: &str, rate: f64, order: &str, seed: u64) -> PyResult<PyHostModel> {
    let spec = PruneSpec { layer: layer.into(), rate, order: parse::<PruneOrder>(order)?, seed };
    Ok(PyHostModel(prune_model(&model.0, &spec).map_err(err)?))
}

#[pymodule]
fn pynnwm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyKeyMatrix>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyHostModel>()?;
    m.add_function(wrap_pyfunction!(filter_mean, m)?)?;
    m.add_function(wrap_pyfunction!(extract, m)?)?;
    m.add_function(wrap_pyfunction!(embedding_loss, m)?)?;
    m.add_function(wrap_pyfunction!(embedding_loss_grad, m)?)?;
    m.add_function(wrap_pyfunction!(bit_error_rate, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(embed, m)?)?;
    m.add_function(wrap_pyfunction!(prune, m)?)?;
    Ok(())
}
