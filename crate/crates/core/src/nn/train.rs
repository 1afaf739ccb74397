use serde::{Deserialize, Serialize};

use super::engine::{backward_parallel, forward, Targets};
use super::loss::softmax;
use super::model::HostModel;
use super::optim::{lr_schedule, sgd_nesterov_step, OptimizerState};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::record::{ExperimentRecord, RecordRow};
use crate::rng::SplitMix64;
use crate::watermark::{ConvWeights, Watermark};

/// Minibatch SGD settings. Defaults are the desk-scale values used by the
/// CLI and the test suites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_drop_factor: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Weight of the embedding regularizer.
    pub lambda: f64,
    /// Workers for data-parallel gradient computation; 1 is the reproducible mode.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            lr_initial: 0.05,
            lr_drop_factor: 0.2,
            lr_drop_epochs: vec![10, 15],
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            lambda: 0.01,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !self.lr_drop_epochs.windows(2).all(|w| w[0] < w[1])
            || self.lr_drop_epochs.iter().any(|&e| e >= self.epochs)
        {
            return Err(Error::config(
                "lr drop epochs must be strictly increasing and below the epoch count",
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) || !(self.lambda >= 0.0) || !(self.lr_initial > 0.0) {
            return Err(Error::config("weight decay and lambda must be >= 0, learning rate > 0"));
        }
        Ok(())
    }

    /// Same schedule shape shifted for a continuation run of `epochs` epochs:
    /// drops at half and three quarters of the run.
    pub fn with_epochs(&self, epochs: usize) -> TrainConfig {
        let mut drops: Vec<usize> = [epochs / 2, epochs * 3 / 4]
            .into_iter()
            .filter(|&d| d > 0 && d < epochs)
            .collect();
        drops.dedup();
        TrainConfig {
            epochs,
            lr_drop_epochs: drops,
            ..self.clone()
        }
    }
}

/// Embedding regularizer attached to a training run: adds `lambda * E_R` for
/// `mark` to the task loss.
#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerHook {
    pub mark: Watermark,
    pub lambda: f64,
}

impl RegularizerHook {
    pub fn new(mark: Watermark, lambda: f64) -> Self {
        RegularizerHook { mark, lambda }
    }

    /// Checks `M = S*S*D` of the target layer against the key.
    pub fn check(&self, model: &HostModel) -> Result<()> {
        let layer = self.mark.target(model)?;
        ConvWeights::from_layer(layer)?;
        Ok(())
    }
}

/// Inputs of a training run.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a Dataset,
    /// Evaluated after every epoch when present.
    pub eval: Option<&'a Dataset>,
    /// Row-major `(N, classes)` soft targets replacing the training labels.
    pub soft_targets: Option<&'a [f64]>,
}

impl<'a> TrainData<'a> {
    pub fn labeled(train: &'a Dataset, eval: Option<&'a Dataset>) -> Self {
        TrainData {
            train,
            eval,
            soft_targets: None,
        }
    }
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;

/// Minimizes `E0 + sum(lambda * E_R)` by minibatch SGD with Nesterov momentum.
///
/// Each epoch visits a fresh seeded permutation of the training set in
/// batches of `batch_size` (the last batch may be short). One record row is
/// logged per epoch.
pub fn train(
    model: &mut HostModel,
    data: TrainData<'_>,
    config: &TrainConfig,
    hooks: &[RegularizerHook],
) -> Result<ExperimentRecord> {
    config.validate()?;
    model.validate()?;
    let ds = data.train;
    ds.validate()?;
    if ds.shape != model.input_shape || ds.num_classes != model.num_classes {
        return Err(Error::config(format!(
            "dataset ({} images, {} classes) does not fit the model ({}, {} classes)",
            ds.shape, ds.num_classes, model.input_shape, model.num_classes
        )));
    }
    if let Some(soft) = data.soft_targets {
        if soft.len() != ds.len() * ds.num_classes {
            return Err(Error::config("soft targets do not match the dataset"));
        }
    }
    let mut targets_by_layer = Vec::with_capacity(hooks.len());
    for hook in hooks {
        hook.check(model)?;
        let name = hook.mark.target(model)?.name.clone();
        targets_by_layer.push(model.layer_index(&name).unwrap());
    }

    let mut state = OptimizerState::new(model);
    let mut rng = SplitMix64::stream(config.seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let classes = ds.num_classes;
    let mut record = ExperimentRecord::default();

    for epoch in 0..config.epochs {
        let lr = lr_schedule(epoch, config);
        rng.shuffle(&mut order);
        let (mut sum_e0, mut sum_er, mut sum_total, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for idx in order.chunks(config.batch_size) {
            let inputs = ds.gather(idx);
            let soft_batch: Vec<f64>;
            let labels: Vec<usize>;
            let targets = match data.soft_targets {
                Some(soft) => {
                    soft_batch = idx
                        .iter()
                        .flat_map(|&i| soft[i * classes..(i + 1) * classes].iter().copied())
                        .collect();
                    Targets::Soft(&soft_batch)
                }
                None => {
                    labels = idx.iter().map(|&i| ds.labels[i]).collect();
                    Targets::Labels(&labels)
                }
            };
            let (e0, mut grads) = backward_parallel(model, &inputs, idx.len(), targets, config.threads)
                .map_err(|e| match e {
                    Error::Numeric { detail, .. } => Error::Diverged { epoch, detail },
                    other => other,
                })?;
            let mut e_r = 0.0;
            let mut penalty = 0.0;
            for (hook, &li) in hooks.iter().zip(&targets_by_layer) {
                let (loss, grad_w) = hook.mark.loss_and_weight_grad(model)?;
                e_r += loss;
                penalty += hook.lambda * loss;
                grads.layers[li]
                    .weights
                    .iter_mut()
                    .zip(&grad_w)
                    .for_each(|(g, r)| *g += hook.lambda * r);
            }
            let total = e0 + penalty;
            if !total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("loss became {total}"),
                });
            }
            sgd_nesterov_step(model, &grads, &mut state, lr, config.momentum, config.weight_decay)
                .map_err(|e| match e {
                    Error::Numeric { context, detail } => Error::Diverged {
                        epoch,
                        detail: format!("{context}: {detail}"),
                    },
                    other => other,
                })?;
            sum_e0 += e0;
            sum_er += e_r;
            sum_total += total;
            batches += 1;
        }
        let n = batches as f64;
        let test_error = data.eval.map(|d| evaluate(model, d)).transpose()?;
        let ber = if hooks.is_empty() {
            None
        } else {
            Some(combined_ber(model, hooks)?)
        };
        record.push(RecordRow {
            series: "train".into(),
            step: (epoch + 1) as f64,
            e0: sum_e0 / n,
            e_r: sum_er / n,
            total: sum_total / n,
            test_error,
            ber,
        });
    }
    Ok(record)
}

fn combined_ber(model: &HostModel, hooks: &[RegularizerHook]) -> Result<f64> {
    let mut errors = 0.0;
    let mut bits = 0usize;
    for h in hooks {
        errors += h.mark.ber(model)? * h.mark.bits.len() as f64;
        bits += h.mark.bits.len();
    }
    Ok(errors / bits as f64)
}

const EVAL_CHUNK: usize = 256;

/// Logits for every sample of `ds`, row-major `(N, classes)`.
pub fn predict_logits(model: &HostModel, ds: &Dataset) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(ds.len() * model.num_classes);
    let all: Vec<usize> = (0..ds.len()).collect();
    for idx in all.chunks(EVAL_CHUNK) {
        out.extend(forward(model, &ds.gather(idx), idx.len())?);
    }
    Ok(out)
}

/// Softmax class probabilities for every sample.
pub fn predict_proba(model: &HostModel, ds: &Dataset) -> Result<Vec<f64>> {
    Ok(softmax(&predict_logits(model, ds)?, model.num_classes))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of misclassified samples.
pub fn evaluate(model: &HostModel, ds: &Dataset) -> Result<f64> {
    let logits = predict_logits(model, ds)?;
    let wrong = logits
        .chunks_exact(model.num_classes)
        .zip(&ds.labels)
        .filter(|(row, &label)| argmax(row) != label)
        .count();
    Ok(wrong as f64 / ds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::nn::{Layer, LayerSpec, Shape};

    fn constant_model(class: usize, classes: usize) -> HostModel {
        let mut fc = Layer::new("fc", LayerSpec::Dense { inputs: 2, outputs: classes });
        fc.biases[class] = 1.0;
        HostModel::new(Shape::new(2, 1, 1), classes, vec![fc]).unwrap()
    }

    fn dataset(labels: Vec<usize>, classes: usize) -> Dataset {
        let n = labels.len();
        Dataset::new(vec![0.5; n * 2], labels, Shape::new(2, 1, 1), classes, Split::Test).unwrap()
    }

    #[test]
    fn constant_predictor_error() {
        let ds = dataset(vec![2; 6], 3);
        assert_eq!(evaluate(&constant_model(2, 3), &ds).unwrap(), 0.0);
        assert_eq!(evaluate(&constant_model(1, 3), &ds).unwrap(), 1.0);
    }

    #[test]
    fn hand_counted_errors() {
        // Identity head on 2 classes: the prediction is the larger input; ties go to class 0.
        let mut fc = Layer::new("fc", LayerSpec::Dense { inputs: 2, outputs: 2 });
        fc.weights = vec![1.0, 0.0, 0.0, 1.0];
        let model = HostModel::new(Shape::new(2, 1, 1), 2, vec![fc]).unwrap();
        let inputs: [(f32, f32); 10] = [
            (1.0, 0.0), (0.0, 1.0), (0.5, 0.5), (0.2, 0.9), (0.9, 0.2),
            (0.3, 0.3), (0.0, 0.1), (0.7, 0.6), (0.1, 0.0), (0.4, 0.8),
        ];
        let labels = vec![0, 1, 1, 0, 0, 0, 1, 1, 0, 1];
        // predictions:   0, 1, 0, 1, 0, 0, 1, 0, 0, 1 -> wrong at 2, 3, 7
        let images = inputs.iter().flat_map(|&(a, b)| [a, b]).collect();
        let ds = Dataset::new(images, labels, Shape::new(2, 1, 1), 2, Split::Test).unwrap();
        assert!((evaluate(&model, &ds).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        cfg.validate().unwrap();
        cfg.lr_drop_epochs = vec![15, 10];
        assert!(cfg.validate().is_err());
        cfg.lr_drop_epochs = vec![25];
        assert!(cfg.validate().is_err());
        let cont = TrainConfig::default().with_epochs(10);
        assert_eq!(cont.lr_drop_epochs, vec![5, 7]);
        cont.validate().unwrap();
        assert!(TrainConfig::default().with_epochs(1).lr_drop_epochs.is_empty());
    }
}
