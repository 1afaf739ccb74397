//! Attacks against an embedded watermark: magnitude pruning, fine-tuning,
//! overwriting with a second watermark, and distillation into a fresh model.
//!
//! Every report measures the original watermark with the key the caller
//! passes in, never with a re-derived one.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{evaluate, predict_proba, train, HostModel, RegularizerHook, TrainConfig, TrainData};
use crate::record::ExperimentRecord;
use crate::rng::{derive_seed, SplitMix64};
use crate::watermark::{ConvWeights, KeyFamily, KeyMatrix, Watermark, WatermarkBits};

/// Which weights a pruning pass removes first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneOrder {
    /// Smallest magnitude first (ordinary magnitude pruning).
    Ascending,
    /// Largest magnitude first.
    Descending,
    /// Uniformly random subset.
    Random,
}

impl PruneOrder {
    pub const ALL: [PruneOrder; 3] = [PruneOrder::Ascending, PruneOrder::Descending, PruneOrder::Random];

    pub fn as_str(&self) -> &'static str {
        match self {
            PruneOrder::Ascending => "ascending",
            PruneOrder::Descending => "descending",
            PruneOrder::Random => "random",
        }
    }
}

impl fmt::Display for PruneOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PruneOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ascending" => Ok(PruneOrder::Ascending),
            "descending" => Ok(PruneOrder::Descending),
            "random" => Ok(PruneOrder::Random),
            other => Err(Error::config(format!("unknown pruning order {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSpec {
    /// Convolution layer or group name.
    pub layer: String,
    /// Fraction `alpha` of the layer's weights to zero.
    pub rate: f64,
    pub order: PruneOrder,
    /// Only used by [`PruneOrder::Random`].
    pub seed: u64,
}

/// Indices of the `floor(rate * len)` weights removed by `order`.
/// Magnitude ties are broken by flat index.
pub fn prune_indices(weights: &[f32], rate: f64, order: PruneOrder, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::config(format!("pruning rate {rate} outside [0, 1]")));
    }
    let count = (rate * weights.len() as f64).floor() as usize;
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    match order {
        PruneOrder::Ascending => idx.sort_by(|&a, &b| {
            weights[a].abs().total_cmp(&weights[b].abs()).then(a.cmp(&b))
        }),
        PruneOrder::Descending => idx.sort_by(|&a, &b| {
            weights[b].abs().total_cmp(&weights[a].abs()).then(a.cmp(&b))
        }),
        PruneOrder::Random => {
            // Partial Fisher-Yates: the first `count` slots become a uniform sample.
            let mut rng = SplitMix64::new(seed);
            for i in 0..count {
                let j = i + rng.below((idx.len() - i) as u64) as usize;
                idx.swap(i, j);
            }
        }
    }
    idx.truncate(count);
    Ok(idx)
}

/// Zeroes `floor(rate * P)` entries of the layer's full weight tensor
/// (`P = S*S*D*L`). Biases are untouched.
pub fn prune(model: &HostModel, spec: &PruneSpec) -> Result<HostModel> {
    let name = model.resolve_conv(&spec.layer)?.name.clone();
    let mut out = model.clone();
    let layer = out.layer_mut(&name).unwrap();
    for i in prune_indices(&layer.weights, spec.rate, spec.order, spec.seed)? {
        layer.weights[i] = 0.0;
    }
    Ok(out)
}

/// Measurements around a fine-tuning attack.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneReport {
    /// Embedding loss under the original key before fine-tuning.
    pub e_r_before: f64,
    /// Embedding loss under the original key after fine-tuning.
    pub e_r_after: f64,
    pub ber_before: f64,
    pub ber_after: f64,
    pub test_error: Option<f64>,
    pub record: ExperimentRecord,
}

/// Continues training without any regularizer. `config` should carry the
/// reset learning rate of the continuation run.
pub fn finetune_attack(
    model: &HostModel,
    data: TrainData<'_>,
    config: &TrainConfig,
    original: &Watermark,
) -> Result<(HostModel, FinetuneReport)> {
    let e_r_before = original.loss(model)?;
    let ber_before = original.ber(model)?;
    let mut out = model.clone();
    let mut record = train(&mut out, data, config, &[])?;
    record.rows.iter_mut().for_each(|r| r.series = "finetune".into());
    let test_error = data.eval.map(|d| evaluate(&out, d)).transpose()?;
    let report = FinetuneReport {
        e_r_before,
        e_r_after: original.loss(&out)?,
        ber_before,
        ber_after: original.ber(&out)?,
        test_error,
        record,
    };
    Ok((out, report))
}

/// A second watermark embedded by an attacker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverwriteSpec {
    /// Layers (or groups) receiving the new watermark.
    pub layers: Vec<String>,
    pub family: KeyFamily,
    /// Key seed for the first target; later targets use derived seeds.
    pub seed: u64,
    /// Payload length `T'` (all-ones payload).
    pub bits: usize,
    pub lambda: f64,
    pub config: TrainConfig,
}

impl OverwriteSpec {
    /// The attacker's watermarks, one per target layer.
    pub fn marks(&self, model: &HostModel) -> Result<Vec<Watermark>> {
        if self.bits == 0 {
            return Err(Error::config("overwrite payload needs at least one bit"));
        }
        if self.layers.is_empty() {
            return Err(Error::config("overwrite needs at least one target layer"));
        }
        self.layers
            .iter()
            .enumerate()
            .map(|(i, target)| {
                let layer = model.resolve_conv(target)?;
                let m = ConvWeights::from_layer(layer)?.mean_len();
                let seed = if i == 0 { self.seed } else { derive_seed(self.seed, i as u64) };
                let key = KeyMatrix::generate(self.family, self.bits, m, seed)?;
                Watermark::new(key, WatermarkBits::ones(self.bits)?, layer.name.clone())
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverwriteReport {
    /// BER of the attacker's watermarks (all targets pooled).
    pub new_ber: f64,
    pub original_ber: f64,
    pub original_e_r: f64,
    pub test_error: Option<f64>,
    pub record: ExperimentRecord,
}

/// Trains the model further with regularizers for the attacker's keys.
pub fn overwrite_attack(
    model: &HostModel,
    spec: &OverwriteSpec,
    data: TrainData<'_>,
    original: &Watermark,
) -> Result<(HostModel, OverwriteReport)> {
    let marks = spec.marks(model)?;
    let hooks: Vec<RegularizerHook> = marks
        .iter()
        .cloned()
        .map(|m| RegularizerHook::new(m, spec.lambda))
        .collect();
    let mut out = model.clone();
    let mut record = train(&mut out, data, &spec.config, &hooks)?;
    record.rows.iter_mut().for_each(|r| r.series = "overwrite".into());
    let (mut wrong, mut total) = (0.0, 0usize);
    for m in &marks {
        wrong += m.ber(&out)? * m.bits.len() as f64;
        total += m.bits.len();
    }
    let report = OverwriteReport {
        new_ber: wrong / total as f64,
        original_ber: original.ber(&out)?,
        original_e_r: original.loss(&out)?,
        test_error: data.eval.map(|d| evaluate(&out, d)).transpose()?,
        record,
    };
    Ok((out, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillReport {
    pub student_error: Option<f64>,
    pub teacher_error: Option<f64>,
    /// Student BER under the teacher's key.
    pub ber: f64,
    pub record: ExperimentRecord,
}

const STUDENT_STREAM: u64 = 0x5354_5544;

/// Initialization seed of a distillation student; never equal to `seed`.
pub fn student_seed(seed: u64) -> u64 {
    derive_seed(seed, STUDENT_STREAM)
}

/// Trains a freshly initialized model of the teacher's architecture on the
/// teacher's softmax outputs (temperature 1). Training labels are ignored.
pub fn distill_attack(
    teacher: &HostModel,
    train_set: &crate::data::Dataset,
    eval: Option<&crate::data::Dataset>,
    config: &TrainConfig,
    original: &Watermark,
) -> Result<(HostModel, DistillReport)> {
    let soft = predict_proba(teacher, train_set)?;
    let mut student = teacher.clone();
    student.embed_layer = None;
    student.initialize(student_seed(config.seed));
    let data = TrainData {
        train: train_set,
        eval,
        soft_targets: Some(&soft),
    };
    let mut record = train(&mut student, data, config, &[])?;
    record.rows.iter_mut().for_each(|r| r.series = "distill".into());
    let report = DistillReport {
        student_error: eval.map(|d| evaluate(&student, d)).transpose()?,
        teacher_error: eval.map(|d| evaluate(teacher, d)).transpose()?,
        ber: original.ber(&student)?,
        record,
    };
    Ok((student, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::CnnConfig;
    use proptest::prelude::*;

    #[test]
    fn ascending_removes_smallest_magnitudes() {
        let w = [0.1f32, -0.5, 0.3, -0.2];
        let idx = prune_indices(&w, 0.5, PruneOrder::Ascending, 0).unwrap();
        assert_eq!(idx, vec![0, 3]);
        let idx = prune_indices(&w, 0.5, PruneOrder::Descending, 0).unwrap();
        assert_eq!(idx, vec![1, 2]);
    }

    #[test]
    fn magnitude_ties_follow_index_order() {
        let w = [0.2f32, -0.2, 0.2, 0.1];
        assert_eq!(prune_indices(&w, 0.5, PruneOrder::Ascending, 0).unwrap(), vec![3, 0]);
        assert_eq!(prune_indices(&w, 0.5, PruneOrder::Descending, 0).unwrap(), vec![0, 1]);
    }

    #[test]
    fn zero_rate_is_identity_and_full_rate_zeroes_layer() {
        let model = CnnConfig::default().build(2).unwrap();
        let spec = PruneSpec { layer: "conv4".into(), rate: 0.0, order: PruneOrder::Ascending, seed: 0 };
        assert_eq!(prune(&model, &spec).unwrap(), model);
        let full = prune(&model, &PruneSpec { rate: 1.0, ..spec }).unwrap();
        let layer = full.layer("conv4_2").unwrap();
        assert!(layer.weights.iter().all(|&w| w == 0.0));
        assert_eq!(layer.biases, model.layer("conv4_2").unwrap().biases);
    }

    #[test]
    fn fully_pruned_layer_reads_all_ones_and_is_flagged() {
        let model = CnnConfig::default().build(2).unwrap();
        let spec = PruneSpec { layer: "conv4".into(), rate: 1.0, order: PruneOrder::Random, seed: 5 };
        let pruned = prune(&model, &spec).unwrap();
        let key = KeyMatrix::generate(KeyFamily::Random, 64, 576, 1).unwrap();
        let mark = Watermark::new(key, WatermarkBits::ones(64).unwrap(), "conv4").unwrap();
        let report = mark.report(&pruned).unwrap();
        assert_eq!(report.ber, 0.0);
        assert!(report.degenerate);
    }

    #[test]
    fn bad_rate_rejected() {
        assert!(prune_indices(&[1.0], 1.5, PruneOrder::Random, 0).is_err());
    }

    proptest! {
        #[test]
        fn pruning_zeroes_exactly_floor_rate_entries(
            weights in proptest::collection::vec(
                prop_oneof![-2.0f32..-0.001, 0.001f32..2.0], 1..300),
            rate in 0.0f64..=1.0,
            order in prop_oneof![Just(PruneOrder::Ascending), Just(PruneOrder::Descending), Just(PruneOrder::Random)],
            seed in any::<u64>(),
        ) {
            let idx = prune_indices(&weights, rate, order, seed).unwrap();
            let expected = (rate * weights.len() as f64).floor() as usize;
            prop_assert_eq!(idx.len(), expected);
            let mut sorted = idx.clone();
            sorted.sort_unstable();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), expected);
            if order == PruneOrder::Ascending && expected > 0 && expected < weights.len() {
                let kept_min = (0..weights.len())
                    .filter(|i| !idx.contains(i))
                    .map(|i| weights[i].abs())
                    .fold(f32::INFINITY, f32::min);
                let removed_max = idx.iter().map(|&i| weights[i].abs()).fold(0.0, f32::max);
                prop_assert!(removed_max <= kept_min);
            }
        }
    }

    #[test]
    fn student_seed_differs() {
        for s in [0u64, 1, 42, u64::MAX] {
            assert_ne!(student_seed(s), s);
        }
    }
}
