//! The three embedding situations wired end to end: the entry point shared by
//! the command-line `embed` command and the test suites.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{predict_proba, train, CnnConfig, HostModel, RegularizerHook, TrainConfig, TrainData};
use crate::record::ExperimentRecord;
use crate::watermark::{ConvWeights, DetectionReport, KeyFamily, KeyMatrix, Watermark, WatermarkBits};

/// How the host is obtained and which targets it is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Situation {
    /// From scratch with labels.
    TrainToEmbed,
    /// Continue training a trained model with labels.
    FinetuneToEmbed,
    /// Continue training a copy of a trained model on its own softmax
    /// outputs; labels are never read.
    DistillToEmbed,
}

impl Situation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Situation::TrainToEmbed => "train-to-embed",
            Situation::FinetuneToEmbed => "finetune-to-embed",
            Situation::DistillToEmbed => "distill-to-embed",
        }
    }

    pub fn needs_source(&self) -> bool {
        !matches!(self, Situation::TrainToEmbed)
    }
}

impl fmt::Display for Situation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Situation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train-to-embed" => Ok(Situation::TrainToEmbed),
            "finetune-to-embed" => Ok(Situation::FinetuneToEmbed),
            "distill-to-embed" => Ok(Situation::DistillToEmbed),
            other => Err(Error::config(format!("unknown embedding situation {other:?}"))),
        }
    }
}

/// What to embed and where. The regularizer weight is `TrainConfig::lambda`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedSpec {
    pub situation: Situation,
    pub family: KeyFamily,
    pub key_seed: u64,
    /// Use this key instead of generating one from `family` and `key_seed`.
    pub key: Option<KeyMatrix>,
    /// Convolution layer or group name.
    pub layer: String,
    /// Payload; its length is `T`.
    pub bits: WatermarkBits,
}

impl EmbedSpec {
    /// Generates the key for `layer` of `model`.
    pub fn watermark(&self, model: &HostModel) -> Result<Watermark> {
        let layer = model.resolve_conv(&self.layer)?;
        let m = ConvWeights::from_layer(layer)?.mean_len();
        let key = match &self.key {
            Some(k) => k.clone(),
            None => KeyMatrix::generate(self.family, self.bits.len(), m, self.key_seed)?,
        };
        Watermark::new(key, self.bits.clone(), layer.name.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedOutcome {
    pub model: HostModel,
    pub mark: Watermark,
    pub record: ExperimentRecord,
    pub report: DetectionReport,
}

/// Runs one embedding. `source` is the trained model for the fine-tune and
/// distill situations and must be `None` for train-to-embed, where the host
/// is built from `arch` with `config.seed`.
pub fn run_embed(
    arch: &CnnConfig,
    spec: &EmbedSpec,
    config: &TrainConfig,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    source: Option<&HostModel>,
) -> Result<EmbedOutcome> {
    let mut model = match (spec.situation.needs_source(), source) {
        (false, None) => arch.build(config.seed)?,
        (true, Some(m)) => m.clone(),
        (false, Some(_)) => return Err(Error::config("train-to-embed starts from scratch; do not pass a source model")),
        (true, None) => return Err(Error::config(format!("{} needs a source model", spec.situation))),
    };
    let mark = spec.watermark(&model)?;
    let soft;
    let data = if spec.situation == Situation::DistillToEmbed {
        soft = predict_proba(&model, train_set)?;
        TrainData { train: train_set, eval: test_set, soft_targets: Some(&soft) }
    } else {
        TrainData::labeled(train_set, test_set)
    };
    let hook = RegularizerHook::new(mark.clone(), config.lambda);
    let mut record = train(&mut model, data, config, &[hook])?;
    record.rows.iter_mut().for_each(|r| r.series = spec.situation.to_string());
    model.embed_layer = Some(mark.layer.clone());
    let report = mark.report(&model)?;
    Ok(EmbedOutcome { model, mark, record, report })
}
