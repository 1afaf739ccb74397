use serde::{Deserialize, Serialize};

use super::{ChannelStats, Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::Shape;
use crate::rng::{derive_seed, SplitMix64};

/// Parameters of the synthetic image classification task.
///
/// Every class is a fixed grayscale template (an oriented grating plus a
/// Gaussian blob) replicated over three channels; samples add i.i.d.
/// Gaussian pixel noise and clip to `[0, 1]`. Templates depend only on
/// `domain`, noise only on `seed`, so two specs that differ in `domain`
/// describe different tasks over the same label space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub noise: f64,
    pub seed: u64,
    pub domain: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 4,
            train_per_class: 500,
            test_per_class: 125,
            image_size: 16,
            noise: 0.6,
            seed: 1,
            domain: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.num_classes < 2 {
            return Err(Error::config("synthetic data needs image size >= 8 and at least 2 classes"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::config("synthetic data needs samples in both splits"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise level must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn shape(&self) -> Shape {
        Shape::new(3, self.image_size, self.image_size)
    }

    /// Class templates in `[0, 1]`, one `size * size` plane per class.
    pub fn templates(&self) -> Vec<Vec<f64>> {
        let size = self.image_size;
        let k = self.num_classes;
        let mut domain_rng = SplitMix64::stream(self.domain, 0x7e3a);
        let base_angle = domain_rng.uniform() * std::f64::consts::PI;
        (0..k)
            .map(|c| {
                let mut rng = SplitMix64::new(derive_seed(self.domain, c as u64 + 1));
                let theta = base_angle + std::f64::consts::PI * (c as f64 + 0.3 * rng.uniform()) / k as f64;
                let freq = 1.0 + 2.5 * rng.uniform();
                let phase = 2.0 * std::f64::consts::PI * rng.uniform();
                let cx = (0.2 + 0.6 * rng.uniform()) * size as f64;
                let cy = (0.2 + 0.6 * rng.uniform()) * size as f64;
                let radius = 0.15 * size as f64;
                let amp = if rng.uniform() < 0.5 { -0.3 } else { 0.3 };
                let (s, co) = theta.sin_cos();
                let mut plane = Vec::with_capacity(size * size);
                for y in 0..size {
                    for x in 0..size {
                        let (xf, yf) = (x as f64, y as f64);
                        let t = 2.0 * std::f64::consts::PI * freq * (xf * co + yf * s) / size as f64;
                        let d2 = (xf - cx).powi(2) + (yf - cy).powi(2);
                        let v = 0.5 + 0.2 * (t + phase).cos() + amp * (-d2 / (2.0 * radius * radius)).exp();
                        plane.push(v.clamp(0.0, 1.0));
                    }
                }
                plane
            })
            .collect()
    }
}

fn render(spec: &SynthSpec, templates: &[Vec<f64>], per_class: usize, rng: &mut SplitMix64, split: Split) -> Dataset {
    let plane = spec.image_size * spec.image_size;
    let n = per_class * spec.num_classes;
    let mut images = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..per_class {
        for (c, template) in templates.iter().enumerate() {
            let gray: Vec<f32> = template
                .iter()
                .map(|&t| (t + spec.noise * rng.normal()).clamp(0.0, 1.0) as f32)
                .collect();
            for _ in 0..3 {
                images.extend_from_slice(&gray);
            }
            labels.push(c);
        }
    }
    Dataset {
        images,
        labels,
        shape: spec.shape(),
        num_classes: spec.num_classes,
        split,
    }
}

/// Deterministic `(train, test)` pair, centered with the training split's channel means.
pub fn synth_dataset(spec: &SynthSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let templates = spec.templates();
    let mut train_rng = SplitMix64::stream(spec.seed, 1);
    let mut test_rng = SplitMix64::stream(spec.seed, 2);
    let mut train = render(spec, &templates, spec.train_per_class, &mut train_rng, Split::Train);
    let mut test = render(spec, &templates, spec.test_per_class, &mut test_rng, Split::Test);
    let stats = ChannelStats::compute(&train);
    stats.apply(&mut train);
    stats.apply(&mut test);
    Ok((train, test))
}
