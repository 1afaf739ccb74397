//! Labeled image datasets: the synthetic desk-scale task and CIFAR-10.

mod cifar;
mod synth;

pub use cifar::{load_cifar10_binary, parse_cifar10_records, CIFAR_RECORD_LEN};
pub use synth::{synth_dataset, SynthSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Shape;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
    /// Part `i` of a custom split.
    Part(usize),
}

/// Images `(N, C, H, W)` as `f32` plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub shape: Shape,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<usize>, shape: Shape, num_classes: usize, split: Split) -> Result<Self> {
        let ds = Dataset {
            images,
            labels,
            shape,
            num_classes,
            split,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() || self.shape.is_empty() {
            return Err(Error::config("dataset is empty"));
        }
        if self.images.len() != self.labels.len() * self.shape.len() {
            return Err(Error::config(format!(
                "{} pixel values for {} images of shape {}",
                self.images.len(),
                self.labels.len(),
                self.shape
            )));
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::config(format!("label {bad} outside [0, {})", self.num_classes)));
        }
        if self.images.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("dataset", "non-finite pixel"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.shape.len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Gathers samples `indices` into a contiguous `f64` batch.
    pub fn gather(&self, indices: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(indices.len() * self.shape.len());
        for &i in indices {
            out.extend(self.image(i).iter().map(|&v| v as f64));
        }
        out
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.shape.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            shape: self.shape,
            num_classes: self.num_classes,
            split,
        }
    }
}

/// Per-channel means used for centering.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub means: Vec<f64>,
}

impl ChannelStats {
    pub fn compute(ds: &Dataset) -> Self {
        let (c, plane) = (ds.shape.channels, ds.shape.plane());
        let mut sums = vec![0.0f64; c];
        for img in ds.images.chunks_exact(ds.shape.len()) {
            for (ch, sum) in sums.iter_mut().enumerate() {
                *sum += img[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        let count = (ds.len() * plane) as f64;
        ChannelStats {
            means: sums.into_iter().map(|s| s / count).collect(),
        }
    }

    pub fn apply(&self, ds: &mut Dataset) {
        let plane = ds.shape.plane();
        for img in ds.images.chunks_exact_mut(ds.shape.len()) {
            for (ch, &m) in self.means.iter().enumerate() {
                img[ch * plane..(ch + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v = (*v as f64 - m) as f32);
            }
        }
    }
}

/// Seeded shuffle, then contiguous splits sized by `fractions`. The first
/// split is the training split; its channel means center every split.
pub fn split_and_normalize(dataset: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    let total: f64 = fractions.iter().sum();
    if fractions.is_empty() || fractions.iter().any(|f| !(*f >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split fractions {fractions:?} must be non-negative and sum to 1")));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::new(seed).shuffle(&mut order);
    let mut bounds = vec![0usize];
    let mut acc = 0.0;
    for (i, f) in fractions.iter().enumerate() {
        acc += f;
        let end = if i + 1 == fractions.len() { n } else { (acc * n as f64).round() as usize };
        bounds.push(end.min(n));
    }
    let mut parts = Vec::with_capacity(fractions.len());
    for (i, w) in bounds.windows(2).enumerate() {
        if w[1] <= w[0] {
            return Err(Error::config(format!("split {i} would be empty")));
        }
        let split = match (i, fractions.len()) {
            (0, _) => Split::Train,
            (1, 2) => Split::Test,
            _ => Split::Part(i),
        };
        parts.push(dataset.subset(&order[w[0]..w[1]], split));
    }
    let stats = ChannelStats::compute(&parts[0]);
    parts.iter_mut().for_each(|p| stats.apply(p));
    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let shape = Shape::new(2, 2, 2);
        let images: Vec<f32> = (0..n * 8).map(|i| ((i * 37) % 11) as f32 / 11.0).collect();
        Dataset::new(images, (0..n).map(|i| i % 3).collect(), shape, 3, Split::Train).unwrap()
    }

    #[test]
    fn single_fraction_keeps_every_sample() {
        let ds = toy(10);
        let parts = split_and_normalize(&ds, &[1.0], 4).unwrap();
        assert_eq!(parts.len(), 1);
        let mut a = parts[0].labels.clone();
        let mut b = ds.labels.clone();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn splits_are_reproducible_and_centered_on_train() {
        let ds = toy(30);
        let a = split_and_normalize(&ds, &[0.6, 0.4], 9).unwrap();
        let b = split_and_normalize(&ds, &[0.6, 0.4], 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].len(), 18);
        assert_eq!(a[1].len(), 12);
        let stats = ChannelStats::compute(&a[0]);
        assert!(stats.means.iter().all(|m| m.abs() < 1e-6), "{stats:?}");
    }

    #[test]
    fn empty_split_rejected() {
        let ds = toy(3);
        assert!(matches!(split_and_normalize(&ds, &[0.99, 0.01], 0), Err(Error::Config(_))));
        assert!(split_and_normalize(&ds, &[0.5, 0.2], 0).is_err());
    }
}
