//! Watermark keys, extraction and the embedding regularizer.
//!
//! A convolution layer with weights `W` of shape `(S, S, D, L)` is reduced
//! to its filter mean `w` (length `M = S * S * D`), which does not depend on
//! the order of the `L` filters. Bit `j` is read as the sign of the
//! projection `z_j = sum_i X[j][i] * w[i]` with the secret key `X`.

mod direct;
mod key;

pub use direct::{direct_embed, DirectEmbedReport};
pub use key::{KeyFamily, KeyMatrix};

use crate::error::{Error, Result};
use crate::nn::{HostModel, Layer, LayerSpec};

/// Logits are clamped to this magnitude before the sigmoid.
pub const LOGIT_CLAMP: f64 = 30.0;

/// A `T`-bit payload.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WatermarkBits(Vec<u8>);

impl WatermarkBits {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::config("watermark needs at least one bit"));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::config("watermark bits must be 0 or 1"));
        }
        Ok(WatermarkBits(bits))
    }

    /// The all-ones payload used by default in experiments.
    pub fn ones(len: usize) -> Result<Self> {
        Self::new(vec![1; len])
    }

    /// Uniformly random payload drawn from `seed`.
    pub fn random(len: usize, seed: u64) -> Result<Self> {
        let mut rng = crate::rng::SplitMix64::new(seed);
        Self::new((0..len).map(|_| (rng.next_u64() >> 63) as u8).collect())
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn complement(&self) -> Self {
        WatermarkBits(self.0.iter().map(|b| 1 - b).collect())
    }
}

impl std::fmt::Display for WatermarkBits {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for b in &self.0 {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for WatermarkBits {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(Error::config(format!("invalid bit character {other:?}"))),
            })
            .collect::<Result<Vec<u8>>>()
            .and_then(Self::new)
    }
}

/// Borrowed view of a convolution weight tensor `(size, size, depth, filters)`.
#[derive(Debug, Clone, Copy)]
pub struct ConvWeights<'a> {
    size: usize,
    depth: usize,
    filters: usize,
    data: &'a [f32],
}

impl<'a> ConvWeights<'a> {
    pub fn new(size: usize, depth: usize, filters: usize, data: &'a [f32]) -> Result<Self> {
        if size == 0 || depth == 0 || filters == 0 || data.len() != size * size * depth * filters {
            return Err(Error::config(format!(
                "{} weights do not form a ({size}, {size}, {depth}, {filters}) tensor",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("conv weights", "non-finite value"));
        }
        Ok(ConvWeights {
            size,
            depth,
            filters,
            data,
        })
    }

    pub fn from_layer(layer: &'a Layer) -> Result<Self> {
        match layer.spec {
            LayerSpec::Conv2d {
                size,
                in_channels,
                filters,
            } => Self::new(size, in_channels, filters, &layer.weights),
            _ => Err(Error::config(format!("layer {:?} is not a convolution", layer.name))),
        }
    }

    /// `M = S * S * D`.
    pub fn mean_len(&self) -> usize {
        self.size * self.size * self.depth
    }

    pub fn filters(&self) -> usize {
        self.filters
    }

    pub fn data(&self) -> &'a [f32] {
        self.data
    }
}

/// Filter-mean vector `w`, flattened with `i` (row) major, then `j`, then `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatMeanParams(pub Vec<f64>);

impl FlatMeanParams {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `w[(i*S + j)*D + k] = (1/L) * sum_l W[i][j][k][l]`.
pub fn mean_over_filters(weights: &ConvWeights<'_>) -> FlatMeanParams {
    let l = weights.filters;
    FlatMeanParams(
        weights
            .data
            .chunks_exact(l)
            .map(|filters| filters.iter().map(|&v| v as f64).sum::<f64>() / l as f64)
            .collect(),
    )
}

fn check_dims(key: &KeyMatrix, w: &FlatMeanParams) -> Result<()> {
    if key.dim() != w.len() {
        return Err(Error::config(format!(
            "key expects M = {} parameters, layer provides {}",
            key.dim(),
            w.len()
        )));
    }
    Ok(())
}

fn check_bits(key: &KeyMatrix, bits: &WatermarkBits) -> Result<()> {
    if key.bits() != bits.len() {
        return Err(Error::config(format!(
            "key has T = {} rows but the payload has {} bits",
            key.bits(),
            bits.len()
        )));
    }
    Ok(())
}

/// Projection `z = X w`.
pub fn project(key: &KeyMatrix, w: &FlatMeanParams) -> Result<Vec<f64>> {
    check_dims(key, w)?;
    Ok(key
        .rows()
        .map(|row| row.iter().zip(&w.0).map(|(x, v)| x * v).sum())
        .collect())
}

/// Bit `j` is 1 when `z_j >= 0`, including exactly zero.
pub fn extract(key: &KeyMatrix, w: &FlatMeanParams) -> Result<WatermarkBits> {
    let z = project(key, w)?;
    Ok(WatermarkBits(z.iter().map(|&v| u8::from(v >= 0.0)).collect()))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn clamp_logit(z: f64) -> f64 {
    z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
}

/// Binary cross entropy of `sigmoid(X w)` against the payload, summed over bits.
pub fn embedding_loss(key: &KeyMatrix, w: &FlatMeanParams, bits: &WatermarkBits) -> Result<f64> {
    check_bits(key, bits)?;
    let z = project(key, w)?;
    Ok(z
        .iter()
        .zip(bits.as_slice())
        .map(|(&zj, &b)| {
            let zj = clamp_logit(zj);
            // -ln(sigmoid(z)) = softplus(-z); -ln(1 - sigmoid(z)) = softplus(z)
            if b == 1 {
                softplus(-zj)
            } else {
                softplus(zj)
            }
        })
        .sum())
}

/// `dE_R/dw_i = sum_j (y_j - b_j) * X[j][i]`.
pub fn embedding_loss_grad(key: &KeyMatrix, w: &FlatMeanParams, bits: &WatermarkBits) -> Result<Vec<f64>> {
    check_bits(key, bits)?;
    let z = project(key, w)?;
    let mut grad = vec![0.0; key.dim()];
    for (j, row) in key.rows().enumerate() {
        let r = sigmoid(clamp_logit(z[j])) - bits.as_slice()[j] as f64;
        grad.iter_mut().zip(row).for_each(|(g, x)| *g += r * x);
    }
    Ok(grad)
}

/// Chains a gradient with respect to `w` through the filter mean:
/// `dE/dW[i][j][k][l] = (1/L) * dE/dw[(i*S + j)*D + k]`.
pub fn chain_to_weights(grad_mean: &[f64], filters: usize) -> Vec<f64> {
    let scale = 1.0 / filters as f64;
    grad_mean
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * scale, filters))
        .collect()
}

/// Hamming distance divided by `T`.
pub fn bit_error_rate(extracted: &WatermarkBits, reference: &WatermarkBits) -> Result<f64> {
    if extracted.len() != reference.len() {
        return Err(Error::config(format!(
            "cannot compare {} bits against {}",
            extracted.len(),
            reference.len()
        )));
    }
    let errors = extracted
        .as_slice()
        .iter()
        .zip(reference.as_slice())
        .filter(|(a, b)| a != b)
        .count();
    Ok(errors as f64 / extracted.len() as f64)
}

/// Statistics of the projected watermark. Carries no embedded/not-embedded verdict.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionReport {
    /// `sigmoid(z_j)` per bit, computed on clamped logits.
    pub activations: Vec<f64>,
    pub extracted: WatermarkBits,
    pub ber: f64,
    pub embedding_loss: f64,
    pub mean_abs_logit: f64,
    /// Fraction of activations within `[0.45, 0.55]`.
    pub near_half_fraction: f64,
    /// Counts of activations in ten equal bins over `[0, 1]`.
    pub histogram: [usize; 10],
    /// Every logit is exactly zero (e.g. a fully pruned layer); bits then read as all ones.
    pub degenerate: bool,
    /// `T > M`: more bits than mean parameters.
    pub overdetermined: bool,
}

pub fn detection_report(key: &KeyMatrix, w: &FlatMeanParams, reference: &WatermarkBits) -> Result<DetectionReport> {
    check_bits(key, reference)?;
    let z = project(key, w)?;
    let activations: Vec<f64> = z.iter().map(|&v| sigmoid(clamp_logit(v))).collect();
    let extracted = WatermarkBits(z.iter().map(|&v| u8::from(v >= 0.0)).collect());
    let t = z.len() as f64;
    let mut histogram = [0usize; 10];
    for &y in &activations {
        histogram[((y * 10.0) as usize).min(9)] += 1;
    }
    Ok(DetectionReport {
        ber: bit_error_rate(&extracted, reference)?,
        embedding_loss: embedding_loss(key, w, reference)?,
        mean_abs_logit: z.iter().map(|v| v.abs()).sum::<f64>() / t,
        near_half_fraction: activations.iter().filter(|&&y| (0.45..=0.55).contains(&y)).count() as f64 / t,
        histogram,
        degenerate: z.iter().all(|&v| v == 0.0),
        overdetermined: key.bits() > key.dim(),
        activations,
        extracted,
    })
}

/// A key, its payload and the layer that carries them.
#[derive(Debug, Clone, PartialEq)]
pub struct Watermark {
    pub key: KeyMatrix,
    pub bits: WatermarkBits,
    /// Convolution layer name (or group name, resolved to the group's last convolution).
    pub layer: String,
}

impl Watermark {
    pub fn new(key: KeyMatrix, bits: WatermarkBits, layer: impl Into<String>) -> Result<Self> {
        check_bits(&key, &bits)?;
        Ok(Watermark {
            key,
            bits,
            layer: layer.into(),
        })
    }

    /// Resolves the target layer in `model` and checks `M` against the key.
    pub fn target<'m>(&self, model: &'m HostModel) -> Result<&'m Layer> {
        let layer = model.resolve_conv(&self.layer)?;
        let weights = ConvWeights::from_layer(layer)?;
        if weights.mean_len() != self.key.dim() {
            return Err(Error::config(format!(
                "key expects M = {} but layer {:?} has S*S*D = {}",
                self.key.dim(),
                layer.name,
                weights.mean_len()
            )));
        }
        Ok(layer)
    }

    pub fn mean_params(&self, model: &HostModel) -> Result<FlatMeanParams> {
        let layer = self.target(model)?;
        Ok(mean_over_filters(&ConvWeights::from_layer(layer)?))
    }

    pub fn report(&self, model: &HostModel) -> Result<DetectionReport> {
        detection_report(&self.key, &self.mean_params(model)?, &self.bits)
    }

    pub fn loss(&self, model: &HostModel) -> Result<f64> {
        embedding_loss(&self.key, &self.mean_params(model)?, &self.bits)
    }

    pub fn ber(&self, model: &HostModel) -> Result<f64> {
        bit_error_rate(&extract(&self.key, &self.mean_params(model)?)?, &self.bits)
    }

    /// `E_R` and its gradient with respect to the full weight tensor of the target layer.
    pub fn loss_and_weight_grad(&self, model: &HostModel) -> Result<(f64, Vec<f64>)> {
        let layer = self.target(model)?;
        let weights = ConvWeights::from_layer(layer)?;
        let w = mean_over_filters(&weights);
        let loss = embedding_loss(&self.key, &w, &self.bits)?;
        let grad = embedding_loss_grad(&self.key, &w, &self.bits)?;
        Ok((loss, chain_to_weights(&grad, weights.filters())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn normal_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut r = SplitMix64::new(seed);
        (0..n).map(|_| r.normal()).collect()
    }

    fn identity_key(n: usize) -> KeyMatrix {
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
        KeyMatrix::from_values(KeyFamily::Direct, n, n, 0, v).unwrap()
    }

    #[test]
    fn filter_mean_small_example() {
        // S=1, D=2, L=2; layout [k][l]: d=0 -> (1, 3), d=1 -> (-2, 0)
        let data = [1.0f32, 3.0, -2.0, 0.0];
        let w = mean_over_filters(&ConvWeights::new(1, 2, 2, &data).unwrap());
        assert_eq!(w.0, vec![2.0, -1.0]);
    }

    #[test]
    fn single_filter_mean_is_the_tensor() {
        let data: Vec<f32> = (0..18).map(|i| i as f32 * 0.5 - 3.0).collect();
        let w = mean_over_filters(&ConvWeights::new(3, 2, 1, &data).unwrap());
        assert_eq!(w.0, data.iter().map(|&v| v as f64).collect::<Vec<_>>());
    }

    #[test]
    fn filter_mean_matches_nested_loops() {
        let (s, d, l) = (3, 4, 5);
        let data: Vec<f32> = normal_vec(s * s * d * l, 3).iter().map(|&v| v as f32).collect();
        let w = mean_over_filters(&ConvWeights::new(s, d, l, &data).unwrap());
        for i in 0..s {
            for j in 0..s {
                for k in 0..d {
                    let mut acc = 0.0f64;
                    for f in 0..l {
                        acc += data[((i * s + j) * d + k) * l + f] as f64;
                    }
                    assert_eq!(w.0[(i * s + j) * d + k], acc / l as f64);
                }
            }
        }
    }

    #[test]
    fn identity_projection() {
        let w = FlatMeanParams(vec![1.0, -2.0, 3.0]);
        let key = identity_key(3);
        assert_eq!(project(&key, &w).unwrap(), vec![1.0, -2.0, 3.0]);
        assert_eq!(extract(&key, &w).unwrap().as_slice(), &[1, 0, 1]);
        let zero = FlatMeanParams(vec![0.0; 3]);
        assert_eq!(project(&key, &zero).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn zero_logit_reads_as_one() {
        let key = KeyMatrix::from_values(KeyFamily::Random, 1, 1, 0, vec![2.0]).unwrap();
        assert_eq!(extract(&key, &FlatMeanParams(vec![0.0])).unwrap().as_slice(), &[1]);
    }

    #[test]
    fn projection_matches_double_loop() {
        let key = KeyMatrix::generate(KeyFamily::Random, 8, 16, 5).unwrap();
        let w = FlatMeanParams(normal_vec(16, 6));
        let z = project(&key, &w).unwrap();
        let bits = extract(&key, &w).unwrap();
        for j in 0..8 {
            let mut acc = 0.0;
            for i in 0..16 {
                acc += key.values()[j * 16 + i] * w.0[i];
            }
            assert!((z[j] - acc).abs() < 1e-9);
            assert_eq!(bits.as_slice()[j], u8::from(acc >= 0.0));
        }
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let key = KeyMatrix::generate(KeyFamily::Random, 2, 3, 0).unwrap();
        assert!(matches!(
            project(&key, &FlatMeanParams(vec![0.0; 4])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_logits_cost_t_ln2() {
        let key = KeyMatrix::generate(KeyFamily::Random, 7, 5, 1).unwrap();
        let w = FlatMeanParams(vec![0.0; 5]);
        for bits in [WatermarkBits::ones(7).unwrap(), WatermarkBits::random(7, 3).unwrap()] {
            let e = embedding_loss(&key, &w, &bits).unwrap();
            assert!((e - 7.0 * std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_loss_and_gradient() {
        let key = KeyMatrix::from_values(KeyFamily::Random, 1, 1, 0, vec![2.0]).unwrap();
        let w = FlatMeanParams(vec![1.0]);
        let b = WatermarkBits::ones(1).unwrap();
        let e = embedding_loss(&key, &w, &b).unwrap();
        assert!((e - 0.126928).abs() < 1e-6, "{e}");
        let g = embedding_loss_grad(&key, &w, &b).unwrap();
        assert!((g[0] - (-0.238406)).abs() < 1e-6, "{}", g[0]);
    }

    #[test]
    fn saturated_agreement_costs_almost_nothing() {
        let key = identity_key(3);
        let w = FlatMeanParams(vec![40.0, -35.0, 30.0]);
        let b = WatermarkBits::new(vec![1, 0, 1]).unwrap();
        assert!(embedding_loss(&key, &w, &b).unwrap() <= 3.0 * 1e-12);
        let g = embedding_loss_grad(&key, &w, &b).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let key = KeyMatrix::generate(KeyFamily::Random, 32, 64, 12).unwrap();
        let b = WatermarkBits::random(32, 13).unwrap();
        let w = FlatMeanParams(normal_vec(64, 14).iter().map(|v| 0.1 * v).collect());
        let g = embedding_loss_grad(&key, &w, &b).unwrap();
        let h = 1e-6;
        for i in 0..64 {
            let mut p = w.clone();
            let mut m = w.clone();
            p.0[i] += h;
            m.0[i] -= h;
            let num = (embedding_loss(&key, &p, &b).unwrap() - embedding_loss(&key, &m, &b).unwrap()) / (2.0 * h);
            assert!((num - g[i]).abs() <= 1e-5 * num.abs().max(g[i].abs()).max(1e-3), "{i}: {num} vs {}", g[i]);
        }
    }

    #[test]
    fn chained_gradient_spreads_over_filters() {
        let g = chain_to_weights(&[4.0, -8.0], 4);
        assert_eq!(g, vec![1.0, 1.0, 1.0, 1.0, -2.0, -2.0, -2.0, -2.0]);
    }

    #[test]
    fn ber_examples() {
        let a = WatermarkBits::new(vec![1, 0, 1]).unwrap();
        let b = WatermarkBits::new(vec![1, 1, 1]).unwrap();
        assert_eq!(bit_error_rate(&a, &a).unwrap(), 0.0);
        assert!((bit_error_rate(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(bit_error_rate(&a, &a.complement()).unwrap(), 1.0);
        assert!(bit_error_rate(&a, &WatermarkBits::ones(2).unwrap()).is_err());
    }

    #[test]
    fn zero_weights_report_is_flat_and_degenerate() {
        let key = KeyMatrix::generate(KeyFamily::Random, 16, 9, 2).unwrap();
        let r = detection_report(&key, &FlatMeanParams(vec![0.0; 9]), &WatermarkBits::ones(16).unwrap()).unwrap();
        assert!(r.activations.iter().all(|&y| y == 0.5));
        assert_eq!(r.near_half_fraction, 1.0);
        assert!(r.degenerate);
        assert_eq!(r.ber, 0.0);
        assert!(r.overdetermined);
    }

    #[test]
    fn bits_parse_and_print() {
        let b: WatermarkBits = "1011".parse().unwrap();
        assert_eq!(b.as_slice(), &[1, 0, 1, 1]);
        assert_eq!(b.to_string(), "1011");
        assert!("10a1".parse::<WatermarkBits>().is_err());
        assert!("".parse::<WatermarkBits>().is_err());
    }
}
