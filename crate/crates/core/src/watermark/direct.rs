use super::{
    bit_error_rate, embedding_loss, embedding_loss_grad, extract, mean_over_filters, ConvWeights,
    FlatMeanParams, KeyMatrix, WatermarkBits,
};
use crate::error::{Error, Result};
use crate::nn::HostModel;

/// Outcome of embedding by direct weight modification.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectEmbedReport {
    /// `0.5 * ||w - w0||^2` on the final (stored) weights.
    pub proximity: f64,
    pub embedding_loss: f64,
    pub ber: f64,
    /// Gradient steps actually taken (fewer than requested if the gradient vanished).
    pub steps: usize,
}

fn objective(key: &KeyMatrix, bits: &WatermarkBits, w: &[f64], w0: &[f64], lambda: f64) -> Result<f64> {
    let prox = 0.5 * w.iter().zip(w0).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    if lambda == 0.0 {
        return Ok(prox);
    }
    Ok(prox + lambda * embedding_loss(key, &FlatMeanParams(w.to_vec()), bits)?)
}

/// Embeds `bits` into an already trained layer without any training data by
/// minimizing `0.5 * ||w - w0||^2 + lambda * E_R(w)` over the layer's weights.
///
/// Runs gradient descent on the full tensor `W` with Armijo backtracking,
/// starting each step from twice the last accepted step (capped at
/// `step_size`). The objective only sees `W` through its filter mean, so
/// every filter receives the same update and a step of size `eta` on `W`
/// moves `w` by `eta / L` along the negative `w`-gradient; the iteration is
/// carried out on `w` and written back as `W + (w - w0)` per filter.
pub fn direct_embed(
    model: &HostModel,
    layer: &str,
    key: &KeyMatrix,
    bits: &WatermarkBits,
    lambda: f64,
    steps: usize,
    step_size: f64,
) -> Result<(HostModel, DirectEmbedReport)> {
    if !(lambda >= 0.0 && lambda.is_finite()) || !(step_size > 0.0 && step_size.is_finite()) {
        return Err(Error::config("direct embedding needs lambda >= 0 and step size > 0"));
    }
    let target = model.resolve_conv(layer)?;
    let name = target.name.clone();
    let weights = ConvWeights::from_layer(target)?;
    let filters = weights.filters();
    let w0 = mean_over_filters(&weights).0;
    if key.dim() != w0.len() || key.bits() != bits.len() {
        return Err(Error::config(format!(
            "key is {} x {} but layer {name:?} has M = {} and the payload {} bits",
            key.bits(),
            key.dim(),
            w0.len(),
            bits.len()
        )));
    }

    let mut w = w0.clone();
    let mut current = objective(key, bits, &w, &w0, lambda)?;
    let mut eta = step_size;
    let mut taken = 0;
    for _ in 0..steps {
        let mut grad_w: Vec<f64> = w.iter().zip(&w0).map(|(a, b)| a - b).collect();
        if lambda != 0.0 {
            let g = embedding_loss_grad(key, &FlatMeanParams(w.clone()), bits)?;
            grad_w.iter_mut().zip(&g).for_each(|(a, b)| *a += lambda * b);
        }
        // ||dE/dW||^2 = ||dE/dw||^2 / L
        let grad_sq = grad_w.iter().map(|g| g * g).sum::<f64>() / filters as f64;
        if grad_sq == 0.0 {
            break;
        }
        if !grad_sq.is_finite() {
            return Err(Error::numeric(&name, "non-finite gradient in direct embedding"));
        }
        eta = (2.0 * eta).min(step_size);
        loop {
            let trial: Vec<f64> = w
                .iter()
                .zip(&grad_w)
                .map(|(v, g)| v - eta / filters as f64 * g)
                .collect();
            let value = objective(key, bits, &trial, &w0, lambda)?;
            if value <= current - 1e-4 * eta * grad_sq {
                w = trial;
                current = value;
                break;
            }
            eta *= 0.5;
            if eta < 1e-300 {
                break;
            }
        }
        if eta < 1e-300 {
            break;
        }
        taken += 1;
    }
    if !current.is_finite() {
        return Err(Error::numeric(&name, "direct embedding diverged"));
    }

    let mut out = model.clone();
    let dst = out.layer_mut(&name).expect("layer resolved above");
    for (m, chunk) in dst.weights.chunks_exact_mut(filters).enumerate() {
        let delta = w[m] - w0[m];
        if delta != 0.0 {
            chunk.iter_mut().for_each(|v| *v = (*v as f64 + delta) as f32);
        }
    }
    let dst = out.layer(&name).unwrap();
    let final_w = mean_over_filters(&ConvWeights::from_layer(dst)?);
    let report = DirectEmbedReport {
        proximity: 0.5 * final_w.0.iter().zip(&w0).map(|(a, b)| (a - b).powi(2)).sum::<f64>(),
        embedding_loss: embedding_loss(key, &final_w, bits)?,
        ber: bit_error_rate(&extract(key, &final_w)?, bits)?,
        steps: taken,
    };
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::CnnConfig;
    use crate::watermark::KeyFamily;

    #[test]
    fn zero_lambda_leaves_model_untouched() {
        let model = CnnConfig::default().build(4).unwrap();
        let key = KeyMatrix::generate(KeyFamily::Random, 32, 144, 1).unwrap();
        let bits = WatermarkBits::ones(32).unwrap();
        let w0 = mean_over_filters(&ConvWeights::from_layer(model.layer("conv3_1").unwrap()).unwrap());
        let (out, report) = direct_embed(&model, "conv3", &key, &bits, 0.0, 50, 1.0).unwrap();
        assert_eq!(out, model);
        assert_eq!(report.proximity, 0.0);
        assert_eq!(report.embedding_loss, embedding_loss(&key, &w0, &bits).unwrap());
    }

    #[test]
    fn larger_lambda_moves_further_and_lowers_ber() {
        let model = CnnConfig::default().build(4).unwrap();
        let key = KeyMatrix::generate(KeyFamily::Random, 64, 576, 2).unwrap();
        let bits = WatermarkBits::ones(64).unwrap();
        let mut last_prox = -1.0;
        let mut last_ber = 1.0;
        for lambda in [0.0, 1.0, 10.0, 100.0] {
            let (_, r) = direct_embed(&model, "conv4", &key, &bits, lambda, 300, 1.0).unwrap();
            assert!(r.proximity >= last_prox, "lambda {lambda}: {r:?}");
            assert!(r.ber <= last_ber, "lambda {lambda}: {r:?}");
            last_prox = r.proximity;
            last_ber = r.ber;
        }
        assert_eq!(last_ber, 0.0);
    }

    #[test]
    fn rejects_mismatched_key() {
        let model = CnnConfig::default().build(4).unwrap();
        let key = KeyMatrix::generate(KeyFamily::Random, 8, 10, 2).unwrap();
        let bits = WatermarkBits::ones(8).unwrap();
        assert!(direct_embed(&model, "conv4", &key, &bits, 1.0, 10, 1.0).is_err());
    }
}
