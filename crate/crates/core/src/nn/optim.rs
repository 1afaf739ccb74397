use super::engine::Gradients;
use super::model::HostModel;
use super::train::TrainConfig;
use crate::error::{Error, Result};

/// Momentum buffers, one per parameter tensor, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(model: &HostModel) -> Self {
        OptimizerState {
            weights: model.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: model.layers.iter().map(|l| vec![0.0; l.biases.len()]).collect(),
        }
    }

    fn matches(&self, model: &HostModel) -> bool {
        self.weights.len() == model.layers.len()
            && model.layers.iter().enumerate().all(|(i, l)| {
                self.weights[i].len() == l.weights.len() && self.biases[i].len() == l.biases.len()
            })
    }
}

/// Nesterov momentum on one tensor:
/// `g += wd * w; v = mu * v - lr * g; w += mu * v - lr * g`.
/// Returns `false` if any updated value is non-finite (the tensor is then
/// partially updated and should be discarded).
pub fn nesterov_update(
    params: &mut [f32],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> bool {
    let mut finite = true;
    for ((w, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let wf = *w as f64;
        let g = g + weight_decay * wf;
        *v = momentum * *v - lr * g;
        let next = wf + momentum * *v - lr * g;
        finite &= next.is_finite() && (next as f32).is_finite();
        *w = next as f32;
    }
    finite
}

/// One optimizer step over the whole model. Weight decay covers conv and
/// dense weights only, never biases.
pub fn sgd_nesterov_step(
    model: &mut HostModel,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.layers.len() != model.layers.len() || !state.matches(model) {
        return Err(Error::config("gradient or optimizer state does not match the model"));
    }
    for (i, layer) in model.layers.iter_mut().enumerate() {
        if !layer.spec.has_params() {
            continue;
        }
        let g = &grads.layers[i];
        if g.weights.len() != layer.weights.len() || g.biases.len() != layer.biases.len() {
            return Err(Error::config(format!("gradient shape mismatch in {:?}", layer.name)));
        }
        let ok_w = nesterov_update(&mut layer.weights, &g.weights, &mut state.weights[i], lr, momentum, weight_decay);
        let ok_b = nesterov_update(&mut layer.biases, &g.biases, &mut state.biases[i], lr, momentum, 0.0);
        if !(ok_w && ok_b) {
            return Err(Error::numeric(&layer.name, "non-finite parameter after update"));
        }
    }
    Ok(())
}

/// `lr_initial * lr_drop_factor ^ (number of drop epochs <= epoch)`.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    let drops = config.lr_drop_epochs.iter().filter(|&&d| d <= epoch).count();
    config.lr_initial * config.lr_drop_factor.powi(drops as i32)
}
