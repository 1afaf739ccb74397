//! Batched forward and backward passes.
//!
//! Activations are `f64` laid out as `(batch, channels, height, width)`.
//! Parameters live in the model as `f32` and are widened once per pass.
//! Convolutions use im2col followed by a single GEMM over the whole batch.

use super::layer::{LayerSpec, Shape};
use super::loss::{cross_entropy_loss, soft_target_loss};
use super::model::HostModel;
use crate::error::{Error, Result};

/// Supervision for one batch.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    /// Hard class labels, one per sample.
    Labels(&'a [usize]),
    /// Row-major `(batch, classes)` probability rows.
    Soft(&'a [f64]),
}

impl Targets<'_> {
    fn slice(&self, start: usize, end: usize, classes: usize) -> Targets<'_> {
        match *self {
            Targets::Labels(l) => Targets::Labels(&l[start..end]),
            Targets::Soft(p) => Targets::Soft(&p[start * classes..end * classes]),
        }
    }
}

/// Gradient of the loss with respect to one layer's parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Per-layer parameter gradients, index-aligned with `HostModel::layers`.
/// Parameterless layers carry empty vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(model: &HostModel) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    biases: vec![0.0; l.biases.len()],
                })
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.biases.iter_mut().zip(&b.biases).for_each(|(x, y)| *x += y);
        }
    }

    fn scale(&mut self, s: f64) {
        for g in &mut self.layers {
            g.weights.iter_mut().for_each(|x| *x *= s);
            g.biases.iter_mut().for_each(|x| *x *= s);
        }
    }
}

enum Aux {
    None,
    Cols(Vec<f64>),
    Argmax(Vec<u32>),
}

struct Trace {
    batch: usize,
    shapes: Vec<Shape>,
    acts: Vec<Vec<f64>>,
    aux: Vec<Aux>,
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// `c = a * b + beta * c` for an `m x k` by `k x n` product with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, cs: usize, rows: usize, cols: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * r + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= last(rsa, csa, m, k));
    assert!(b.len() >= last(rsb, csb, k, n));
    assert!(c.len() >= last(rsc, csc, m, n));
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Rows of `cols` are indexed by `(i * size + j) * depth + k`, matching the
/// flattening of conv weights; columns by `b * plane + y * width + x`.
fn im2col(input: &[f64], batch: usize, shape: Shape, size: usize, cols: &mut [f64]) {
    let (d, h, w) = (shape.channels, shape.height, shape.width);
    let plane = h * w;
    let bp = batch * plane;
    let pad = (size / 2) as isize;
    for i in 0..size {
        for j in 0..size {
            let dy = i as isize - pad;
            let dx = j as isize - pad;
            for k in 0..d {
                let m = (i * size + j) * d + k;
                let row = &mut cols[m * bp..(m + 1) * bp];
                for b in 0..batch {
                    let src = &input[(b * d + k) * plane..(b * d + k + 1) * plane];
                    for y in 0..h {
                        let dst = &mut row[b * plane + y * w..b * plane + (y + 1) * w];
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                        for (x, out) in dst.iter_mut().enumerate() {
                            let sx = x as isize + dx;
                            *out = if sx < 0 || sx >= w as isize {
                                0.0
                            } else {
                                srow[sx as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], batch: usize, shape: Shape, size: usize, out: &mut [f64]) {
    let (d, h, w) = (shape.channels, shape.height, shape.width);
    let plane = h * w;
    let bp = batch * plane;
    let pad = (size / 2) as isize;
    for i in 0..size {
        for j in 0..size {
            let dy = i as isize - pad;
            let dx = j as isize - pad;
            for k in 0..d {
                let m = (i * size + j) * d + k;
                let row = &cols[m * bp..(m + 1) * bp];
                for b in 0..batch {
                    let dst = &mut out[(b * d + k) * plane..(b * d + k + 1) * plane];
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &row[b * plane + y * w..b * plane + (y + 1) * w];
                        for (x, &g) in src.iter().enumerate() {
                            let sx = x as isize + dx;
                            if sx >= 0 && sx < w as isize {
                                dst[sy as usize * w + sx as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_input(model: &HostModel, inputs: &[f64], batch: usize) -> Result<Vec<Shape>> {
    let shapes = model.shapes()?;
    if batch == 0 || inputs.len() != batch * model.input_shape.len() {
        return Err(Error::config(format!(
            "batch of {} values does not match {batch} samples of shape {}",
            inputs.len(),
            model.input_shape
        )));
    }
    Ok(shapes)
}

fn run_forward(model: &HostModel, inputs: &[f64], batch: usize, keep: bool) -> Result<Trace> {
    let shapes = check_input(model, inputs, batch)?;
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(model.layers.len() + 1);
    let mut aux = Vec::with_capacity(model.layers.len());
    acts.push(inputs.to_vec());
    for (idx, layer) in model.layers.iter().enumerate() {
        let input = &acts[idx];
        let (ins, outs) = (shapes[idx], shapes[idx + 1]);
        let mut out = vec![0.0; batch * outs.len()];
        let mut extra = Aux::None;
        match layer.spec {
            LayerSpec::Conv2d { size, filters, .. } => {
                let m = layer.spec.weight_len() / filters;
                let plane = ins.plane();
                let bp = batch * plane;
                let mut cols = vec![0.0; m * bp];
                im2col(input, batch, ins, size, &mut cols);
                let w = widen(&layer.weights);
                let mut tmp = vec![0.0; filters * bp];
                gemm(filters, m, bp, &w, (1, filters), &cols, (bp, 1), 0.0, &mut tmp, (bp, 1));
                for l in 0..filters {
                    let bias = layer.biases[l] as f64;
                    for b in 0..batch {
                        let src = &tmp[l * bp + b * plane..l * bp + (b + 1) * plane];
                        let dst = &mut out[(b * filters + l) * plane..(b * filters + l + 1) * plane];
                        dst.iter_mut().zip(src).for_each(|(o, &s)| *o = s + bias);
                    }
                }
                if keep {
                    extra = Aux::Cols(cols);
                }
            }
            LayerSpec::Dense { inputs: ni, outputs: no } => {
                let w = widen(&layer.weights);
                for b in 0..batch {
                    out[b * no..(b + 1) * no]
                        .iter_mut()
                        .zip(&layer.biases)
                        .for_each(|(o, &bias)| *o = bias as f64);
                }
                gemm(batch, ni, no, input, (ni, 1), &w, (no, 1), 1.0, &mut out, (no, 1));
            }
            LayerSpec::Relu => {
                out.iter_mut().zip(input).for_each(|(o, &x)| *o = x.max(0.0));
            }
            LayerSpec::MaxPool { size } => {
                let mut argmax = vec![0u32; out.len()];
                let (h, w) = (ins.height, ins.width);
                let (oh, ow) = (outs.height, outs.width);
                for bc in 0..batch * ins.channels {
                    let src = &input[bc * h * w..(bc + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_at = 0usize;
                            for py in 0..size {
                                for px in 0..size {
                                    let at = (oy * size + py) * w + ox * size + px;
                                    if src[at] > best {
                                        best = src[at];
                                        best_at = at;
                                    }
                                }
                            }
                            let o = bc * oh * ow + oy * ow + ox;
                            out[o] = best;
                            argmax[o] = best_at as u32;
                        }
                    }
                }
                if keep {
                    extra = Aux::Argmax(argmax);
                }
            }
            LayerSpec::GlobalAvgPool => {
                let plane = ins.plane();
                for (o, chunk) in out.iter_mut().zip(input.chunks_exact(plane)) {
                    *o = chunk.iter().sum::<f64>() / plane as f64;
                }
            }
            LayerSpec::Flatten => out.copy_from_slice(input),
            LayerSpec::ResidualAdd { source } => {
                let skip = &acts[source + 1];
                out.iter_mut()
                    .zip(input.iter().zip(skip))
                    .for_each(|(o, (&a, &s))| *o = a + s);
            }
        }
        acts.push(out);
        aux.push(extra);
    }
    Ok(Trace {
        batch,
        shapes,
        acts,
        aux,
    })
}

/// Logits of shape `(batch, num_classes)`, row-major.
pub fn forward(model: &HostModel, inputs: &[f64], batch: usize) -> Result<Vec<f64>> {
    let mut trace = run_forward(model, inputs, batch, false)?;
    Ok(trace.acts.pop().unwrap())
}

fn run_backward(model: &HostModel, trace: Trace, dlogits: Vec<f64>) -> Gradients {
    let Trace {
        batch,
        shapes,
        mut acts,
        mut aux,
    } = trace;
    let n = model.layers.len();
    let mut grads = Gradients::zeros_like(model);
    let mut dacts: Vec<Option<Vec<f64>>> = vec![None; n + 1];
    dacts[n] = Some(dlogits);
    let accumulate = |slot: &mut Option<Vec<f64>>, g: Vec<f64>| match slot {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    };
    for idx in (0..n).rev() {
        let output = acts.pop().unwrap();
        let Some(dout) = dacts[idx + 1].take() else {
            continue;
        };
        let layer = &model.layers[idx];
        let (ins, outs) = (shapes[idx], shapes[idx + 1]);
        let input = &acts[idx];
        let need_input_grad = idx > 0;
        let mut din = None;
        match layer.spec {
            LayerSpec::Conv2d { size, filters, .. } => {
                let Aux::Cols(cols) = std::mem::replace(&mut aux[idx], Aux::None) else {
                    unreachable!("conv trace without columns")
                };
                let m = layer.spec.weight_len() / filters;
                let plane = outs.plane();
                let bp = batch * plane;
                let mut dt = vec![0.0; filters * bp];
                for b in 0..batch {
                    for l in 0..filters {
                        dt[l * bp + b * plane..l * bp + (b + 1) * plane]
                            .copy_from_slice(&dout[(b * filters + l) * plane..(b * filters + l + 1) * plane]);
                    }
                }
                let g = &mut grads.layers[idx];
                for l in 0..filters {
                    g.biases[l] = dt[l * bp..(l + 1) * bp].iter().sum();
                }
                gemm(m, bp, filters, &cols, (bp, 1), &dt, (1, bp), 0.0, &mut g.weights, (filters, 1));
                if need_input_grad {
                    let w = widen(&layer.weights);
                    let mut dcols = vec![0.0; m * bp];
                    gemm(m, filters, bp, &w, (filters, 1), &dt, (bp, 1), 0.0, &mut dcols, (bp, 1));
                    let mut d = vec![0.0; batch * ins.len()];
                    col2im(&dcols, batch, ins, size, &mut d);
                    din = Some(d);
                }
            }
            LayerSpec::Dense { inputs: ni, outputs: no } => {
                let g = &mut grads.layers[idx];
                for b in 0..batch {
                    g.biases
                        .iter_mut()
                        .zip(&dout[b * no..(b + 1) * no])
                        .for_each(|(gb, &d)| *gb += d);
                }
                gemm(ni, batch, no, input, (1, ni), &dout, (no, 1), 0.0, &mut g.weights, (no, 1));
                if need_input_grad {
                    let w = widen(&layer.weights);
                    let mut d = vec![0.0; batch * ni];
                    gemm(batch, no, ni, &dout, (no, 1), &w, (1, no), 0.0, &mut d, (ni, 1));
                    din = Some(d);
                }
            }
            LayerSpec::Relu => {
                din = Some(
                    dout.iter()
                        .zip(&output)
                        .map(|(&g, &y)| if y > 0.0 { g } else { 0.0 })
                        .collect(),
                );
            }
            LayerSpec::MaxPool { .. } => {
                let Aux::Argmax(argmax) = std::mem::replace(&mut aux[idx], Aux::None) else {
                    unreachable!("pool trace without argmax")
                };
                let mut d = vec![0.0; batch * ins.len()];
                let (ip, op) = (ins.plane(), outs.plane());
                for bc in 0..batch * ins.channels {
                    for o in 0..op {
                        d[bc * ip + argmax[bc * op + o] as usize] += dout[bc * op + o];
                    }
                }
                din = Some(d);
            }
            LayerSpec::GlobalAvgPool => {
                let plane = ins.plane();
                let scale = 1.0 / plane as f64;
                din = Some(dout.iter().flat_map(|&g| std::iter::repeat_n(g * scale, plane)).collect());
            }
            LayerSpec::Flatten => din = Some(dout),
            LayerSpec::ResidualAdd { source } => {
                accumulate(&mut dacts[source + 1], dout.clone());
                din = Some(dout);
            }
        }
        if let Some(d) = din {
            if need_input_grad {
                accumulate(&mut dacts[idx], d);
            }
        }
    }
    grads
}

/// Mean loss over the batch and parameter gradients. Weight decay is not included.
pub fn backward(
    model: &HostModel,
    inputs: &[f64],
    batch: usize,
    targets: Targets<'_>,
) -> Result<(f64, Gradients)> {
    let trace = run_forward(model, inputs, batch, true)?;
    let logits = trace.acts.last().unwrap();
    let (loss, dlogits) = match targets {
        Targets::Labels(labels) => cross_entropy_loss(logits, model.num_classes, labels)?,
        Targets::Soft(probs) => soft_target_loss(logits, model.num_classes, probs)?,
    };
    Ok((loss, run_backward(model, trace, dlogits)))
}

/// Like [`backward`], optionally splitting the batch over `threads` workers.
///
/// With `threads <= 1` this is exactly [`backward`]. The split path sums
/// chunk results in a fixed order but its rounding differs from the
/// single-threaded path, so it carries no bitwise-reproducibility guarantee
/// relative to it.
pub fn backward_parallel(
    model: &HostModel,
    inputs: &[f64],
    batch: usize,
    targets: Targets<'_>,
    threads: usize,
) -> Result<(f64, Gradients)> {
    let workers = threads.min(batch);
    if workers <= 1 {
        return backward(model, inputs, batch, targets);
    }
    let per = batch.div_ceil(workers);
    let sample = model.input_shape.len();
    let classes = model.num_classes;
    let results: Vec<Result<(f64, Gradients, usize)>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..batch)
            .step_by(per)
            .map(|start| {
                let end = (start + per).min(batch);
                let chunk = &inputs[start * sample..end * sample];
                let t = targets.slice(start, end, classes);
                s.spawn(move || {
                    backward(model, chunk, end - start, t).map(|(l, g)| (l, g, end - start))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut total = Gradients::zeros_like(model);
    let mut loss = 0.0;
    for r in results {
        let (l, mut g, n) = r?;
        let w = n as f64 / batch as f64;
        g.scale(w);
        total.add_assign(&g);
        loss += l * w;
    }
    Ok((loss, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::Layer;
    use crate::rng::SplitMix64;

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut r = SplitMix64::new(seed);
        (0..n).map(|_| r.normal()).collect()
    }

    #[test]
    fn zero_conv_weights_give_zero_features() {
        let layers = vec![
            Layer::new("c", LayerSpec::Conv2d { size: 3, in_channels: 2, filters: 3 }),
            Layer::new("gap", LayerSpec::GlobalAvgPool),
        ];
        let model = HostModel::new(Shape::new(2, 5, 5), 3, layers).unwrap();
        let x = random_vec(2 * 50, 1);
        let out = forward(&model, &x, 2).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let mut fc = Layer::new("fc", LayerSpec::Dense { inputs: 4, outputs: 4 });
        for i in 0..4 {
            fc.weights[i * 4 + i] = 1.0;
        }
        let model = HostModel::new(Shape::new(4, 1, 1), 4, vec![fc]).unwrap();
        let v = vec![0.5, -1.25, 3.0, 0.0];
        assert_eq!(forward(&model, &v, 1).unwrap(), v);
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let model = HostModel::new(
            Shape::new(4, 1, 1),
            4,
            vec![Layer::new("fc", LayerSpec::Dense { inputs: 4, outputs: 4 })],
        )
        .unwrap();
        assert!(matches!(forward(&model, &[1.0; 5], 1), Err(Error::Config(_))));
    }

    #[test]
    fn max_pool_routes_gradient_to_first_maximum() {
        let layers = vec![
            Layer::new("pool", LayerSpec::MaxPool { size: 2 }),
            Layer::new("flat", LayerSpec::Flatten),
            Layer::new("fc", LayerSpec::Dense { inputs: 1, outputs: 2 }),
        ];
        let mut model = HostModel::new(Shape::new(1, 2, 2), 2, layers).unwrap();
        model.layers[2].weights = vec![1.0, -1.0];
        let x = [1.0, 3.0, 3.0, 2.0];
        let logits = forward(&model, &x, 1).unwrap();
        assert_eq!(logits, vec![3.0, -3.0]);
    }

    #[test]
    fn parallel_matches_serial_closely() {
        let model = crate::nn::CnnConfig::default().build(3).unwrap();
        let batch = 6;
        let x = random_vec(batch * model.input_shape.len(), 2);
        let labels = [0, 1, 2, 3, 0, 1];
        let (l1, g1) = backward(&model, &x, batch, Targets::Labels(&labels)).unwrap();
        let (l2, g2) = backward_parallel(&model, &x, batch, Targets::Labels(&labels), 3).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.layers.iter().zip(&g2.layers) {
            for (x, y) in a.weights.iter().zip(&b.weights) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
