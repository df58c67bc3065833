//! Forward and reverse passes for a fixed layer set: dense, 2-D
//! convolution, ReLU, 2x2 max-pool, flatten.
//!
//! A forward pass records every intermediate activation; the backward pass
//! replays the layers in reverse, producing the gradient of the mean
//! cross-entropy loss with respect to the input and to every parameter.
//! All passes are pure functions of (params, input), so concurrent
//! evaluation over disjoint batches needs no coordination.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    /// Affine layer; input dimension is inferred from the incoming shape.
    Dense { out_dim: usize },
    Conv2d {
        kh: usize,
        kw: usize,
        out_ch: usize,
        stride: usize,
        padding: Padding,
    },
    Relu,
    /// 2x2 max-pool with stride 2; odd trailing rows/cols are dropped.
    MaxPool2,
    Flatten,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDef {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerDef {
    pub fn new(name: &str, kind: LayerKind) -> Self {
        LayerDef {
            name: name.to_string(),
            kind,
        }
    }
}

/// Ordered named parameter tensors (the model's theta).
#[derive(Debug, Clone, PartialEq)]
pub struct Params(pub Vec<(String, Tensor)>);

impl Params {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|(_, t)| t.all_finite())
    }
}

/// Per-layer shape bookkeeping: per-example shapes on either side of the layer.
#[derive(Debug, Clone)]
pub struct LayerPlan {
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    pad_top: usize,
    pad_left: usize,
}

fn shape_err(layer: &str, expected: &str, got: &[usize]) -> Error {
    Error::ShapeMismatch {
        layer: layer.to_string(),
        expected: expected.to_string(),
        got: format!("{:?}", got),
    }
}

/// Chains per-example shapes through the layer list, checking consistency.
pub fn plan_shapes(layers: &[LayerDef], input_shape: &[usize]) -> Result<Vec<LayerPlan>> {
    let mut shape = input_shape.to_vec();
    let mut plans = Vec::with_capacity(layers.len());
    for layer in layers {
        let in_shape = shape.clone();
        let (out_shape, pad_top, pad_left) = match &layer.kind {
            LayerKind::Dense { out_dim } => {
                if shape.len() != 1 {
                    return Err(shape_err(&layer.name, "[features]", &shape));
                }
                (vec![*out_dim], 0, 0)
            }
            LayerKind::Conv2d {
                kh,
                kw,
                out_ch,
                stride,
                padding,
            } => {
                if shape.len() != 3 {
                    return Err(shape_err(&layer.name, "[H, W, C]", &shape));
                }
                let (h, w) = (shape[0], shape[1]);
                if *stride == 0 {
                    return Err(Error::Config(format!(
                        "layer `{}`: stride must be >= 1",
                        layer.name
                    )));
                }
                match padding {
                    Padding::Valid => {
                        if h < *kh || w < *kw {
                            return Err(shape_err(&layer.name, "input >= kernel", &shape));
                        }
                        let ho = (h - kh) / stride + 1;
                        let wo = (w - kw) / stride + 1;
                        (vec![ho, wo, *out_ch], 0, 0)
                    }
                    Padding::Same => {
                        let ho = h.div_ceil(*stride);
                        let wo = w.div_ceil(*stride);
                        let pad_h = ((ho - 1) * stride + kh).saturating_sub(h);
                        let pad_w = ((wo - 1) * stride + kw).saturating_sub(w);
                        (vec![ho, wo, *out_ch], pad_h / 2, pad_w / 2)
                    }
                }
            }
            LayerKind::Relu => (shape.clone(), 0, 0),
            LayerKind::MaxPool2 => {
                if shape.len() != 3 {
                    return Err(shape_err(&layer.name, "[H, W, C]", &shape));
                }
                if shape[0] < 2 || shape[1] < 2 {
                    return Err(shape_err(&layer.name, "H >= 2 and W >= 2", &shape));
                }
                (vec![shape[0] / 2, shape[1] / 2, shape[2]], 0, 0)
            }
            LayerKind::Flatten => (vec![shape.iter().product()], 0, 0),
        };
        shape = out_shape.clone();
        plans.push(LayerPlan {
            in_shape,
            out_shape,
            pad_top,
            pad_left,
        });
    }
    Ok(plans)
}

/// Expected parameter tensors (name, shape) for a layer list.
pub fn param_shapes(layers: &[LayerDef], input_shape: &[usize]) -> Result<Vec<(String, Vec<usize>)>> {
    let plans = plan_shapes(layers, input_shape)?;
    let mut out = Vec::new();
    for (layer, plan) in layers.iter().zip(&plans) {
        match &layer.kind {
            LayerKind::Dense { out_dim } => {
                out.push((format!("{}.w", layer.name), vec![plan.in_shape[0], *out_dim]));
                out.push((format!("{}.b", layer.name), vec![*out_dim]));
            }
            LayerKind::Conv2d { kh, kw, out_ch, .. } => {
                let in_ch = plan.in_shape[2];
                out.push((format!("{}.w", layer.name), vec![*kh, *kw, in_ch, *out_ch]));
                out.push((format!("{}.b", layer.name), vec![*out_ch]));
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Recorded forward pass: `activations[0]` is the input, `activations[i+1]`
/// the output of layer `i`. Replaying it back-to-front visits each layer once.
pub struct Trace {
    pub activations: Vec<Tensor>,
    plans: Vec<LayerPlan>,
}

impl Trace {
    pub fn logits(&self) -> &Tensor {
        self.activations.last().expect("trace has activations")
    }
}

fn layer_param<'a>(params: &'a Params, layer: &str, which: &str) -> Result<&'a Tensor> {
    params
        .get(&format!("{layer}.{which}"))
        .ok_or_else(|| Error::Config(format!("missing parameter `{layer}.{which}`")))
}

pub fn forward_trace(layers: &[LayerDef], params: &Params, x: &Tensor) -> Result<Trace> {
    if x.shape.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "input must be batched (rank >= 2), got shape {:?}",
            x.shape
        )));
    }
    let plans = plan_shapes(layers, &x.shape[1..])?;
    let batch = x.batch_size();
    let mut activations = Vec::with_capacity(layers.len() + 1);
    activations.push(x.clone());
    for (layer, plan) in layers.iter().zip(&plans) {
        let input = activations.last().unwrap();
        let output = match &layer.kind {
            LayerKind::Dense { .. } => {
                let w = layer_param(params, &layer.name, "w")?;
                let b = layer_param(params, &layer.name, "b")?;
                dense_forward(input, w, b, batch)
            }
            LayerKind::Conv2d { kh, kw, out_ch, stride, .. } => {
                let w = layer_param(params, &layer.name, "w")?;
                let b = layer_param(params, &layer.name, "b")?;
                conv_forward(input, w, b, plan, *kh, *kw, *out_ch, *stride, batch)
            }
            LayerKind::Relu => input.map(|v| if v > 0.0 { v } else { 0.0 }),
            LayerKind::MaxPool2 => maxpool_forward(input, plan, batch),
            LayerKind::Flatten => {
                let mut shape = vec![batch];
                shape.extend_from_slice(&plan.out_shape);
                input.clone().reshaped(shape)?
            }
        };
        activations.push(output);
    }
    Ok(Trace { activations, plans })
}

/// Gradients produced by a backward pass.
pub struct Gradients {
    pub input: Tensor,
    pub params: Vec<(String, Tensor)>,
}

/// Backpropagates `d_logits` through the trace.
pub fn backward(
    layers: &[LayerDef],
    params: &Params,
    trace: &Trace,
    d_logits: &Tensor,
) -> Result<Gradients> {
    let batch = trace.activations[0].batch_size();
    let mut grad = d_logits.clone();
    let mut param_grads: Vec<(String, Tensor)> = Vec::new();
    for (i, layer) in layers.iter().enumerate().rev() {
        let input = &trace.activations[i];
        let plan = &trace.plans[i];
        grad = match &layer.kind {
            LayerKind::Dense { .. } => {
                let w = layer_param(params, &layer.name, "w")?;
                let (dx, dw, db) = dense_backward(input, w, &grad, batch);
                param_grads.push((format!("{}.b", layer.name), db));
                param_grads.push((format!("{}.w", layer.name), dw));
                dx
            }
            LayerKind::Conv2d { kh, kw, out_ch, stride, .. } => {
                let w = layer_param(params, &layer.name, "w")?;
                let (dx, dw, db) =
                    conv_backward(input, w, &grad, plan, *kh, *kw, *out_ch, *stride, batch);
                param_grads.push((format!("{}.b", layer.name), db));
                param_grads.push((format!("{}.w", layer.name), dw));
                dx
            }
            LayerKind::Relu => {
                let mut dx = grad;
                for (d, &v) in dx.values.iter_mut().zip(&input.values) {
                    if v <= 0.0 {
                        *d = 0.0; // subgradient at 0 is 0
                    }
                }
                dx
            }
            LayerKind::MaxPool2 => maxpool_backward(input, &grad, plan, batch),
            LayerKind::Flatten => {
                let mut shape = vec![batch];
                shape.extend_from_slice(&plan.in_shape);
                grad.reshaped(shape)?
            }
        };
    }
    param_grads.reverse();
    Ok(Gradients {
        input: grad,
        params: param_grads,
    })
}

fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor, batch: usize) -> Tensor {
    let d = w.shape[0];
    let o = w.shape[1];
    let mut out = Tensor::zeros(vec![batch, o]);
    for bi in 0..batch {
        let xr = &x.values[bi * d..(bi + 1) * d];
        let or = &mut out.values[bi * o..(bi + 1) * o];
        or.copy_from_slice(&b.values);
        for (di, &xv) in xr.iter().enumerate() {
            let wr = &w.values[di * o..(di + 1) * o];
            for (ov, &wv) in or.iter_mut().zip(wr) {
                *ov += xv * wv;
            }
        }
    }
    out
}

fn dense_backward(x: &Tensor, w: &Tensor, dout: &Tensor, batch: usize) -> (Tensor, Tensor, Tensor) {
    let d = w.shape[0];
    let o = w.shape[1];
    let mut dx = Tensor::zeros(vec![batch, d]);
    let mut dw = Tensor::zeros(vec![d, o]);
    let mut db = Tensor::zeros(vec![o]);
    for bi in 0..batch {
        let xr = &x.values[bi * d..(bi + 1) * d];
        let dr = &dout.values[bi * o..(bi + 1) * o];
        for (dbv, &dv) in db.values.iter_mut().zip(dr) {
            *dbv += dv;
        }
        for di in 0..d {
            let wr = &w.values[di * o..(di + 1) * o];
            let mut acc = 0.0;
            for (j, &dv) in dr.iter().enumerate() {
                acc += wr[j] * dv;
                dw.values[di * o + j] += xr[di] * dv;
            }
            dx.values[bi * d + di] = acc;
        }
    }
    (dx, dw, db)
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    plan: &LayerPlan,
    kh: usize,
    kw: usize,
    out_ch: usize,
    stride: usize,
    batch: usize,
) -> Tensor {
    let (h, wd, in_ch) = (plan.in_shape[0], plan.in_shape[1], plan.in_shape[2]);
    let (ho, wo) = (plan.out_shape[0], plan.out_shape[1]);
    let mut out = Tensor::zeros(vec![batch, ho, wo, out_ch]);
    for bi in 0..batch {
        let xs = x.example(bi);
        let os = out.example_mut(bi);
        for oy in 0..ho {
            for ox in 0..wo {
                let base = (oy * wo + ox) * out_ch;
                os[base..base + out_ch].copy_from_slice(&b.values);
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - plan.pad_top as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - plan.pad_left as isize;
                        if ix < 0 || ix as usize >= wd {
                            continue;
                        }
                        let xi = ((iy as usize) * wd + ix as usize) * in_ch;
                        let wi = ((ky * kw + kx) * in_ch) * out_ch;
                        for ic in 0..in_ch {
                            let xv = xs[xi + ic];
                            let wr = &w.values[wi + ic * out_ch..wi + (ic + 1) * out_ch];
                            for (ov, &wv) in os[base..base + out_ch].iter_mut().zip(wr) {
                                *ov += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &Tensor,
    w: &Tensor,
    dout: &Tensor,
    plan: &LayerPlan,
    kh: usize,
    kw: usize,
    out_ch: usize,
    stride: usize,
    batch: usize,
) -> (Tensor, Tensor, Tensor) {
    let (h, wd, in_ch) = (plan.in_shape[0], plan.in_shape[1], plan.in_shape[2]);
    let (ho, wo) = (plan.out_shape[0], plan.out_shape[1]);
    let mut dx = Tensor::zeros(vec![batch, h, wd, in_ch]);
    let mut dw = Tensor::zeros(w.shape.clone());
    let mut db = Tensor::zeros(vec![out_ch]);
    for bi in 0..batch {
        let xs = x.example(bi);
        let ds = dout.example(bi);
        let dxs = dx.example_mut(bi);
        for oy in 0..ho {
            for ox in 0..wo {
                let base = (oy * wo + ox) * out_ch;
                let dr = &ds[base..base + out_ch];
                for (dbv, &dv) in db.values.iter_mut().zip(dr) {
                    *dbv += dv;
                }
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - plan.pad_top as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - plan.pad_left as isize;
                        if ix < 0 || ix as usize >= wd {
                            continue;
                        }
                        let xi = ((iy as usize) * wd + ix as usize) * in_ch;
                        let wi = ((ky * kw + kx) * in_ch) * out_ch;
                        for ic in 0..in_ch {
                            let xv = xs[xi + ic];
                            let mut acc = 0.0;
                            for (oc, &dv) in dr.iter().enumerate() {
                                dw.values[wi + ic * out_ch + oc] += xv * dv;
                                acc += w.values[wi + ic * out_ch + oc] * dv;
                            }
                            dxs[xi + ic] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

fn maxpool_forward(x: &Tensor, plan: &LayerPlan, batch: usize) -> Tensor {
    let (_, wd, c) = (plan.in_shape[0], plan.in_shape[1], plan.in_shape[2]);
    let (ho, wo) = (plan.out_shape[0], plan.out_shape[1]);
    let mut out = Tensor::zeros(vec![batch, ho, wo, c]);
    for bi in 0..batch {
        let xs = x.example(bi);
        let os = out.example_mut(bi);
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    os[(oy * wo + ox) * c + ch] = pool_window_max(xs, wd, c, oy, ox, ch).0;
                }
            }
        }
    }
    out
}

/// Max over the 2x2 window, ties resolved to the first element in
/// row-major order so the backward routing is deterministic.
fn pool_window_max(xs: &[f64], wd: usize, c: usize, oy: usize, ox: usize, ch: usize) -> (f64, usize) {
    let mut best = f64::NEG_INFINITY;
    let mut best_idx = 0;
    for dy in 0..2 {
        for dx in 0..2 {
            let idx = ((oy * 2 + dy) * wd + (ox * 2 + dx)) * c + ch;
            if xs[idx] > best {
                best = xs[idx];
                best_idx = idx;
            }
        }
    }
    (best, best_idx)
}

fn maxpool_backward(x: &Tensor, dout: &Tensor, plan: &LayerPlan, batch: usize) -> Tensor {
    let (h, wd, c) = (plan.in_shape[0], plan.in_shape[1], plan.in_shape[2]);
    let (ho, wo) = (plan.out_shape[0], plan.out_shape[1]);
    let mut dx = Tensor::zeros(vec![batch, h, wd, c]);
    for bi in 0..batch {
        let xs = x.example(bi);
        let ds = dout.example(bi);
        let dxs = dx.example_mut(bi);
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let (_, idx) = pool_window_max(xs, wd, c, oy, ox, ch);
                    dxs[idx] += ds[(oy * wo + ox) * c + ch];
                }
            }
        }
    }
    dx
}

/// Per-example cross-entropy losses and their mean, computed with
/// max-subtraction so large logits do not overflow.
pub fn loss_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(Tensor, f64)> {
    let batch = logits.batch_size();
    let k = logits.example_len();
    if labels.len() != batch {
        return Err(Error::InvalidInput(format!(
            "{} labels for a batch of {}",
            labels.len(),
            batch
        )));
    }
    let mut losses = Tensor::zeros(vec![batch]);
    for (bi, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::InvalidInput(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        let row = logits.example(bi);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        losses.values[bi] = lse - row[label];
    }
    let mean = losses.values.iter().sum::<f64>() / batch as f64;
    Ok((losses, mean))
}

/// Seed gradient of the mean cross-entropy loss: (softmax - onehot) / batch.
/// Fusing softmax with the loss keeps the backward pass stable.
pub fn loss_backward(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let batch = logits.batch_size();
    let k = logits.example_len();
    let mut d = Tensor::zeros(vec![batch, k]);
    for (bi, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::InvalidInput(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        let row = logits.example(bi);
        let probs = softmax(row);
        let dr = d.example_mut(bi);
        for (j, p) in probs.iter().enumerate() {
            dr[j] = (p - if j == label { 1.0 } else { 0.0 }) / batch as f64;
        }
    }
    Ok(d)
}

/// Like [`loss_backward`] but without the 1/batch factor: each example's
/// seed is the gradient of its own loss. Attacks use this so that a batched
/// run is bit-identical to attacking each example alone.
pub fn loss_backward_per_example(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let batch = logits.batch_size();
    let k = logits.example_len();
    let mut d = Tensor::zeros(vec![batch, k]);
    for (bi, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::InvalidInput(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        let probs = softmax(logits.example(bi));
        let dr = d.example_mut(bi);
        for (j, p) in probs.iter().enumerate() {
            dr[j] = p - if j == label { 1.0 } else { 0.0 };
        }
    }
    Ok(d)
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Central finite differences, (f(x + h e_i) - f(x - h e_i)) / 2h per element.
/// This is the independent oracle the gradient tests check against; it never
/// touches the backward pass.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut grad = Tensor::zeros(x.shape.clone());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.values[i];
        probe.values[i] = orig + h;
        let up = f(&probe);
        probe.values[i] = orig - h;
        let down = f(&probe);
        probe.values[i] = orig;
        grad.values[i] = (up - down) / (2.0 * h);
    }
    grad
}
