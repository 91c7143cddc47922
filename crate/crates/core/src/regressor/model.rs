//! The dual-branch box regressor: forward pass, Huber loss and exact
//! backpropagation.
//!
//! ```text
//! z_v = relu(W_v x_v + b_v)        z_t = relu(W_t x_t + b_t)
//! h1  = relu(W_1 [z_v; z_t] + b_1)
//! h2  = relu(W_2 h1 + b_2)
//! o   = sigmoid(W_o h2 + b_o)      box = (min(o0,o2), min(o1,o3), max(o0,o2), max(o1,o3))
//! ```
//!
//! Weights are stored input-major: `w[i * n_out + j]` connects input `i` to
//! output `j`, so a layer with `n_in x n_out` weights maps `n_in -> n_out`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::NormBox;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub n_in: usize,
    pub n_out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Linear {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            w: vec![0.0; n_in * n_out],
            b: vec![0.0; n_out],
        }
    }

    /// Uniform weights in `[-limit, limit]`, zero biases.
    pub fn uniform<R: Rng>(n_in: usize, n_out: usize, limit: f64, rng: &mut R) -> Self {
        let mut l = Self::zeros(n_in, n_out);
        for w in &mut l.w {
            *w = rng.random_range(-limit..=limit);
        }
        l
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.b);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.w[i * self.n_out..(i + 1) * self.n_out];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
    }

    /// Accumulates weight/bias gradients for upstream gradient `dy` at input
    /// `x`, and writes the gradient with respect to `x` into `dx`.
    fn backprop(&self, x: &[f64], dy: &[f64], grad: &mut Linear, dx: Option<&mut Vec<f64>>) {
        for (gb, &d) in grad.b.iter_mut().zip(dy) {
            *gb += d;
        }
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &mut grad.w[i * self.n_out..(i + 1) * self.n_out];
            for (g, &d) in row.iter_mut().zip(dy) {
                *g += xi * d;
            }
        }
        if let Some(dx) = dx {
            dx.clear();
            dx.extend((0..self.n_in).map(|i| {
                let row = &self.w[i * self.n_out..(i + 1) * self.n_out];
                row.iter().zip(dy).map(|(w, d)| w * d).sum::<f64>()
            }));
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.w.iter().chain(self.b.iter())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w.iter_mut().chain(self.b.iter_mut())
    }
}

/// Layer sizes of a regressor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub visual: usize,
    pub text: usize,
    pub latent: usize,
    pub hidden: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressorParams {
    pub visual: Linear,
    pub text: Linear,
    pub fuse1: Linear,
    pub fuse2: Linear,
    pub head: Linear,
}

impl RegressorParams {
    pub fn zeros(d: Dims) -> Self {
        Self {
            visual: Linear::zeros(d.visual, d.latent),
            text: Linear::zeros(d.text, d.latent),
            fuse1: Linear::zeros(2 * d.latent, d.hidden),
            fuse2: Linear::zeros(d.hidden, d.hidden),
            head: Linear::zeros(d.hidden, 4),
        }
    }

    /// He-uniform for relu layers, Glorot-uniform for the sigmoid head,
    /// zero biases.
    pub fn init<R: Rng>(d: Dims, rng: &mut R) -> Self {
        let he = |n_in: usize| (6.0 / n_in as f64).sqrt();
        Self {
            visual: Linear::uniform(d.visual, d.latent, he(d.visual), rng),
            text: Linear::uniform(d.text, d.latent, he(d.text), rng),
            fuse1: Linear::uniform(2 * d.latent, d.hidden, he(2 * d.latent), rng),
            fuse2: Linear::uniform(d.hidden, d.hidden, he(d.hidden), rng),
            head: Linear::uniform(d.hidden, 4, (6.0 / (d.hidden + 4) as f64).sqrt(), rng),
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            visual: self.visual.n_in,
            text: self.text.n_in,
            latent: self.visual.n_out,
            hidden: self.fuse1.n_out,
        }
    }

    /// Layers in their serialization order.
    pub fn layers(&self) -> [&Linear; 5] {
        [&self.visual, &self.text, &self.fuse1, &self.fuse2, &self.head]
    }

    pub fn layers_mut(&mut self) -> [&mut Linear; 5] {
        [
            &mut self.visual,
            &mut self.text,
            &mut self.fuse1,
            &mut self.fuse2,
            &mut self.head,
        ]
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers().into_iter().flat_map(Linear::values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers_mut().into_iter().flat_map(Linear::values_mut)
    }

    pub fn len(&self) -> usize {
        self.layers().iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    fn check_inputs(&self, visual: usize, text: usize) -> Result<()> {
        let d = self.dims();
        if visual != d.visual || text != d.text {
            return Err(Error::config(format!(
                "embedding dims ({visual}, {text}) do not match regressor dims ({}, {})",
                d.visual, d.text
            )));
        }
        Ok(())
    }
}

fn relu_inplace(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Default)]
pub struct Trace {
    x_v: Vec<f64>,
    x_t: Vec<f64>,
    z_v: Vec<f64>,
    z_t: Vec<f64>,
    fused: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    /// Sigmoid outputs before reordering.
    pub raw: [f64; 4],
}

impl Trace {
    pub fn ordered(&self) -> [f64; 4] {
        let o = self.raw;
        [o[0].min(o[2]), o[1].min(o[3]), o[0].max(o[2]), o[1].max(o[3])]
    }

    pub fn bbox(&self) -> NormBox {
        let o = self.ordered();
        NormBox::from_unordered(o[0], o[1], o[2], o[3])
    }
}

fn run(params: &RegressorParams, visual: &[f32], text: &[f32], tr: &mut Trace) {
    tr.x_v.clear();
    tr.x_v.extend(visual.iter().map(|&v| v as f64));
    tr.x_t.clear();
    tr.x_t.extend(text.iter().map(|&v| v as f64));

    params.visual.apply(&tr.x_v, &mut tr.z_v);
    relu_inplace(&mut tr.z_v);
    params.text.apply(&tr.x_t, &mut tr.z_t);
    relu_inplace(&mut tr.z_t);

    tr.fused.clear();
    tr.fused.extend_from_slice(&tr.z_v);
    tr.fused.extend_from_slice(&tr.z_t);
    params.fuse1.apply(&tr.fused, &mut tr.h1);
    relu_inplace(&mut tr.h1);
    params.fuse2.apply(&tr.h1, &mut tr.h2);
    relu_inplace(&mut tr.h2);

    let mut out = Vec::with_capacity(4);
    params.head.apply(&tr.h2, &mut out);
    for (r, o) in tr.raw.iter_mut().zip(out) {
        *r = sigmoid(o);
    }
}

pub fn forward_trace(params: &RegressorParams, visual: &[f32], text: &[f32]) -> Result<Trace> {
    params.check_inputs(visual.len(), text.len())?;
    let mut tr = Trace::default();
    run(params, visual, text, &mut tr);
    Ok(tr)
}

pub fn forward(params: &RegressorParams, visual: &[f32], text: &[f32]) -> Result<NormBox> {
    Ok(forward_trace(params, visual, text)?.bbox())
}

/// Per-coordinate Huber value: quadratic below 1, linear otherwise.
pub fn huber(diff: f64) -> f64 {
    let a = diff.abs();
    if a < 1.0 {
        0.5 * diff * diff
    } else {
        a - 0.5
    }
}

fn huber_grad(diff: f64) -> f64 {
    if diff.abs() < 1.0 {
        diff
    } else {
        diff.signum()
    }
}

/// Mean Huber loss over the four coordinates.
pub fn huber_loss(pred: &[f64; 4], target: &[f64; 4]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| huber(p - t)).sum::<f64>() / 4.0
}

/// Adds the gradient of `huber_loss(forward(..), target)` to `grad` and
/// returns the loss.
pub fn accumulate_gradient(
    params: &RegressorParams,
    visual: &[f32],
    text: &[f32],
    target: &[f64; 4],
    grad: &mut RegressorParams,
    tr: &mut Trace,
) -> f64 {
    run(params, visual, text, tr);
    let ordered = tr.ordered();
    let loss = huber_loss(&ordered, target);

    // d loss / d ordered coordinate
    let d_ord: Vec<f64> = ordered
        .iter()
        .zip(target)
        .map(|(p, t)| huber_grad(p - t) / 4.0)
        .collect();
    // route each ordered coordinate back to the raw output it came from
    let o = tr.raw;
    let mut d_raw = [0.0; 4];
    for axis in 0..2 {
        let (lo, hi) = (axis, axis + 2);
        if o[lo] <= o[hi] {
            d_raw[lo] += d_ord[lo];
            d_raw[hi] += d_ord[hi];
        } else {
            d_raw[hi] += d_ord[lo];
            d_raw[lo] += d_ord[hi];
        }
    }
    let d_head: Vec<f64> = d_raw.iter().zip(&o).map(|(d, s)| d * s * (1.0 - s)).collect();

    let mut d_h2 = Vec::new();
    params.head.backprop(&tr.h2, &d_head, &mut grad.head, Some(&mut d_h2));
    mask_relu(&mut d_h2, &tr.h2);

    let mut d_h1 = Vec::new();
    params.fuse2.backprop(&tr.h1, &d_h2, &mut grad.fuse2, Some(&mut d_h1));
    mask_relu(&mut d_h1, &tr.h1);

    let mut d_fused = Vec::new();
    params.fuse1.backprop(&tr.fused, &d_h1, &mut grad.fuse1, Some(&mut d_fused));
    mask_relu(&mut d_fused, &tr.fused);

    let latent = params.visual.n_out;
    params.visual.backprop(&tr.x_v, &d_fused[..latent], &mut grad.visual, None);
    params.text.backprop(&tr.x_t, &d_fused[latent..], &mut grad.text, None);
    loss
}

/// Zeroes gradient entries whose relu output was not positive.
fn mask_relu(d: &mut [f64], activated: &[f64]) {
    for (g, &a) in d.iter_mut().zip(activated) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Exact gradients of the single-example loss with respect to every
/// parameter.
pub fn backward(
    params: &RegressorParams,
    visual: &[f32],
    text: &[f32],
    target: &NormBox,
) -> Result<(f64, RegressorParams)> {
    params.check_inputs(visual.len(), text.len())?;
    let mut grad = RegressorParams::zeros(params.dims());
    let mut tr = Trace::default();
    let loss = accumulate_gradient(params, visual, text, &target.to_array(), &mut grad, &mut tr);
    Ok((loss, grad))
}
