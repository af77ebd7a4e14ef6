use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::{self, streams};
use crate::{Error, Result};

/// Smallest time used when converting a clean-data prediction to a velocity.
pub const TIME_FLOOR: f64 = 0.02;

/// What the perceptron's output layer predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    /// The velocity itself.
    #[default]
    Velocity,
    /// A clean sample `D`; the velocity is `(x − D) / max(t, TIME_FLOOR)`.
    ///
    /// The velocity contains the noise, which a 128-wide hidden layer cannot
    /// carry for 768 pixels; the clean sample is low-rank and can.
    Data,
}

/// Layer sizes of the velocity network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpShape {
    pub data_dim: usize,
    /// Sinusoidal time features; must be even.
    pub time_dim: usize,
    pub cond_dim: usize,
    pub hidden: [usize; 2],
    pub prediction: Prediction,
}

impl Default for MlpShape {
    fn default() -> Self {
        Self::image()
    }
}

impl MlpShape {
    /// 768 pixels, 8 time features, 64-d condition, two hidden layers of 128,
    /// clean-data output.
    pub fn image() -> Self {
        Self {
            data_dim: crate::toyworld::PIXELS,
            time_dim: 8,
            cond_dim: crate::encoders::EMBED_DIM,
            hidden: [128, 128],
            prediction: Prediction::Data,
        }
    }

    /// Velocity-output network with the given sizes.
    pub fn velocity(data_dim: usize, time_dim: usize, cond_dim: usize, hidden: [usize; 2]) -> Self {
        Self { data_dim, time_dim, cond_dim, hidden, prediction: Prediction::Velocity }
    }

    /// Input width: state ⊕ time features ⊕ condition ⊕ unconditional flag.
    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_dim + self.cond_dim + 1
    }

    fn layers(&self) -> [(usize, usize); 3] {
        [(self.input_dim(), self.hidden[0]), (self.hidden[0], self.hidden[1]), (self.hidden[1], self.data_dim)]
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.hidden.contains(&0) || !self.time_dim.is_multiple_of(2) {
            return Err(Error::config("shape", "dimensions must be positive and time_dim even"));
        }
        Ok(())
    }

    /// `(weight_offset, bias_offset)` of each layer in the flat parameter vector.
    fn offsets(&self) -> [(usize, usize); 3] {
        let mut out = [(0, 0); 3];
        let mut at = 0;
        for (k, (i, o)) in self.layers().into_iter().enumerate() {
            out[k] = (at, at + i * o);
            at += i * o + o;
        }
        out
    }
}

/// Sinusoidal features of `t` at frequencies π·2^k.
pub fn time_features(t: f64, dim: usize, out: &mut [f64]) {
    for k in 0..dim / 2 {
        let w = std::f64::consts::PI * (1u64 << k) as f64;
        out[2 * k] = (w * t).sin();
        out[2 * k + 1] = (w * t).cos();
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Assembled network input rows and the time of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    rows: Array2<f64>,
    ts: Vec<f64>,
}

impl ModelInput {
    /// Stacks inputs row-wise, in order.
    pub fn stack(parts: &[ModelInput]) -> Self {
        let views: Vec<_> = parts.iter().map(|p| p.rows.view()).collect();
        Self {
            rows: ndarray::concatenate(Axis(0), &views).expect("matching widths"),
            ts: parts.iter().flat_map(|p| p.ts.iter().copied()).collect(),
        }
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }
}

/// Intermediate activations kept for the backward pass.
pub struct ForwardCache {
    input: Array2<f64>,
    ts: Vec<f64>,
    pre1: Array2<f64>,
    act1: Array2<f64>,
    pre2: Array2<f64>,
    act2: Array2<f64>,
}

/// Two-hidden-layer SiLU perceptron predicting a velocity for each input row.
/// Parameters live in one flat vector so optimizers and finite-difference
/// checks can treat them uniformly.
#[derive(Debug, Serialize, Deserialize)]
pub struct VelocityField {
    shape: MlpShape,
    params: Vec<f64>,
    #[serde(skip)]
    forward_calls: AtomicU64,
}

impl Clone for VelocityField {
    fn clone(&self) -> Self {
        Self { shape: self.shape, params: self.params.clone(), forward_calls: AtomicU64::new(0) }
    }
}

impl PartialEq for VelocityField {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.params == other.params
    }
}

impl VelocityField {
    /// Scaled-Gaussian initialization; the output layer starts small so an
    /// untrained field is close to zero velocity.
    pub fn new(shape: MlpShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = rng::stream(seed, streams::INIT);
        let mut params = vec![0.0; shape.param_count()];
        for (k, ((fan_in, fan_out), (w_at, _))) in shape.layers().into_iter().zip(shape.offsets()).enumerate() {
            let gain = if k == 2 { 0.1 } else { 1.0 };
            let std = gain / (fan_in as f64).sqrt();
            for p in &mut params[w_at..w_at + fan_in * fan_out] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *p = std * z;
            }
        }
        Ok(Self::from_params(shape, params).expect("sized by shape"))
    }

    pub fn zeros(shape: MlpShape) -> Result<Self> {
        shape.validate()?;
        Self::from_params(shape, vec![0.0; shape.param_count()])
    }

    pub fn from_params(shape: MlpShape, params: Vec<f64>) -> Result<Self> {
        if params.len() != shape.param_count() {
            return Err(Error::schema(
                "params",
                format!("expected {} parameters, found {}", shape.param_count(), params.len()),
            ));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::schema("params", "non-finite parameter"));
        }
        Ok(Self { shape, params, forward_calls: AtomicU64::new(0) })
    }

    pub fn shape(&self) -> &MlpShape {
        &self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Number of forward evaluations since construction or clone.
    pub fn forward_calls(&self) -> u64 {
        self.forward_calls.load(Ordering::Relaxed)
    }

    fn layer(&self, k: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (i, o) = self.shape.layers()[k];
        let (w_at, b_at) = self.shape.offsets()[k];
        let w = ArrayView2::from_shape((i, o), &self.params[w_at..w_at + i * o]).expect("layer shape");
        let b = ArrayView1::from(&self.params[b_at..b_at + o]);
        (w, b)
    }

    /// Evaluates a batch of assembled input rows (see [`VelocityField::assemble`]).
    pub fn forward(&self, input: ModelInput) -> (Array2<f64>, ForwardCache) {
        let ModelInput { rows: input, ts } = input;
        debug_assert_eq!(input.ncols(), self.shape.input_dim());
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        let (w1, b1) = self.layer(0);
        let (w2, b2) = self.layer(1);
        let (w3, b3) = self.layer(2);
        let pre1 = input.dot(&w1) + b1;
        let act1 = pre1.mapv(silu);
        let pre2 = act1.dot(&w2) + b2;
        let act2 = pre2.mapv(silu);
        let mut out = act2.dot(&w3) + b3;
        if self.shape.prediction == Prediction::Data {
            let d = self.shape.data_dim;
            for (r, mut row) in out.rows_mut().into_iter().enumerate() {
                let inv = 1.0 / ts[r].max(TIME_FLOOR);
                row.zip_mut_with(&input.slice(s![r, ..d]), |o, &x| *o = (x - *o) * inv);
            }
        }
        (out, ForwardCache { input, ts, pre1, act1, pre2, act2 })
    }

    /// Accumulates `∂L/∂θ` into `grad` given `∂L/∂output`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Array2<f64>, grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.params.len());
        let (w2, _) = self.layer(1);
        let (w3, _) = self.layer(2);
        let offsets = self.shape.offsets();
        let layers = self.shape.layers();

        let mut accumulate = |k: usize, act_in: &Array2<f64>, delta: &Array2<f64>| {
            let (i, o) = layers[k];
            let (w_at, b_at) = offsets[k];
            let dw = act_in.t().dot(delta);
            for (g, d) in grad[w_at..w_at + i * o].iter_mut().zip(dw.iter()) {
                *g += d;
            }
            let db = delta.sum_axis(Axis(0));
            for (g, d) in grad[b_at..b_at + o].iter_mut().zip(db.iter()) {
                *g += d;
            }
        };

        let scaled;
        let grad_out = match self.shape.prediction {
            Prediction::Velocity => grad_out,
            Prediction::Data => {
                let mut g = grad_out.clone();
                for (r, mut row) in g.rows_mut().into_iter().enumerate() {
                    row *= -1.0 / cache.ts[r].max(TIME_FLOOR);
                }
                scaled = g;
                &scaled
            }
        };
        accumulate(2, &cache.act2, grad_out);
        let mut d2 = grad_out.dot(&w3.t());
        d2.zip_mut_with(&cache.pre2, |d, &z| *d *= silu_grad(z));
        accumulate(1, &cache.act1, &d2);
        let mut d1 = d2.dot(&w2.t());
        d1.zip_mut_with(&cache.pre1, |d, &z| *d *= silu_grad(z));
        accumulate(0, &cache.input, &d1);
    }

    /// Builds input rows `[x, time features, condition, flag]`.
    pub fn assemble(&self, xs: ArrayView2<'_, f64>, ts: &[f64], cond: &[f64], uncond: bool) -> ModelInput {
        let shape = &self.shape;
        debug_assert_eq!(xs.ncols(), shape.data_dim);
        debug_assert_eq!(xs.nrows(), ts.len());
        debug_assert_eq!(cond.len(), shape.cond_dim);
        let mut input = Array2::zeros((xs.nrows(), shape.input_dim()));
        let d = shape.data_dim;
        let e = shape.time_dim;
        for (r, mut row) in input.rows_mut().into_iter().enumerate() {
            row.slice_mut(s![..d]).assign(&xs.row(r));
            time_features(ts[r], e, row.slice_mut(s![d..d + e]).as_slice_mut().expect("contiguous row"));
            if !uncond {
                row.slice_mut(s![d + e..d + e + shape.cond_dim]).assign(&ArrayView1::from(cond));
            }
            row[d + e + shape.cond_dim] = if uncond { 1.0 } else { 0.0 };
        }
        ModelInput { rows: input, ts: ts.to_vec() }
    }
}
