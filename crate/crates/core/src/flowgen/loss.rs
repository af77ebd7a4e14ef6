use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::mlp::{ModelInput, VelocityField};
use super::sampler::CondToken;
use crate::rng::Rng;
use crate::{Error, Result};

/// One flow-matching training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub t: f64,
    /// Condition replaced by the unconditional token.
    pub dropped: bool,
    pub eps: Vec<f64>,
    pub x_t: Vec<f64>,
    pub target: Vec<f64>,
}

/// Draws `t ~ U(0,1)`, the condition-drop coin, then `ε ~ N(0, I)`, in that order.
pub fn draw_flow_sample(x0: &[f64], p_drop: f64, rng: &mut Rng) -> FlowSample {
    let t: f64 = rng.random();
    let dropped = rng.random::<f64>() < p_drop;
    let eps: Vec<f64> = (0..x0.len()).map(|_| StandardNormal.sample(rng)).collect();
    let x_t = x0.iter().zip(&eps).map(|(x, e)| (1.0 - t) * x + t * e).collect();
    let target = x0.iter().zip(&eps).map(|(x, e)| e - x).collect();
    FlowSample { t, dropped, eps, x_t, target }
}

/// Mean squared error over components.
pub fn flow_mse(pred: &[f64], target: &[f64]) -> f64 {
    debug_assert_eq!(pred.len(), target.len());
    pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64
}

fn assemble_batch(model: &VelocityField, samples: &[FlowSample], conds: &[&CondToken]) -> Result<ModelInput> {
    let shape = model.shape();
    let mut parts = Vec::with_capacity(samples.len());
    for (s, cond) in samples.iter().zip(conds) {
        if s.x_t.len() != shape.data_dim {
            return Err(Error::InvalidArgument(format!(
                "sample has {} components, model expects {}",
                s.x_t.len(),
                shape.data_dim
            )));
        }
        let (features, uncond) = match (s.dropped, cond) {
            (true, _) | (_, CondToken::Uncond) => (vec![0.0; shape.cond_dim], true),
            (false, CondToken::Prompt(v)) if v.len() == shape.cond_dim => (v.clone(), false),
            (false, CondToken::Prompt(v)) => {
                return Err(Error::InvalidArgument(format!(
                    "condition has {} components, model expects {}",
                    v.len(),
                    shape.cond_dim
                )))
            }
        };
        let x = ArrayView2::from_shape((1, s.x_t.len()), &s.x_t).expect("row");
        parts.push(model.assemble(x, &[s.t], &features, uncond));
    }
    Ok(ModelInput::stack(&parts))
}

/// Flow-matching loss of one example under a fresh draw from `rng`.
pub fn flow_sft_loss(model: &VelocityField, x0: &[f64], cond: &CondToken, rng: &mut Rng, p_drop: f64) -> Result<f64> {
    let sample = draw_flow_sample(x0, p_drop, rng);
    let (pred, _) = model.forward(assemble_batch(model, std::slice::from_ref(&sample), &[cond])?);
    Ok(flow_mse(pred.as_slice().expect("contiguous"), &sample.target))
}

/// Per-example flow losses for a batch; accumulates `scale · ∇Σ loss` into `grad`.
pub fn flow_loss_grad(
    model: &VelocityField,
    batch: &[(&[f64], &CondToken)],
    rng: &mut Rng,
    p_drop: f64,
    scale: f64,
    grad: &mut [f64],
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    let samples: Vec<FlowSample> = batch.iter().map(|(x0, _)| draw_flow_sample(x0, p_drop, rng)).collect();
    let conds: Vec<&CondToken> = batch.iter().map(|(_, c)| *c).collect();
    let (pred, cache) = model.forward(assemble_batch(model, &samples, &conds)?);
    let d = model.shape().data_dim as f64;
    let mut losses = Vec::with_capacity(samples.len());
    let mut grad_out = Array2::zeros(pred.raw_dim());
    for (r, s) in samples.iter().enumerate() {
        let row = pred.row(r);
        losses.push(flow_mse(row.as_slice().expect("contiguous"), &s.target));
        for (c, (p, t)) in row.iter().zip(&s.target).enumerate() {
            grad_out[[r, c]] = scale * 2.0 * (p - t) / d;
        }
    }
    model.backward(&cache, &grad_out, grad);
    Ok(losses)
}
