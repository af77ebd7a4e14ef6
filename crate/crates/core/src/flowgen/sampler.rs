use ndarray::{s, Array2, ArrayView2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::mlp::{ForwardCache, ModelInput, VelocityField};
use crate::encoders::EmbedVector;
use crate::rng::{self, streams, Rng};
use crate::toyworld::ToyImage;
use crate::{Error, Result};

/// Conditioning input: a prompt embedding or the unconditional sentinel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CondToken {
    Prompt(Vec<f64>),
    Uncond,
}

impl CondToken {
    pub fn from_embedding(e: &EmbedVector) -> Self {
        CondToken::Prompt(e.values().to_vec())
    }

    fn features(&self, dim: usize) -> Result<(Vec<f64>, bool)> {
        match self {
            CondToken::Prompt(v) if v.len() == dim => Ok((v.clone(), false)),
            CondToken::Prompt(v) => {
                Err(Error::InvalidArgument(format!("condition has {} components, model expects {dim}", v.len())))
            }
            CondToken::Uncond => Ok((vec![0.0; dim], true)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Steps for stochastic rollouts during policy optimization.
    pub train_steps: usize,
    /// Steps for deterministic evaluation sampling.
    pub eval_steps: usize,
    pub guidance_scale: f64,
    pub noise_level: f64,
    pub window_size: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { train_steps: 15, eval_steps: 50, guidance_scale: 4.0, noise_level: 1.3, window_size: 3, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_steps < 2 {
            return Err(Error::config("sampler.train_steps", "must be at least 2"));
        }
        if self.eval_steps < 2 {
            return Err(Error::config("sampler.eval_steps", "must be at least 2"));
        }
        if self.window_size == 0 || self.window_size > self.train_steps / 2 {
            return Err(Error::config("sampler.window_size", "must lie in [1, floor(train_steps/2)]"));
        }
        if !(self.noise_level >= 0.0) || !self.noise_level.is_finite() {
            return Err(Error::config("sampler.noise_level", "must be finite and non-negative"));
        }
        if !self.guidance_scale.is_finite() {
            return Err(Error::config("sampler.guidance_scale", "must be finite"));
        }
        Ok(())
    }

    /// Exclusive upper bound on stochastic step indices, `floor(N_train / 2)`.
    pub fn window_limit(&self) -> usize {
        self.train_steps / 2
    }

    /// Number of valid window start positions.
    pub fn window_starts(&self) -> usize {
        self.window_limit() - self.window_size + 1
    }
}

enum GuidedMode {
    Single,
    Pair { scale: f64 },
}

/// Activations from [`guided_velocity`], for [`guided_velocity_backward`].
pub struct GuidedCache {
    cache: ForwardCache,
    mode: GuidedMode,
    rows: usize,
}

/// Classifier-free guided velocity `v_u + s·(v_c − v_u)` for each row of `xs`.
///
/// With `s = 1`, or an unconditional token, only one network pass is made and
/// the result is exactly that pass.
pub fn guided_velocity(
    model: &VelocityField,
    xs: ArrayView2<'_, f64>,
    ts: &[f64],
    cond: &CondToken,
    scale: f64,
) -> Result<(Array2<f64>, GuidedCache)> {
    let shape = model.shape();
    let (features, uncond) = cond.features(shape.cond_dim)?;
    let rows = xs.nrows();
    if uncond || scale == 1.0 {
        let (v, cache) = model.forward(model.assemble(xs, ts, &features, uncond));
        return Ok((v, GuidedCache { cache, mode: GuidedMode::Single, rows }));
    }
    let input = ModelInput::stack(&[model.assemble(xs, ts, &features, false), model.assemble(xs, ts, &features, true)]);
    let (out, cache) = model.forward(input);
    let v_c = out.slice(s![..rows, ..]);
    let v_u = out.slice(s![rows.., ..]);
    let guided = &v_u + &((&v_c - &v_u) * scale);
    Ok((guided, GuidedCache { cache, mode: GuidedMode::Pair { scale }, rows }))
}

/// Accumulates `∂L/∂θ` given `∂L/∂v̂`.
pub fn guided_velocity_backward(model: &VelocityField, cache: &GuidedCache, grad_v: &Array2<f64>, grad: &mut [f64]) {
    match cache.mode {
        GuidedMode::Single => model.backward(&cache.cache, grad_v, grad),
        GuidedMode::Pair { scale } => {
            let mut g = Array2::zeros((2 * cache.rows, grad_v.ncols()));
            g.slice_mut(s![..cache.rows, ..]).assign(&(grad_v * scale));
            g.slice_mut(s![cache.rows.., ..]).assign(&(grad_v * (1.0 - scale)));
            model.backward(&cache.cache, &g, grad);
        }
    }
}

fn draw_noise(rng: &mut Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn check_finite(values: &[f64], what: &str, step: usize) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericalDivergence(format!("non-finite {what} at step {step}")))
    }
}

/// Deterministic Euler integration with `eval_steps` steps; returns the
/// unclamped final state.
pub fn sample_ode_state(model: &VelocityField, cond: &CondToken, config: &SamplerConfig) -> Result<Vec<f64>> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, streams::SAMPLER);
    let dim = model.shape().data_dim;
    let mut x = Array2::from_shape_vec((1, dim), draw_noise(&mut rng, dim)).expect("sized");
    let n = config.eval_steps;
    let dt = 1.0 / n as f64;
    for k in 0..n {
        let t = (n - k) as f64 / n as f64;
        let (v, _) = guided_velocity(model, x.view(), &[t], cond, config.guidance_scale)?;
        x.scaled_add(-dt, &v);
        check_finite(x.as_slice().expect("contiguous"), "state", k)?;
    }
    Ok(x.into_raw_vec_and_offset().0)
}

/// Deterministic sample clamped into an image. The initial noise comes from
/// `config.seed`.
pub fn sample_ode(model: &VelocityField, cond: &CondToken, config: &SamplerConfig) -> Result<ToyImage> {
    ToyImage::from_f64_clamped(&sample_ode_state(model, cond, config)?)
}

/// Noise scale of a stochastic step: `a·sqrt(Δt)·sqrt(t)`.
pub fn sde_std(noise_level: f64, dt: f64, t: f64) -> f64 {
    noise_level * dt.sqrt() * t.sqrt()
}

/// Log-density of `x` under an isotropic Gaussian, summed over components.
pub fn gaussian_logp(x: &[f64], mean: &[f64], std: f64) -> f64 {
    let var = std * std;
    let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -sq / (2.0 * var) - 0.5 * x.len() as f64 * (2.0 * std::f64::consts::PI * var).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdeStep {
    pub x_next: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: f64,
    pub logp: f64,
}

/// One stochastic transition from time `t` with `Δt = 1 / train_steps`.
pub fn sde_step(
    model: &VelocityField,
    x: &[f64],
    t: f64,
    cond: &CondToken,
    config: &SamplerConfig,
    rng: &mut Rng,
) -> Result<SdeStep> {
    if !(config.noise_level > 0.0) {
        return Err(Error::config(
            "sampler.noise_level",
            "stochastic steps need a positive noise level; use the deterministic step instead",
        ));
    }
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::InvalidArgument(format!("t = {t} outside (0, 1]")));
    }
    let dt = 1.0 / config.train_steps as f64;
    let xs = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let (v, _) = guided_velocity(model, xs, &[t], cond, config.guidance_scale)?;
    let mean: Vec<f64> = x.iter().zip(v.iter()).map(|(xi, vi)| xi - vi * dt).collect();
    let std = sde_std(config.noise_level, dt, t);
    let x_next: Vec<f64> = mean
        .iter()
        .map(|m| {
            let z: f64 = StandardNormal.sample(rng);
            m + std * z
        })
        .collect();
    check_finite(&x_next, "state", 0)?;
    let logp = gaussian_logp(&x_next, &mean, std);
    Ok(SdeStep { x_next, mean, std, logp })
}

/// State before step `k` and the transition taken from it.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    /// Zero on deterministic steps.
    pub std: f64,
    /// Zero on deterministic steps.
    pub logp: f64,
    pub in_window: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrajectory {
    pub steps: Vec<StepRecord>,
    pub window_start: usize,
    pub dt: f64,
    /// Unclamped state at `t = 0`.
    pub final_state: Vec<f64>,
}

impl FlowTrajectory {
    /// State reached by step `k`.
    pub fn x_next(&self, k: usize) -> &[f64] {
        self.steps.get(k + 1).map_or(&self.final_state, |r| &r.x)
    }

    pub fn window_indices(&self) -> Vec<usize> {
        self.steps.iter().enumerate().filter(|(_, r)| r.in_window).map(|(k, _)| k).collect()
    }

    pub fn final_image(&self) -> Result<ToyImage> {
        ToyImage::from_f64_clamped(&self.final_state)
    }
}

/// Rolls one trajectory per generator in `rngs`, batched through the network.
///
/// Steps `window_start .. window_start + window_size` are stochastic; all others
/// are Euler steps. Each trajectory draws its initial noise and then its
/// transition noise from its own generator, so the result for sample `i`
/// depends only on `rngs[i]`.
pub fn rollout_group(
    model: &VelocityField,
    cond: &CondToken,
    config: &SamplerConfig,
    rngs: &mut [Rng],
    window_start: usize,
) -> Result<Vec<FlowTrajectory>> {
    config.validate()?;
    if window_start + config.window_size > config.window_limit() {
        return Err(Error::InvalidArgument(format!(
            "window [{window_start}, {}) exceeds the first-half limit {}",
            window_start + config.window_size,
            config.window_limit()
        )));
    }
    if !(config.noise_level > 0.0) {
        return Err(Error::config("sampler.noise_level", "rollouts need a positive noise level"));
    }
    let dim = model.shape().data_dim;
    let batch = rngs.len();
    let n = config.train_steps;
    let dt = 1.0 / n as f64;
    let window = window_start..window_start + config.window_size;

    let mut x = Array2::zeros((batch, dim));
    for (mut row, rng) in x.rows_mut().into_iter().zip(rngs.iter_mut()) {
        row.assign(&ndarray::Array1::from(draw_noise(rng, dim)));
    }
    let mut steps: Vec<Vec<StepRecord>> = vec![Vec::with_capacity(n); batch];
    for k in 0..n {
        let t = (n - k) as f64 / n as f64;
        let (v, _) = guided_velocity(model, x.view(), &vec![t; batch], cond, config.guidance_scale)?;
        let mean = &x - &(v * dt);
        check_finite(mean.as_slice().expect("contiguous"), "mean", k)?;
        let stochastic = window.contains(&k);
        let std = if stochastic { sde_std(config.noise_level, dt, t) } else { 0.0 };
        let mut next = mean.clone();
        for (i, rng) in rngs.iter_mut().enumerate() {
            let mut logp = 0.0;
            if stochastic {
                let mut row = next.row_mut(i);
                for v in row.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *v += std * z;
                }
                logp = gaussian_logp(
                    row.as_slice().expect("contiguous"),
                    mean.row(i).as_slice().expect("contiguous"),
                    std,
                );
            }
            steps[i].push(StepRecord {
                t,
                x: x.row(i).to_vec(),
                mean: mean.row(i).to_vec(),
                std,
                logp,
                in_window: stochastic,
            });
        }
        x = next;
    }
    Ok(steps
        .into_iter()
        .enumerate()
        .map(|(i, steps)| FlowTrajectory { steps, window_start, dt, final_state: x.row(i).to_vec() })
        .collect())
}

/// A single trajectory; see [`rollout_group`].
pub fn rollout(
    model: &VelocityField,
    cond: &CondToken,
    config: &SamplerConfig,
    rng: &mut Rng,
    window_start: usize,
) -> Result<FlowTrajectory> {
    let mut rngs = [rng.clone()];
    let out = rollout_group(model, cond, config, &mut rngs, window_start)?;
    *rng = rngs[0].clone();
    Ok(out.into_iter().next().expect("one trajectory"))
}
