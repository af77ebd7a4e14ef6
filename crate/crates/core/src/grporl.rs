//! Group-relative policy optimization over the stochastic sampler.
//!
//! Each iteration freezes a snapshot of the velocity field, rolls a group of
//! `G` trajectories per prompt under that snapshot, scores the final images,
//! normalizes rewards within each group into advantages, and takes clipped
//! surrogate steps in which importance ratios are recomputed from the stored
//! Gaussian transitions.

use std::io::Write;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::config_hash;
use crate::flowgen::{
    gaussian_logp, guided_velocity, guided_velocity_backward, rollout_group, CondToken, FlowTrajectory, SamplerConfig,
    VelocityField,
};
use crate::optim::{AdamW, AdamWConfig};
use crate::rewards::{RewardBreakdown, RewardContext, RewardWeights, Thresholds, VqaMode};
use crate::rng::{self, streams, Rng};
use crate::toyworld::{PromptSpec, ToyImage};
use crate::{Error, Result};

/// Standard deviation below which a group is treated as carrying no signal.
pub const DEGENERATE_STD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub learning_rate: f64,
    pub prompt_batch: usize,
    pub eps_lt: f64,
    pub eps_gt: f64,
    pub beta_kl: f64,
    pub iterations: usize,
    pub inner_epochs: usize,
    pub optimizer: AdamWConfig,
    pub vqa_mode: VqaMode,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            learning_rate: 1e-5,
            prompt_batch: 6,
            eps_lt: 1e-5,
            eps_gt: 1e-5,
            beta_kl: 0.0,
            iterations: 200,
            inner_epochs: 1,
            optimizer: AdamWConfig::default(),
            vqa_mode: VqaMode::Single,
            seed: 0,
        }
    }
}

impl GrpoConfig {
    /// Toy policy rate; 1e-3 already lowers the mean reward.
    pub const TOY_LEARNING_RATE: f64 = 3e-4;

    pub fn toy() -> Self {
        Self { learning_rate: Self::TOY_LEARNING_RATE, ..Self::default() }
    }

    /// Wide clip range that makes clipping visible in small examples.
    pub fn legible() -> Self {
        Self { eps_lt: 0.2, eps_gt: 0.2, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::config("grpo.group_size", "must be at least 2"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("grpo.learning_rate", "must be positive"));
        }
        if self.prompt_batch == 0 {
            return Err(Error::config("grpo.prompt_batch", "must be positive"));
        }
        if !(self.eps_lt > 0.0) || self.eps_lt >= 1.0 {
            return Err(Error::config("grpo.eps_lt", "must lie in (0, 1)"));
        }
        if !(self.eps_gt > 0.0) {
            return Err(Error::config("grpo.eps_gt", "must be positive"));
        }
        if !(self.beta_kl >= 0.0) {
            return Err(Error::config("grpo.beta_kl", "must be non-negative"));
        }
        if self.inner_epochs == 0 {
            return Err(Error::config("grpo.inner_epochs", "must be positive"));
        }
        self.optimizer.validate("grpo.optimizer")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Advantages {
    pub values: Vec<f64>,
    /// Set when the group's reward spread is below [`DEGENERATE_STD`].
    pub degenerate: bool,
}

/// Group z-scores with the population standard deviation.
pub fn compute_advantages(rewards: &[f64]) -> Result<Advantages> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::InvalidArgument(format!("advantages need at least 2 rewards, got {g}")));
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g as f64;
    let std = var.sqrt();
    if !(std >= DEGENERATE_STD) {
        return Ok(Advantages { values: vec![0.0; g], degenerate: true });
    }
    Ok(Advantages { values: rewards.iter().map(|r| (r - mean) / std).collect(), degenerate: false })
}

pub fn clip(r: f64, lo: f64, hi: f64) -> f64 {
    r.max(lo).min(hi)
}

/// `min(r·Â, clip(r, 1 − ε_lt, 1 + ε_gt)·Â)`.
pub fn clipped_term(r: f64, adv: f64, eps_lt: f64, eps_gt: f64) -> f64 {
    (r * adv).min(clip(r, 1.0 - eps_lt, 1.0 + eps_gt) * adv)
}

/// `∂ term / ∂r`: `Â` while the unclipped branch is active, else 0.
fn clipped_term_slope(r: f64, adv: f64, eps_lt: f64, eps_gt: f64) -> f64 {
    let (lo, hi) = (1.0 - eps_lt, 1.0 + eps_gt);
    if (lo..=hi).contains(&r) || r * adv <= clip(r, lo, hi) * adv {
        adv
    } else {
        0.0
    }
}

/// One prompt's group: trajectories rolled under the snapshot, their images,
/// rewards and advantages.
#[derive(Debug, Clone)]
pub struct GroupRollout {
    pub prompt: PromptSpec,
    pub cond: CondToken,
    pub window_start: usize,
    pub trajectories: Vec<FlowTrajectory>,
    pub images: Vec<ToyImage>,
    pub rewards: RewardBreakdown,
    pub advantages: Advantages,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateOutput {
    pub loss: f64,
    /// Importance ratios indexed `[sample][window step]`.
    pub ratios: Vec<Vec<f64>>,
    /// Mean per-step KL to the reference policy; zero when `beta_kl = 0`.
    pub kl: f64,
}

/// Clipped surrogate loss of one group. When `grad` is given, accumulates
/// `scale · ∂loss/∂θ` into it.
///
/// `reference` is only evaluated when `beta_kl > 0`.
pub fn surrogate_loss_grad(
    model: &VelocityField,
    rollout: &GroupRollout,
    config: &GrpoConfig,
    sampler: &SamplerConfig,
    reference: Option<&VelocityField>,
    scale: f64,
    mut grad: Option<&mut [f64]>,
) -> Result<SurrogateOutput> {
    let g = rollout.trajectories.len();
    if g == 0 || rollout.advantages.values.len() != g {
        return Err(Error::InvalidArgument("group rollout has mismatched trajectories and advantages".into()));
    }
    let use_kl = config.beta_kl > 0.0;
    let reference = match (use_kl, reference) {
        (true, None) => return Err(Error::InvalidArgument("beta_kl > 0 requires a reference policy".into())),
        (true, Some(r)) => Some(r),
        (false, _) => None,
    };
    let window: Vec<usize> = rollout.trajectories[0].window_indices();
    let t_count = window.len();
    if t_count == 0 || rollout.trajectories.iter().any(|tr| tr.window_indices() != window) {
        return Err(Error::InvalidArgument("group trajectories must share one non-empty window".into()));
    }
    let dim = model.shape().data_dim;
    let norm = 1.0 / (g * t_count) as f64;
    let mut loss = 0.0;
    let mut kl_total = 0.0;
    let mut ratios = vec![Vec::with_capacity(t_count); g];
    for &k in &window {
        let first = &rollout.trajectories[0].steps[k];
        let (t, std, dt) = (first.t, first.std, rollout.trajectories[0].dt);
        let xs = Array2::from_shape_fn((g, dim), |(i, c)| rollout.trajectories[i].steps[k].x[c]);
        let (v, cache) = guided_velocity(model, xs.view(), &vec![t; g], &rollout.cond, sampler.guidance_scale)?;
        let ref_v = match reference {
            Some(r) => Some(guided_velocity(r, xs.view(), &vec![t; g], &rollout.cond, sampler.guidance_scale)?.0),
            None => None,
        };
        let mut grad_v = Array2::<f64>::zeros((g, dim));
        let var = std * std;
        for i in 0..g {
            let traj = &rollout.trajectories[i];
            let rec = &traj.steps[k];
            let x_next = traj.x_next(k);
            let mean: Vec<f64> = (0..dim).map(|c| rec.x[c] - v[[i, c]] * dt).collect();
            let logp = gaussian_logp(x_next, &mean, std);
            let r = (logp - rec.logp).exp();
            if !r.is_finite() {
                return Err(Error::NumericalDivergence(format!("non-finite importance ratio at window step {k}")));
            }
            ratios[i].push(r);
            let adv = rollout.advantages.values[i];
            loss -= norm * clipped_term(r, adv, config.eps_lt, config.eps_gt);
            // ∂loss/∂logp = −norm · slope · r; ∂logp/∂mean = (x_next − mean)/σ²; ∂mean/∂v̂ = −Δt
            let dlogp = -norm * clipped_term_slope(r, adv, config.eps_lt, config.eps_gt) * r;
            for c in 0..dim {
                grad_v[[i, c]] = dlogp * (x_next[c] - mean[c]) / var * -dt;
            }
            if let Some(rv) = &ref_v {
                // KL between two Gaussians sharing σ: ‖μθ − μref‖² / 2σ²
                let mut kl = 0.0;
                for c in 0..dim {
                    let diff = (rv[[i, c]] - v[[i, c]]) * dt;
                    kl += diff * diff / (2.0 * var);
                    grad_v[[i, c]] += config.beta_kl * norm * diff / var * -dt;
                }
                kl_total += norm * kl;
            }
        }
        if let Some(grad) = grad.as_deref_mut() {
            guided_velocity_backward(model, &cache, &(grad_v * scale), grad);
        }
    }
    loss += config.beta_kl * kl_total;
    Ok(SurrogateOutput { loss, ratios, kl: kl_total })
}

/// [`surrogate_loss_grad`] without the gradient.
pub fn surrogate_loss(
    model: &VelocityField,
    rollout: &GroupRollout,
    config: &GrpoConfig,
    sampler: &SamplerConfig,
    reference: Option<&VelocityField>,
) -> Result<SurrogateOutput> {
    surrogate_loss_grad(model, rollout, config, sampler, reference, 1.0, None)
}

/// Scores a group of images generated for one prompt.
pub trait GroupReward {
    fn score(&self, images: &[ToyImage], prompt: &PromptSpec, rng: &mut Rng) -> Result<RewardBreakdown>;
}

/// The full composite reward for one character.
pub struct CharacterReward<'a> {
    pub context: RewardContext<'a>,
    pub weights: RewardWeights,
    pub thresholds: Thresholds,
    pub mode: VqaMode,
}

impl GroupReward for CharacterReward<'_> {
    fn score(&self, images: &[ToyImage], prompt: &PromptSpec, rng: &mut Rng) -> Result<RewardBreakdown> {
        self.context.score_group(images, prompt, &self.weights, &self.thresholds, self.mode, rng)
    }
}

/// Per-iteration summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub mean_total_reward: f64,
    pub mean_r_align: f64,
    pub mean_r_consist: f64,
    pub mean_r_div: f64,
    pub mean_p_sim: f64,
    pub mean_s_max: f64,
    pub grad_norm: f64,
}

/// Mutable training state carried across iterations.
pub struct GrpoState {
    pub optimizer: AdamW,
    /// Frozen reference policy for the KL term, kept only when `beta_kl > 0`.
    pub reference: Option<VelocityField>,
    pub iteration: usize,
}

impl GrpoState {
    pub fn new(model: &VelocityField, config: &GrpoConfig) -> Self {
        Self {
            optimizer: AdamW::new(config.optimizer, model.params().len()),
            reference: (config.beta_kl > 0.0).then(|| model.clone()),
            iteration: 0,
        }
    }
}

/// Rolls and scores one group under `snapshot`.
#[allow(clippy::too_many_arguments)]
pub fn roll_group(
    snapshot: &VelocityField,
    prompt: &PromptSpec,
    cond: CondToken,
    window_start: usize,
    sampler: &SamplerConfig,
    group_size: usize,
    stream_seed: u64,
    reward: &dyn GroupReward,
    reward_rng: &mut Rng,
) -> Result<GroupRollout> {
    let mut rngs: Vec<Rng> = (0..group_size as u64).map(|i| rng::stream(stream_seed, i)).collect();
    let trajectories = rollout_group(snapshot, &cond, sampler, &mut rngs, window_start)?;
    let images = trajectories.iter().map(FlowTrajectory::final_image).collect::<Result<Vec<_>>>()?;
    let rewards = reward.score(&images, prompt, reward_rng)?;
    let advantages = compute_advantages(&rewards.totals())?;
    Ok(GroupRollout { prompt: prompt.clone(), cond, window_start, trajectories, images, rewards, advantages })
}

/// One policy-optimization iteration; updates `model` in place.
///
/// `conds` holds the condition for each entry of `prompts`.
#[allow(clippy::too_many_arguments)]
pub fn grpo_iteration(
    model: &mut VelocityField,
    state: &mut GrpoState,
    prompts: &[PromptSpec],
    conds: &[CondToken],
    config: &GrpoConfig,
    sampler: &SamplerConfig,
    reward: &dyn GroupReward,
) -> Result<(IterationStats, Vec<GroupRollout>)> {
    config.validate()?;
    sampler.validate()?;
    if prompts.is_empty() || prompts.len() != conds.len() {
        return Err(Error::InvalidArgument("need one condition per prompt and at least one prompt".into()));
    }
    let iter_seed = rng::derive(config.seed, &[state.iteration as u64]);
    let mut rng = rng::stream(iter_seed, streams::GRPO);
    let snapshot = model.clone();
    let mut groups = Vec::with_capacity(config.prompt_batch);
    for j in 0..config.prompt_batch {
        let p = rng.random_range(0..prompts.len());
        let window_start = rng.random_range(0..sampler.window_starts());
        let stream_seed = rng::derive(iter_seed, &[j as u64]);
        groups.push(roll_group(
            &snapshot,
            &prompts[p],
            conds[p].clone(),
            window_start,
            sampler,
            config.group_size,
            stream_seed,
            reward,
            &mut rng,
        )?);
    }

    let mut grad_norm = 0.0;
    let scale = 1.0 / groups.len() as f64;
    for epoch in 0..config.inner_epochs {
        let mut grad = vec![0.0; model.params().len()];
        for group in &groups {
            surrogate_loss_grad(model, group, config, sampler, state.reference.as_ref(), scale, Some(&mut grad))?;
        }
        if epoch == 0 {
            grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        }
        state.optimizer.step(config.learning_rate, model.params_mut(), &grad);
    }
    state.iteration += 1;

    let n = (groups.len() * config.group_size) as f64;
    let sum = |f: &dyn Fn(&crate::rewards::SampleReward) -> f64| {
        groups.iter().flat_map(|g| g.rewards.samples.iter()).map(f).sum::<f64>() / n
    };
    let stats = IterationStats {
        mean_total_reward: sum(&|s| s.total),
        mean_r_align: sum(&|s| s.r_align),
        mean_r_consist: sum(&|s| s.r_consist),
        mean_r_div: groups.iter().map(|g| g.rewards.r_div).sum::<f64>() / groups.len() as f64,
        mean_p_sim: sum(&|s| s.p_sim),
        mean_s_max: sum(&|s| s.s_max),
        grad_norm,
    };
    Ok((stats, groups))
}

#[derive(Serialize)]
struct LogRecord<'a> {
    iteration: usize,
    #[serde(flatten)]
    stats: &'a IterationStats,
    config_hash: &'a str,
}

/// Runs `config.iterations` iterations, writing one JSON line per iteration to
/// `log` when given.
#[allow(clippy::too_many_arguments)]
pub fn grpo_run(
    model: &mut VelocityField,
    prompts: &[PromptSpec],
    conds: &[CondToken],
    config: &GrpoConfig,
    sampler: &SamplerConfig,
    reward: &dyn GroupReward,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<IterationStats>> {
    let hash = config_hash(&(config, sampler))?;
    let mut state = GrpoState::new(model, config);
    let mut history = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let iteration = state.iteration;
        let (stats, _) = grpo_iteration(model, &mut state, prompts, conds, config, sampler, reward)?;
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &LogRecord { iteration, stats: &stats, config_hash: &hash })?;
            w.write_all(b"\n").map_err(|e| Error::io("<training log>", e))?;
        }
        history.push(stats);
    }
    Ok(history)
}
