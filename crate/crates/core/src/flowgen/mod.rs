//! Conditional rectified-flow generator.
//!
//! Time runs from noise at `t = 1` to data at `t = 0`; training pairs are
//! `x_t = (1 − t)·x0 + t·ε` with target velocity `ε − x0`. Sampling integrates
//! `x ← x − v̂·Δt` with the classifier-free-guided velocity
//! `v̂ = v_u + s·(v_c − v_u)`. The stochastic sampler replaces a short window of
//! Euler steps with Gaussian transitions whose log-densities drive policy
//! optimization.

mod loss;
mod mlp;
mod sampler;

pub use loss::{draw_flow_sample, flow_loss_grad, flow_mse, flow_sft_loss, FlowSample};
pub use mlp::{time_features, ForwardCache, MlpShape, ModelInput, Prediction, VelocityField, TIME_FLOOR};
pub use sampler::{
    gaussian_logp, guided_velocity, guided_velocity_backward, rollout, rollout_group, sample_ode, sample_ode_state,
    sde_std, sde_step, CondToken, FlowTrajectory, SamplerConfig, SdeStep, StepRecord,
};
