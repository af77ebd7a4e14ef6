//! End-to-end stages: unified SFT from scratch, then policy optimization from
//! the SFT checkpoint.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::encoders::Scorer;
use crate::flowgen::{CondToken, MlpShape, SamplerConfig, VelocityField};
use crate::grporl::{grpo_run, CharacterReward, GrpoConfig, IterationStats};
use crate::rewards::{RewardContext, RewardWeights, Thresholds};
use crate::rng::{self, streams};
use crate::sft::{pack_vocab, unified_sft_run, MixerConfig, SftConfig, SftRecord, TinyLM};
use crate::toyworld::CharacterPack;
use crate::{Error, Result};

/// Every hyperparameter of a two-stage run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub shape: MlpShape,
    pub sft: SftConfig,
    pub mixer: MixerConfig,
    pub grpo: GrpoConfig,
    pub sampler: SamplerConfig,
    pub weights: RewardWeights,
    pub thresholds: Thresholds,
    /// Evaluation prompts are every pack prompt this many times over.
    pub eval_repeats: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            shape: MlpShape::image(),
            sft: SftConfig::default(),
            mixer: MixerConfig::default(),
            grpo: GrpoConfig::default(),
            sampler: SamplerConfig::default(),
            weights: RewardWeights::default(),
            thresholds: Thresholds::default(),
            eval_repeats: 4,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Defaults with learning rates sized for the toy models.
    pub fn toy() -> Self {
        Self { sft: SftConfig::toy(), grpo: GrpoConfig::toy(), ..Self::default() }
    }

    /// Copy whose every stochastic component is re-seeded from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let sub = |k: u64| rng::derive(seed, &[k]);
        let mut c = *self;
        c.seed = seed;
        c.sft.seed = sub(streams::SFT);
        c.mixer.seed = sub(streams::MIXER);
        c.grpo.seed = sub(streams::GRPO);
        c.sampler.seed = sub(streams::SAMPLER);
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        self.sft.validate()?;
        self.mixer.validate()?;
        self.grpo.validate()?;
        self.sampler.validate()?;
        self.weights.validate()?;
        self.thresholds.validate()?;
        if self.eval_repeats == 0 {
            return Err(Error::config("eval_repeats", "must be positive"));
        }
        Ok(())
    }

    /// Seed of the freshly initialized velocity field.
    pub fn init_seed(&self) -> u64 {
        rng::derive(self.seed, &[streams::INIT])
    }
}

/// Freshly initialized models for `pack`.
pub fn initial_checkpoint(pack: &CharacterPack, config: &ExperimentConfig) -> Result<Checkpoint> {
    let velocity = VelocityField::new(config.shape, config.init_seed())?;
    let lm = TinyLM::new(pack_vocab(pack), config.sft.lm_dim, rng::derive(config.init_seed(), &[1]))?;
    Ok(Checkpoint { velocity, sampler: config.sampler, lm: Some(lm) })
}

/// Unified SFT from a fresh initialization.
pub fn sft_stage(
    pack: &CharacterPack,
    config: &ExperimentConfig,
    scorer: &dyn Scorer,
) -> Result<(Checkpoint, Vec<SftRecord>)> {
    config.validate()?;
    let mut ckpt = initial_checkpoint(pack, config)?;
    let lm = ckpt.lm.as_mut().expect("initial checkpoint carries a text model");
    let history = unified_sft_run(&mut ckpt.velocity, lm, pack, &config.sft, &config.mixer, scorer)?;
    Ok((ckpt, history))
}

/// Conditions for every pack prompt, in `pack.prompts()` order.
pub fn prompt_conditions(pack: &CharacterPack, context: &RewardContext<'_>) -> Result<Vec<CondToken>> {
    pack.prompts().iter().map(|p| Ok(CondToken::from_embedding(context.prompt_embedding(p)?))).collect()
}

/// Policy optimization of the checkpoint's velocity field with the full
/// composite reward under `config.weights`.
pub fn grpo_stage(
    start: &Checkpoint,
    pack: &CharacterPack,
    config: &ExperimentConfig,
    scorer: &dyn Scorer,
    log: Option<&mut dyn Write>,
) -> Result<(Checkpoint, Vec<IterationStats>)> {
    config.validate()?;
    let context = RewardContext::new(scorer, pack)?;
    let conds = prompt_conditions(pack, &context)?;
    let reward =
        CharacterReward { context, weights: config.weights, thresholds: config.thresholds, mode: config.grpo.vqa_mode };
    let mut ckpt = start.clone();
    ckpt.sampler = config.sampler;
    let history = grpo_run(&mut ckpt.velocity, &pack.prompts(), &conds, &config.grpo, &config.sampler, &reward, log)?;
    Ok((ckpt, history))
}
