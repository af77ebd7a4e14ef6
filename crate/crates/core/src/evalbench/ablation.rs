//! Training-stage and reward-term ablations.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{eval_prompts, eval_t2i, MetricsReport};
use crate::checkpoint::Checkpoint;
use crate::config::config_hash;
use crate::encoders::Scorer;
use crate::pipeline::{grpo_stage, sft_stage, ExperimentConfig};
use crate::rewards::RewardWeights;
use crate::toyworld::CharacterPack;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSuite {
    /// SFT only against SFT followed by policy optimization.
    Stage,
    /// The full reward against each term removed in turn.
    Reward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    SftOnly,
    SftGrpo,
}

/// One row label of an ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setting {
    pub name: String,
    pub stage: Stage,
    pub weights: RewardWeights,
}

pub fn stage_settings(weights: RewardWeights) -> Vec<Setting> {
    vec![
        Setting { name: "sft_only".into(), stage: Stage::SftOnly, weights },
        Setting { name: "sft_grpo".into(), stage: Stage::SftGrpo, weights },
    ]
}

/// The full weights, then each weight zeroed on its own.
pub fn reward_settings(base: RewardWeights) -> Vec<Setting> {
    let with = |name: &str, w: RewardWeights| Setting { name: name.into(), stage: Stage::SftGrpo, weights: w };
    vec![
        with("full", base),
        with("no_alignment", RewardWeights { alpha: 0.0, ..base }),
        with("no_consistency", RewardWeights { beta_vqa: 0.0, ..base }),
        with("no_diversity", RewardWeights { gamma: 0.0, ..base }),
        with("no_penalty", RewardWeights { delta: 0.0, ..base }),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub seed: u64,
    pub report: MetricsReport,
}

/// Runs every setting for every seed. SFT runs once per seed and is shared by
/// all settings; every setting is evaluated on the same prompts and samples.
pub fn run_settings(
    pack: &CharacterPack,
    base: &ExperimentConfig,
    settings: &[Setting],
    seeds: &[u64],
    scorer: &dyn Scorer,
) -> Result<Vec<AblationRow>> {
    if settings.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one setting and one seed".into()));
    }
    let prompts = eval_prompts(pack, base.eval_repeats);
    let mut rows = Vec::with_capacity(settings.len() * seeds.len());
    for &seed in seeds {
        let config = base.with_seed(seed);
        let (sft, _) = sft_stage(pack, &config, scorer)?;
        for setting in settings {
            let config = ExperimentConfig { weights: setting.weights, ..config };
            let ckpt: Checkpoint = match setting.stage {
                Stage::SftOnly => sft.clone(),
                Stage::SftGrpo => grpo_stage(&sft, pack, &config, scorer, None)?.0,
            };
            let mut report = eval_t2i(&ckpt.velocity, pack, &prompts, &config.sampler, scorer)?.report;
            report.config_hash = config_hash(&(setting, &config))?;
            rows.push(AblationRow { setting: setting.name.clone(), seed, report });
        }
    }
    Ok(rows)
}

pub fn run_ablation(
    suite: AblationSuite,
    pack: &CharacterPack,
    base: &ExperimentConfig,
    seeds: &[u64],
    scorer: &dyn Scorer,
) -> Result<Vec<AblationRow>> {
    let settings = match suite {
        AblationSuite::Stage => stage_settings(base.weights),
        AblationSuite::Reward => reward_settings(base.weights),
    };
    run_settings(pack, base, &settings, seeds, scorer)
}

#[derive(Serialize)]
struct CsvRow<'a> {
    setting: &'a str,
    seed: u64,
    clip_i_analogue: f64,
    clip_t_analogue: f64,
    dino_analogue: f64,
    trainset_sim_sem: f64,
    trainset_sim_struct: f64,
    sample_count: usize,
    config_hash: &'a str,
}

/// One CSV row per (setting, seed).
pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidArgument(format!("{other:?}")),
    })?;
    for r in rows {
        let m = &r.report;
        w.serialize(CsvRow {
            setting: &r.setting,
            seed: r.seed,
            clip_i_analogue: m.clip_i_analogue,
            clip_t_analogue: m.clip_t_analogue,
            dino_analogue: m.dino_analogue,
            trainset_sim_sem: m.trainset_sim_sem,
            trainset_sim_struct: m.trainset_sim_struct,
            sample_count: m.sample_count,
            config_hash: &m.config_hash,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::BuiltinScorer;
    use crate::toyworld::{build_pack, make_character, PackSizes};

    fn differing(a: &RewardWeights, b: &RewardWeights) -> usize {
        [(a.alpha, b.alpha), (a.beta_vqa, b.beta_vqa), (a.gamma, b.gamma), (a.delta, b.delta)]
            .iter()
            .filter(|(x, y)| x != y)
            .count()
    }

    #[test]
    fn reward_settings_zero_exactly_one_weight() {
        let base = RewardWeights::default();
        let settings = reward_settings(base);
        assert_eq!(settings.len(), 5);
        assert_eq!(settings[0].weights, base);
        for s in &settings[1..] {
            assert_eq!(differing(&s.weights, &base), 1, "{}", s.name);
        }
        let no_div = settings.iter().find(|s| s.name == "no_diversity").unwrap();
        assert_eq!(no_div.weights, RewardWeights { gamma: 0.0, ..base });
    }

    #[test]
    fn stage_suite_has_two_rows_per_seed() {
        let pack = build_pack(&make_character(1), 0, PackSizes::default()).unwrap();
        let scorer = BuiltinScorer::default();
        let mut base = ExperimentConfig::toy();
        base.shape.hidden = [8, 8];
        base.sft.steps = 2;
        base.grpo.iterations = 1;
        base.grpo.prompt_batch = 1;
        base.grpo.group_size = 2;
        base.sampler.train_steps = 6;
        base.sampler.eval_steps = 4;
        base.eval_repeats = 1;
        let rows = run_ablation(AblationSuite::Stage, &pack, &base, &[0, 1], &scorer).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows.iter().filter(|r| r.seed == 1).count(), 2);
        assert_ne!(rows[0].report.config_hash, rows[1].report.config_hash);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ablation.csv");
        write_ablation_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("setting,seed,clip_i_analogue"));
        assert_eq!(text.lines().count(), 5);
    }
}
