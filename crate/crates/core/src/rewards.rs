//! Composite reward for character-consistent generation.
//!
//! `R = α·r_align + β_vqa·r_consist + γ·r_div + δ·p_sim`, where
//!
//! * `r_align` is the semantic cosine between the image and the prompt,
//! * `r_consist` is 1 when the pixel oracle answers a trait question correctly,
//! * `r_div` is the mean pairwise perceptual distance within the group,
//! * `p_sim ≤ 0` penalizes structural similarity to the training images that
//!   falls outside the band `[τ_low, τ_high]`.

use std::collections::HashMap;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::encoders::{cosine, encode_prompt, EmbedVector, EncoderKind, Scorer};
use crate::rng::Rng;
use crate::toyworld::{vqa_oracle, CharacterPack, PromptSpec, ToyImage, VqaItem, VqaKind, VqaQuestion};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub alpha: f64,
    pub beta_vqa: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { alpha: 0.45, beta_vqa: 0.30, gamma: 0.10, delta: 0.15 }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in
            [("alpha", self.alpha), ("beta_vqa", self.beta_vqa), ("gamma", self.gamma), ("delta", self.delta)]
        {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("rewards.weights.{name}"), "must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub tau_high: f64,
    pub tau_low: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { tau_high: 0.9, tau_low: 0.5 }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_low < self.tau_high) {
            return Err(Error::config("rewards.thresholds.tau_low", "must be below tau_high"));
        }
        Ok(())
    }
}

/// The four reward terms of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardParts {
    pub r_align: f64,
    pub r_consist: f64,
    pub r_div: f64,
    pub p_sim: f64,
}

pub fn total_reward(parts: &RewardParts, w: &RewardWeights) -> f64 {
    w.alpha * parts.r_align + w.beta_vqa * parts.r_consist + w.gamma * parts.r_div + w.delta * parts.p_sim
}

/// Semantic cosine between an image and a precomputed prompt embedding.
pub fn alignment_reward_with(scorer: &dyn Scorer, image: &ToyImage, prompt_embedding: &EmbedVector) -> Result<f64> {
    Ok(cosine(&scorer.embed(image, EncoderKind::Semantic)?, prompt_embedding))
}

pub fn alignment_reward(
    scorer: &dyn Scorer,
    image: &ToyImage,
    prompt: &PromptSpec,
    pack: &CharacterPack,
) -> Result<f64> {
    alignment_reward_with(scorer, image, &encode_prompt(scorer, prompt, pack)?)
}

/// 1 when the oracle's answer about `image` matches `truth`, else 0.
pub fn consistency_reward(image: &ToyImage, question: &VqaQuestion, truth: &str) -> f64 {
    if vqa_oracle(image, question) == truth {
        1.0
    } else {
        0.0
    }
}

/// Mean pairwise perceptual distance over ordered pairs `i ≠ j`.
pub fn group_diversity(scorer: &dyn Scorer, images: &[ToyImage]) -> Result<f64> {
    let g = images.len();
    if g < 2 {
        return Err(Error::InvalidArgument(format!("group diversity needs at least 2 images, got {g}")));
    }
    let mut sum = 0.0;
    for i in 0..g {
        for j in 0..g {
            if i != j {
                sum += scorer.perceptual_distance(&images[i], &images[j])?;
            }
        }
    }
    Ok(sum / (g * (g - 1)) as f64)
}

/// Dual-threshold penalty on the maximum training-set similarity.
pub fn trainset_penalty(s_max: f64, th: &Thresholds) -> f64 {
    if s_max > th.tau_high {
        -(s_max - th.tau_high)
    } else if s_max < th.tau_low {
        -(th.tau_low - s_max)
    } else {
        0.0
    }
}

/// Largest cosine between `embedding` and any of `references`.
pub fn max_similarity(embedding: &EmbedVector, references: &[EmbedVector]) -> Result<f64> {
    references
        .iter()
        .map(|r| cosine(embedding, r))
        .reduce(f64::max)
        .ok_or_else(|| Error::InvalidArgument("empty training set".into()))
}

/// Penalty of an image against a training set, with its `s_max`.
pub fn trainset_penalty_for(
    scorer: &dyn Scorer,
    image: &ToyImage,
    trainset: &[&ToyImage],
    th: &Thresholds,
) -> Result<(f64, f64)> {
    if trainset.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let refs: Vec<EmbedVector> =
        trainset.iter().map(|t| scorer.embed(t, EncoderKind::Structure)).collect::<Result<_>>()?;
    let s_max = max_similarity(&scorer.embed(image, EncoderKind::Structure)?, &refs)?;
    Ok((trainset_penalty(s_max, th), s_max))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleReward {
    pub r_align: f64,
    pub r_consist: f64,
    pub p_sim: f64,
    pub s_max: f64,
    pub total: f64,
}

/// Rewards for one group; `r_div` is shared by every sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub samples: Vec<SampleReward>,
    pub r_div: f64,
}

impl RewardBreakdown {
    pub fn totals(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.total).collect()
    }
}

/// Consistency question selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VqaMode {
    /// One pack item drawn per sample.
    #[default]
    Single,
    /// Mean over one item of every question kind.
    Averaged,
}

/// Per-character state reused across groups: training-set structure
/// embeddings, prompt embeddings and the trait questions.
pub struct RewardContext<'a> {
    scorer: &'a dyn Scorer,
    pack: &'a CharacterPack,
    trainset: Vec<EmbedVector>,
    prompts: HashMap<PromptSpec, EmbedVector>,
    per_kind: Vec<&'a VqaItem>,
}

impl<'a> RewardContext<'a> {
    pub fn new(scorer: &'a dyn Scorer, pack: &'a CharacterPack) -> Result<Self> {
        let trainset = pack
            .core_images
            .iter()
            .map(|c| scorer.embed(&c.image, EncoderKind::Structure))
            .collect::<Result<Vec<_>>>()?;
        let mut prompts = HashMap::new();
        for p in pack.prompts() {
            let e = encode_prompt(scorer, &p, pack)?;
            prompts.insert(p, e);
        }
        let per_kind = VqaKind::ALL.iter().filter_map(|k| pack.vqa.iter().find(|v| v.question.kind == *k)).collect();
        Ok(Self { scorer, pack, trainset, prompts, per_kind })
    }

    pub fn scorer(&self) -> &'a dyn Scorer {
        self.scorer
    }

    pub fn pack(&self) -> &'a CharacterPack {
        self.pack
    }

    pub fn trainset(&self) -> &[EmbedVector] {
        &self.trainset
    }

    pub fn prompt_embedding(&self, prompt: &PromptSpec) -> Result<&EmbedVector> {
        self.prompts.get(prompt).ok_or_else(|| Error::UnknownCharacter(prompt.char_id.clone()))
    }

    /// Scores a group of images generated for `prompt`.
    pub fn score_group(
        &self,
        images: &[ToyImage],
        prompt: &PromptSpec,
        weights: &RewardWeights,
        thresholds: &Thresholds,
        mode: VqaMode,
        rng: &mut Rng,
    ) -> Result<RewardBreakdown> {
        let r_div = group_diversity(self.scorer, images)?;
        let target = self.prompt_embedding(prompt)?;
        let mut samples = Vec::with_capacity(images.len());
        for image in images {
            let r_align = alignment_reward_with(self.scorer, image, target)?;
            let r_consist = match mode {
                VqaMode::Single => {
                    let item = self
                        .pack
                        .vqa
                        .choose(rng)
                        .ok_or_else(|| Error::InvalidArgument("pack has no VQA items".into()))?;
                    consistency_reward(image, &item.question, &item.answer)
                }
                VqaMode::Averaged => {
                    self.per_kind.iter().map(|v| consistency_reward(image, &v.question, &v.answer)).sum::<f64>()
                        / self.per_kind.len().max(1) as f64
                }
            };
            let s_max = max_similarity(&self.scorer.embed(image, EncoderKind::Structure)?, &self.trainset)?;
            let p_sim = trainset_penalty(s_max, thresholds);
            let total = total_reward(&RewardParts { r_align, r_consist, r_div, p_sim }, weights);
            samples.push(SampleReward { r_align, r_consist, p_sim, s_max, total });
        }
        Ok(RewardBreakdown { samples, r_div })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::BuiltinScorer;
    use crate::rng::stream;
    use crate::toyworld::{build_pack, make_character, render_scene, PackSizes};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng as _;

    fn pack() -> CharacterPack {
        build_pack(&make_character(5), 1, PackSizes::default()).unwrap()
    }

    #[test]
    fn total_reward_examples() {
        let w = RewardWeights::default();
        let t = |a, c, d, p| total_reward(&RewardParts { r_align: a, r_consist: c, r_div: d, p_sim: p }, &w);
        assert!((t(1.0, 1.0, 0.0, 0.0) - 0.75).abs() < 1e-12);
        assert!((t(0.8, 1.0, 0.2, -0.05) - 0.6725).abs() < 1e-12);
        assert_eq!(t(0.0, 0.0, 0.0, 0.0), 0.0);
    }

    #[test]
    fn penalty_examples_and_continuity() {
        let th = Thresholds::default();
        assert!((trainset_penalty(0.95, &th) + 0.05).abs() < 1e-12);
        assert_eq!(trainset_penalty(0.70, &th), 0.0);
        assert!((trainset_penalty(0.30, &th) + 0.20).abs() < 1e-12);
        for tau in [th.tau_low, th.tau_high] {
            for s in [tau - 1e-6, tau, tau + 1e-6] {
                assert!(trainset_penalty(s, &th).abs() <= 1e-6 + 1e-15);
            }
        }
    }

    #[test]
    fn canonical_render_is_perfectly_aligned() {
        let pack = pack();
        let scorer = BuiltinScorer::default();
        for p in pack.prompts() {
            let img = render_scene(&pack.spec, &p, 0).unwrap();
            assert!((alignment_reward(&scorer, &img, &p, &pack).unwrap() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn alignment_is_an_independent_dot_product() {
        let pack = pack();
        let scorer = BuiltinScorer::default();
        let mut rng = stream(8, 0);
        let p = &pack.prompts()[2];
        let target = encode_prompt(&scorer, p, &pack).unwrap();
        for _ in 0..1000 {
            let img = ToyImage::new((0..crate::toyworld::PIXELS).map(|_| rng.random::<f32>()).collect()).unwrap();
            let r = alignment_reward(&scorer, &img, p, &pack).unwrap();
            let e = scorer.embed(&img, EncoderKind::Semantic).unwrap();
            let dot: f64 = e.values().iter().zip(target.values()).map(|(a, b)| a * b).sum();
            assert!((r - dot).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn consistency_on_pack_items() {
        let pack = pack();
        for item in &pack.vqa {
            let img = &pack.core_images[item.image_index].image;
            assert_eq!(consistency_reward(img, &item.question, &item.answer), 1.0);
            assert_eq!(consistency_reward(img, &item.question, "definitely-wrong"), 0.0);
            if item.question.kind != VqaKind::MarkerQuadrant {
                assert_eq!(consistency_reward(&ToyImage::zeros(), &item.question, &item.answer), 0.0);
            }
        }
    }

    #[test]
    fn diversity_examples() {
        let scorer = BuiltinScorer::default();
        let same = vec![ToyImage::filled(0.3); 8];
        assert_eq!(group_diversity(&scorer, &same).unwrap(), 0.0);
        let pair = [ToyImage::zeros(), ToyImage::filled(0.5)];
        assert!((group_diversity(&scorer, &pair).unwrap() - 0.5).abs() < 1e-12);
        assert!(group_diversity(&scorer, &pair[..1]).is_err());

        let pack = pack();
        let mut images: Vec<ToyImage> = pack.core_images.iter().map(|c| c.image.clone()).collect();
        let base = group_diversity(&scorer, &images).unwrap();
        let mut rng = stream(1, 1);
        for _ in 0..50 {
            images.shuffle(&mut rng);
            assert!((group_diversity(&scorer, &images).unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn penalty_against_own_trainset() {
        let pack = pack();
        let scorer = BuiltinScorer::default();
        let refs = pack.core_image_refs();
        let (p, s) = trainset_penalty_for(&scorer, refs[0], &refs, &Thresholds::default()).unwrap();
        assert!((s - 1.0).abs() < 1e-9);
        assert!((p + 0.1).abs() < 1e-9);
        assert!(trainset_penalty_for(&scorer, refs[0], &[], &Thresholds::default()).is_err());
    }

    #[test]
    fn group_scores_respect_breakdown_invariants() {
        let pack = pack();
        let scorer = BuiltinScorer::default();
        let ctx = RewardContext::new(&scorer, &pack).unwrap();
        let prompt = pack.prompts()[0].clone();
        let images: Vec<ToyImage> = pack.core_images.iter().take(4).map(|c| c.image.clone()).collect();
        let w = RewardWeights::default();
        let b =
            ctx.score_group(&images, &prompt, &w, &Thresholds::default(), VqaMode::Single, &mut stream(0, 0)).unwrap();
        assert!((0.0..=1.0).contains(&b.r_div));
        for s in &b.samples {
            assert!(s.r_consist == 0.0 || s.r_consist == 1.0);
            assert!(s.p_sim <= 0.0);
            let parts = RewardParts { r_align: s.r_align, r_consist: s.r_consist, r_div: b.r_div, p_sim: s.p_sim };
            assert!((s.total - total_reward(&parts, &w)).abs() < 1e-12);
        }
        let avg = ctx
            .score_group(&images, &prompt, &w, &Thresholds::default(), VqaMode::Averaged, &mut stream(0, 0))
            .unwrap();
        assert!(avg.samples.iter().all(|s| s.r_consist == 1.0));
    }

    proptest! {
        #[test]
        fn total_matches_independent_evaluation(a in -1.0f64..1.0, c in 0u8..2, d in 0.0f64..1.0, p in -1.0f64..0.0) {
            let w = RewardWeights::default();
            let independent = 0.45 * a + 0.30 * c as f64 + 0.10 * d + 0.15 * p;
            let got = total_reward(&RewardParts { r_align: a, r_consist: c as f64, r_div: d, p_sim: p }, &w);
            prop_assert!((got - independent).abs() < 1e-12);
        }

        #[test]
        fn doubling_a_weight_doubles_its_contribution(a in -1.0f64..1.0, c in 0u8..2, d in 0.0f64..1.0, p in -1.0f64..0.0, which in 0usize..4) {
            let parts = RewardParts { r_align: a, r_consist: c as f64, r_div: d, p_sim: p };
            let base = RewardWeights::default();
            let mut doubled = base;
            let contribution = match which {
                0 => { doubled.alpha *= 2.0; base.alpha * a }
                1 => { doubled.beta_vqa *= 2.0; base.beta_vqa * c as f64 }
                2 => { doubled.gamma *= 2.0; base.gamma * d }
                _ => { doubled.delta *= 2.0; base.delta * p }
            };
            let diff = total_reward(&parts, &doubled) - total_reward(&parts, &base);
            prop_assert!((diff - contribution).abs() < 1e-12);
        }

        #[test]
        fn penalty_is_nonpositive_and_zero_inside_band(s in -1.0f64..1.0) {
            let th = Thresholds::default();
            let p = trainset_penalty(s, &th);
            prop_assert!(p <= 0.0);
            prop_assert_eq!(p == 0.0, (th.tau_low..=th.tau_high).contains(&s));
        }
    }
}
