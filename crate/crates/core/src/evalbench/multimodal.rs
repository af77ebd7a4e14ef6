//! Query to response to instruction to image, and multiple-choice accuracy.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{generate_images, image_metrics, MetricsReport};
use crate::config::config_hash;
use crate::encoders::Scorer;
use crate::flowgen::{SamplerConfig, VelocityField};
use crate::rng::{self, streams};
use crate::sft::{task_prompt, tokenize, TaskKind, TinyLM};
use crate::toyworld::{
    instruction_text, mcq_item, CharacterPack, McqItem, Pose, PromptSpec, Quadrant, Shape, Tone, ToyImage, VqaKind,
    PALETTE,
};
use crate::{Error, Result};

/// Longest generated response or reasoning, in tokens.
const MAX_RESPONSE_TOKENS: usize = 32;

/// The text side of a role-play model.
pub trait TextModel {
    /// Generated text for `input` under `task`.
    fn respond(&self, task: TaskKind, input: &str) -> Result<String>;
    /// Log-likelihood of `option` as the answer to `question` under `task`.
    fn option_log_likelihood(&self, task: TaskKind, question: &str, option: &str) -> Result<f64>;
}

impl TextModel for TinyLM {
    fn respond(&self, task: TaskKind, input: &str) -> Result<String> {
        let prompt = self.vocab().encode(&task_prompt(task, input))?;
        Ok(self.vocab().decode(&self.generate(&prompt, MAX_RESPONSE_TOKENS)?))
    }

    fn option_log_likelihood(&self, task: TaskKind, question: &str, option: &str) -> Result<f64> {
        let prompt = self.vocab().encode(&task_prompt(task, question))?;
        self.log_likelihood(&prompt, &self.vocab().encode(option)?)
    }
}

/// Fraction of items whose highest-likelihood option is the keyed one.
/// Ties go to the earliest option.
pub fn mcq_accuracy(lm: &dyn TextModel, task: TaskKind, items: &[McqItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("no multiple-choice items".into()));
    }
    let mut correct = 0usize;
    for (i, item) in items.iter().enumerate() {
        let key = item
            .answer_index()
            .ok_or_else(|| Error::schema(format!("items[{i}].answer_key"), "must be one of A, B, C, D"))?;
        let mut best = (0, f64::NEG_INFINITY);
        for (j, option) in item.options.iter().enumerate() {
            let ll = lm.option_log_likelihood(task, &item.question, option)?;
            if ll > best.1 {
                best = (j, ll);
            }
        }
        correct += usize::from(best.0 == key);
    }
    Ok(correct as f64 / items.len() as f64)
}

/// Four-option versions of the pack's visual questions, with distractors from
/// each question's answer domain.
pub fn vqa_mcq_items(pack: &CharacterPack, seed: u64) -> Vec<McqItem> {
    let colors: Vec<&str> = PALETTE.iter().map(|(n, _)| *n).collect();
    let shapes: Vec<&str> = Shape::ALL.iter().map(|s| s.name()).collect();
    let quadrants: Vec<&str> = Quadrant::ALL.iter().map(|q| q.name()).collect();
    let mut rng = rng::stream(seed, streams::EVAL);
    pack.vqa
        .iter()
        .map(|v| {
            let domain = match v.question.kind {
                VqaKind::DominantColor => &colors,
                VqaKind::Shape => &shapes,
                VqaKind::MarkerQuadrant => &quadrants,
            };
            mcq_item(v.question.text.clone(), &v.answer, domain, &mut rng)
        })
        .collect()
}

fn first_match<'a>(tokens: &[String], names: impl IntoIterator<Item = &'a str>) -> Option<&'a str> {
    let names: Vec<&str> = names.into_iter().collect();
    tokens.iter().find_map(|t| names.iter().copied().find(|n| *n == t))
}

/// Slot-fills the instruction template from generated text. Each slot takes
/// the first matching token; unfilled slots stay as `?`.
pub fn fill_instruction(pack: &CharacterPack, generated: &str) -> String {
    let tokens = tokenize(generated);
    let color = first_match(&tokens, PALETTE.iter().map(|(n, _)| *n)).unwrap_or("?");
    let shape = first_match(&tokens, Shape::ALL.iter().map(|s| s.name())).unwrap_or("?");
    let pose = first_match(&tokens, Pose::ALL.iter().map(|p| p.name())).unwrap_or("?");
    let tone = first_match(&tokens, Tone::ALL.iter().map(|t| t.name())).unwrap_or("?");
    format!("draw {} as a {color} {shape} , pose {pose} , light {tone}", pack.spec.char_id)
}

/// Pack prompt whose canonical instruction shares the most tokens with
/// `instruction`; `None` on a tie or no overlap.
pub fn map_instruction(pack: &CharacterPack, instruction: &str) -> Option<PromptSpec> {
    let words: HashSet<String> = tokenize(instruction).into_iter().collect();
    let mut best: Option<(usize, PromptSpec)> = None;
    let mut tied = false;
    for p in pack.prompts() {
        let canon: HashSet<String> = tokenize(&instruction_text(&pack.spec, &p)).into_iter().collect();
        let overlap = canon.intersection(&words).count();
        match &best {
            Some((b, _)) if overlap < *b => {}
            Some((b, _)) if overlap == *b => tied = true,
            _ => {
                best = Some((overlap, p));
                tied = false;
            }
        }
    }
    match best {
        Some((n, p)) if n > 0 && !tied => Some(p),
        _ => None,
    }
}

/// Texts produced for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub query: String,
    pub response: String,
    pub thinking: String,
    pub instruction: String,
    /// `None` records a mapping failure.
    pub prompt: Option<PromptSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalOutcome {
    pub report: MetricsReport,
    pub transcripts: Vec<Transcript>,
    /// One image per successfully mapped query, in query order.
    pub images: Vec<ToyImage>,
}

/// Runs the role-play pipeline on every query. Image seeds are indexed by
/// position among the mapped queries, so the images equal those of
/// [`super::eval_t2i`] on the mapped prompts.
pub fn eval_multimodal(
    velocity: &VelocityField,
    lm: &dyn TextModel,
    pack: &CharacterPack,
    queries: &[String],
    sampler: &SamplerConfig,
    scorer: &dyn Scorer,
) -> Result<MultimodalOutcome> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("no queries to evaluate".into()));
    }
    sampler.validate()?;
    let mut transcripts = Vec::with_capacity(queries.len());
    for query in queries {
        let response = lm.respond(TaskKind::Chat, query)?;
        let thinking = lm.respond(TaskKind::Think, query)?;
        let instruction = fill_instruction(pack, &format!("{thinking} {response}"));
        let prompt = map_instruction(pack, &instruction);
        transcripts.push(Transcript { query: query.clone(), response, thinking, instruction, prompt });
    }
    let mapped: Vec<PromptSpec> = transcripts.iter().filter_map(|t| t.prompt.clone()).collect();
    if mapped.is_empty() {
        return Err(Error::InvalidArgument("no instruction could be mapped to a prompt".into()));
    }
    let images = generate_images(velocity, pack, &mapped, sampler, scorer)?;
    let hash = config_hash(&(sampler, queries))?;
    let mut report = image_metrics(scorer, pack, &images, &mapped, hash)?;
    report.mapping_failures = Some(queries.len() - mapped.len());
    report.kqa_accuracy = Some(mcq_accuracy(lm, TaskKind::Kqa, &pack.mcq)?);
    let vqa = vqa_mcq_items(pack, sampler.seed);
    if !vqa.is_empty() {
        report.vqa_accuracy = Some(mcq_accuracy(lm, TaskKind::Vqa, &vqa)?);
    }
    report.validate()?;
    Ok(MultimodalOutcome { report, transcripts, images })
}
