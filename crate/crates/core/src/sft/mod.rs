//! Unified supervised fine-tuning.
//!
//! Four text tasks (role-play chat, thinking, visual QA, knowledge QA) train a
//! small language model with next-token cross-entropy while the image
//! generator trains with the flow-matching loss. Batches mix the two families
//! at a fixed ratio, and each step applies one optimizer update to both models
//! from the weighted sum of all component losses.

mod lm;
mod mixer;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use lm::{softmax, tokenize, TinyLM, Vocab, BOS, CONTEXT_WINDOW, EOS, SEP};
pub use mixer::{mix_batches, MixedBatch, MixedBatches, MixerConfig};

use crate::encoders::{encode_prompt, Scorer};
use crate::flowgen::{flow_loss_grad, flow_sft_loss, CondToken, VelocityField};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{self, streams, Rng};
use crate::toyworld::{CharacterPack, Pose, Quadrant, Shape, Tone, PALETTE};
use crate::{Error, Result};

/// Per-task multipliers on the summed objective; all 1 by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskWeights {
    pub chat: f64,
    pub think: f64,
    pub vqa: f64,
    pub kqa: f64,
    pub flow: f64,
}

impl Default for TaskWeights {
    fn default() -> Self {
        Self { chat: 1.0, think: 1.0, vqa: 1.0, kqa: 1.0, flow: 1.0 }
    }
}

impl TaskWeights {
    fn of(&self, kind: TaskKind) -> f64 {
        match kind {
            TaskKind::Chat => self.chat,
            TaskKind::Think => self.think,
            TaskKind::Vqa => self.vqa,
            TaskKind::Kqa => self.kqa,
            TaskKind::T2i => self.flow,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub optimizer: AdamWConfig,
    /// Probability of replacing the image condition by the unconditional token.
    pub p_drop: f64,
    pub weights: TaskWeights,
    /// Embedding width of the text model.
    pub lm_dim: usize,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-5,
            steps: 500,
            optimizer: AdamWConfig::default(),
            p_drop: 0.1,
            weights: TaskWeights::default(),
            lm_dim: 32,
            seed: 0,
        }
    }
}

impl SftConfig {
    /// Learning rate that makes the toy models move within a few hundred steps.
    pub const TOY_LEARNING_RATE: f64 = 1e-3;

    pub fn toy() -> Self {
        Self { learning_rate: Self::TOY_LEARNING_RATE, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("sft.learning_rate", "must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::config("sft.steps", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(Error::config("sft.p_drop", "must lie in [0, 1]"));
        }
        let w = self.weights;
        if [w.chat, w.think, w.vqa, w.kqa, w.flow].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::config("sft.weights", "must be non-negative"));
        }
        if self.lm_dim == 0 {
            return Err(Error::config("sft.lm_dim", "must be positive"));
        }
        self.optimizer.validate("sft.optimizer")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Chat,
    Think,
    Vqa,
    Kqa,
    T2i,
}

impl TaskKind {
    pub const TEXT: [TaskKind; 4] = [TaskKind::Chat, TaskKind::Think, TaskKind::Vqa, TaskKind::Kqa];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Chat => "chat",
            TaskKind::Think => "think",
            TaskKind::Vqa => "vqa",
            TaskKind::Kqa => "kqa",
            TaskKind::T2i => "t2i",
        }
    }
}

/// Text-model input for a task: the task name and a colon, then the text.
/// Chat and thinking share user inputs, so the prefix is what tells them apart.
pub fn task_prompt(kind: TaskKind, text: &str) -> String {
    format!("{} : {text}", kind.name())
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskPayload {
    /// Prompt tokens and target tokens (the target ends with `<eos>`).
    Text { prompt: Vec<usize>, target: Vec<usize> },
    /// Core-image index and its condition embedding.
    Image { core_index: usize, cond: CondToken },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSample {
    pub kind: TaskKind,
    pub payload: TaskPayload,
}

/// Vocabulary covering every text in the pack, the task prefixes and every
/// trait name, so any answer option can be scored.
pub fn pack_vocab(pack: &CharacterPack) -> Vocab {
    let mut extra: Vec<String> = TaskKind::TEXT.iter().map(|k| task_prompt(*k, "")).collect();
    extra.extend(PALETTE.iter().map(|(n, _)| n.to_string()));
    extra.extend(Shape::ALL.iter().map(|s| s.name().to_string()));
    extra.extend(Quadrant::ALL.iter().map(|q| q.name().to_string()));
    extra.extend(Pose::ALL.iter().map(|p| p.name().to_string()));
    extra.extend(Tone::ALL.iter().map(|t| t.name().to_string()));
    Vocab::build(pack.texts().into_iter().chain(extra.iter().map(String::as_str)))
}

fn text_sample(vocab: &Vocab, kind: TaskKind, prompt: &str, target: &str) -> Result<TaskSample> {
    let mut target = vocab.encode(target)?;
    target.push(EOS);
    Ok(TaskSample { kind, payload: TaskPayload::Text { prompt: vocab.encode(&task_prompt(kind, prompt))?, target } })
}

/// Sample pools for the two families: `(t2i, vlm)`.
pub fn build_tasks(
    pack: &CharacterPack,
    vocab: &Vocab,
    scorer: &dyn Scorer,
) -> Result<(Vec<TaskSample>, Vec<TaskSample>)> {
    let mut vlm = Vec::new();
    for d in &pack.dialogues {
        vlm.push(text_sample(vocab, TaskKind::Chat, &d.user_input, &d.response)?);
    }
    for s in &pack.mm_samples {
        vlm.push(text_sample(vocab, TaskKind::Chat, &s.user_input, &s.response)?);
        vlm.push(text_sample(vocab, TaskKind::Think, &s.user_input, &s.thinking)?);
    }
    for v in &pack.vqa {
        vlm.push(text_sample(vocab, TaskKind::Vqa, &v.question.text, &v.answer)?);
    }
    for k in &pack.kqa {
        vlm.push(text_sample(vocab, TaskKind::Kqa, &k.question, &k.answer)?);
    }
    let mut t2i = Vec::with_capacity(pack.core_images.len());
    for (i, core) in pack.core_images.iter().enumerate() {
        let cond = CondToken::from_embedding(&encode_prompt(scorer, &core.prompt, pack)?);
        t2i.push(TaskSample { kind: TaskKind::T2i, payload: TaskPayload::Image { core_index: i, cond } });
    }
    Ok((t2i, vlm))
}

/// Component losses of one step. Absent components are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub step: usize,
    pub l_chat: Option<f64>,
    pub l_think: Option<f64>,
    pub l_vqa: Option<f64>,
    pub l_kqa: Option<f64>,
    pub l_flow: Option<f64>,
    pub total: f64,
}

impl SftRecord {
    pub fn component(&self, kind: TaskKind) -> Option<f64> {
        match kind {
            TaskKind::Chat => self.l_chat,
            TaskKind::Think => self.l_think,
            TaskKind::Vqa => self.l_vqa,
            TaskKind::Kqa => self.l_kqa,
            TaskKind::T2i => self.l_flow,
        }
    }

    fn set(&mut self, kind: TaskKind, value: f64) {
        let slot = match kind {
            TaskKind::Chat => &mut self.l_chat,
            TaskKind::Think => &mut self.l_think,
            TaskKind::Vqa => &mut self.l_vqa,
            TaskKind::Kqa => &mut self.l_kqa,
            TaskKind::T2i => &mut self.l_flow,
        };
        *slot = Some(value);
    }
}

fn component_name(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::Chat => "l_chat",
        TaskKind::Think => "l_think",
        TaskKind::Vqa => "l_vqa",
        TaskKind::Kqa => "l_kqa",
        TaskKind::T2i => "l_flow",
    }
}

/// Losses and gradients of one batch. Each component is the mean over its
/// samples in the batch; the total is the weighted sum of present components.
/// Gradients of the total are accumulated into `grad_velocity` and `grad_lm`.
#[allow(clippy::too_many_arguments)]
pub fn sft_batch_grad(
    velocity: &VelocityField,
    lm: &TinyLM,
    pack: &CharacterPack,
    samples: &[&TaskSample],
    config: &SftConfig,
    rng: &mut Rng,
    grad_velocity: &mut [f64],
    grad_lm: &mut [f64],
) -> Result<SftRecord> {
    let mut record =
        SftRecord { step: 0, l_chat: None, l_think: None, l_vqa: None, l_kqa: None, l_flow: None, total: 0.0 };
    for kind in TaskKind::TEXT {
        let group: Vec<_> = samples.iter().filter(|s| s.kind == kind).collect();
        if group.is_empty() {
            continue;
        }
        let scale = config.weights.of(kind) / group.len() as f64;
        let mut sum = 0.0;
        for s in &group {
            let TaskPayload::Text { prompt, target } = &s.payload else {
                return Err(Error::InvalidArgument(format!("{kind:?} sample without text payload")));
            };
            sum += lm.ce_loss_grad(prompt, target, scale, grad_lm)?;
        }
        record.set(kind, sum / group.len() as f64);
    }
    let images: Vec<(&[f32], &CondToken)> = samples
        .iter()
        .filter(|s| s.kind == TaskKind::T2i)
        .map(|s| match &s.payload {
            TaskPayload::Image { core_index, cond } => pack
                .core_images
                .get(*core_index)
                .map(|c| (c.image.as_slice(), cond))
                .ok_or_else(|| Error::InvalidArgument(format!("core index {core_index} out of range"))),
            TaskPayload::Text { .. } => Err(Error::InvalidArgument("t2i sample without image payload".into())),
        })
        .collect::<Result<_>>()?;
    if !images.is_empty() {
        let x0: Vec<Vec<f64>> = images.iter().map(|(x, _)| x.iter().map(|&v| v as f64).collect()).collect();
        let batch: Vec<(&[f64], &CondToken)> =
            x0.iter().map(Vec::as_slice).zip(images.iter().map(|(_, c)| *c)).collect();
        let scale = config.weights.flow / batch.len() as f64;
        let losses = flow_loss_grad(velocity, &batch, rng, config.p_drop, scale, grad_velocity)?;
        record.set(TaskKind::T2i, losses.iter().sum::<f64>() / losses.len() as f64);
    }
    for kind in TaskKind::TEXT.into_iter().chain([TaskKind::T2i]) {
        if let Some(v) = record.component(kind) {
            if !v.is_finite() {
                return Err(Error::NumericalDivergence(format!("non-finite {}", component_name(kind))));
            }
            record.total += config.weights.of(kind) * v;
        }
    }
    Ok(record)
}

/// Runs `config.steps` mixed-batch updates on both models in place and
/// returns the per-step loss history.
pub fn unified_sft_run(
    velocity: &mut VelocityField,
    lm: &mut TinyLM,
    pack: &CharacterPack,
    config: &SftConfig,
    mixer: &MixerConfig,
    scorer: &dyn Scorer,
) -> Result<Vec<SftRecord>> {
    config.validate()?;
    pack.validate()?;
    let (t2i, vlm) = build_tasks(pack, lm.vocab(), scorer)?;
    let batches = mix_batches(t2i.len(), vlm.len(), *mixer)?;
    let mut rng = rng::stream(config.seed, streams::SFT);
    let mut opt_v = AdamW::new(config.optimizer, velocity.params().len());
    let mut opt_lm = AdamW::new(config.optimizer, lm.params().len());
    let mut history = Vec::with_capacity(config.steps);
    for (step, batch) in batches.take(config.steps).enumerate() {
        let samples: Vec<&TaskSample> =
            batch.t2i.iter().map(|&i| &t2i[i]).chain(batch.vlm.iter().map(|&i| &vlm[i])).collect();
        let mut g_v = vec![0.0; velocity.params().len()];
        let mut g_lm = vec![0.0; lm.params().len()];
        let mut record = sft_batch_grad(velocity, lm, pack, &samples, config, &mut rng, &mut g_v, &mut g_lm).map_err(
            |e| match e {
                Error::NumericalDivergence(m) => Error::NumericalDivergence(format!("{m} at step {step}")),
                other => other,
            },
        )?;
        record.step = step;
        opt_v.step(config.learning_rate, velocity.params_mut(), &g_v);
        opt_lm.step(config.learning_rate, lm.params_mut(), &g_lm);
        history.push(record);
    }
    Ok(history)
}

/// Mean flow loss over every core image, `draws` noise draws each, from a
/// fixed stream so values are comparable across checkpoints.
pub fn evaluate_flow_loss(
    velocity: &VelocityField,
    pack: &CharacterPack,
    scorer: &dyn Scorer,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = rng::stream(seed, streams::EVAL);
    let mut total = 0.0;
    for core in &pack.core_images {
        let cond = CondToken::from_embedding(&encode_prompt(scorer, &core.prompt, pack)?);
        let x0 = core.image.to_f64();
        for _ in 0..draws {
            total += flow_sft_loss(velocity, &x0, &cond, &mut rng, 0.0)?;
        }
    }
    Ok(total / (draws * pack.core_images.len()) as f64)
}

/// Writes the loss history as CSV (`step,l_chat,l_think,l_vqa,l_kqa,l_flow,total`).
pub fn write_history_csv(history: &[SftRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidArgument(format!("{other:?}")),
    })?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::BuiltinScorer;
    use crate::flowgen::MlpShape;
    use crate::toyworld::{build_pack, make_character, PackSizes};

    fn setup() -> (CharacterPack, VelocityField, TinyLM) {
        let pack = build_pack(&make_character(2), 0, PackSizes::default()).unwrap();
        let shape = MlpShape { hidden: [16, 16], ..MlpShape::image() };
        let velocity = VelocityField::new(shape, 1).unwrap();
        let lm = TinyLM::new(pack_vocab(&pack), 8, 1).unwrap();
        (pack, velocity, lm)
    }

    #[test]
    fn total_gradient_is_sum_of_component_gradients() {
        let (pack, velocity, lm) = setup();
        let scorer = BuiltinScorer::default();
        let (t2i, vlm) = build_tasks(&pack, lm.vocab(), &scorer).unwrap();
        let mut samples: Vec<&TaskSample> = t2i.iter().take(3).collect();
        for kind in TaskKind::TEXT {
            samples.extend(vlm.iter().filter(|s| s.kind == kind).take(2));
        }
        let run = |weights: TaskWeights| {
            let config = SftConfig { weights, ..SftConfig::toy() };
            let mut gv = vec![0.0; velocity.params().len()];
            let mut gl = vec![0.0; lm.params().len()];
            let r = sft_batch_grad(&velocity, &lm, &pack, &samples, &config, &mut rng::stream(4, 0), &mut gv, &mut gl)
                .unwrap();
            (r, gv, gl)
        };
        let (full, gv, gl) = run(TaskWeights::default());
        let zero = TaskWeights { chat: 0.0, think: 0.0, vqa: 0.0, kqa: 0.0, flow: 0.0 };
        let singles = [
            TaskWeights { chat: 1.0, ..zero },
            TaskWeights { think: 1.0, ..zero },
            TaskWeights { vqa: 1.0, ..zero },
            TaskWeights { kqa: 1.0, ..zero },
            TaskWeights { flow: 1.0, ..zero },
        ];
        let mut sum_v = vec![0.0; gv.len()];
        let mut sum_l = vec![0.0; gl.len()];
        let mut text_total = 0.0;
        for w in singles {
            let (r, v, l) = run(w);
            sum_v.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
            sum_l.iter_mut().zip(&l).for_each(|(a, b)| *a += b);
            if w.flow == 0.0 {
                text_total += r.total;
            }
        }
        assert!(gv.iter().zip(&sum_v).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(gl.iter().zip(&sum_l).all(|(a, b)| (a - b).abs() < 1e-12));
        // independent recomputation of each text component
        let mut independent = 0.0;
        for kind in TaskKind::TEXT {
            let group: Vec<_> = samples.iter().filter(|s| s.kind == kind).collect();
            let mean = group
                .iter()
                .map(|s| match &s.payload {
                    TaskPayload::Text { prompt, target } => lm.ce_loss(prompt, target).unwrap(),
                    _ => unreachable!(),
                })
                .sum::<f64>()
                / group.len() as f64;
            assert!((full.component(kind).unwrap() - mean).abs() < 1e-9);
            independent += mean;
        }
        assert!((text_total - independent).abs() < 1e-9);
        assert!((full.total - independent - full.l_flow.unwrap()).abs() < 1e-9);
    }

    #[test]
    fn history_records_every_step() {
        let (pack, mut velocity, mut lm) = setup();
        let config = SftConfig { steps: 5, ..SftConfig::toy() };
        let history =
            unified_sft_run(&mut velocity, &mut lm, &pack, &config, &MixerConfig::default(), &BuiltinScorer::default())
                .unwrap();
        assert_eq!(history.len(), 5);
        assert!(history.iter().enumerate().all(|(i, r)| r.step == i && r.l_flow.is_some() && r.total.is_finite()));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        write_history_csv(&history, &path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.starts_with("step,l_chat,l_think,l_vqa,l_kqa,l_flow,total\n"));
        assert_eq!(text.lines().count(), 6);
    }

    #[test]
    fn divergence_names_the_component() {
        let (pack, velocity, lm) = setup();
        let scorer = BuiltinScorer::default();
        let (t2i, _) = build_tasks(&pack, lm.vocab(), &scorer).unwrap();
        let mut params = velocity.params().to_vec();
        let last = params.len() - 1;
        params[last] = 1e200;
        let huge = VelocityField::from_params(*velocity.shape(), params).unwrap();
        let samples: Vec<&TaskSample> = t2i.iter().take(2).collect();
        let mut gv = vec![0.0; huge.params().len()];
        let mut gl = vec![0.0; lm.params().len()];
        let err =
            sft_batch_grad(&huge, &lm, &pack, &samples, &SftConfig::toy(), &mut rng::stream(0, 0), &mut gv, &mut gl)
                .unwrap_err();
        assert!(err.to_string().contains("l_flow"), "{err}");
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = SftConfig { learning_rate: 0.0, ..SftConfig::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("sft.learning_rate"));
        let bad = SftConfig { steps: 0, ..SftConfig::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("sft.steps"));
    }
}
