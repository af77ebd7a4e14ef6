use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{
    jitter_offset, render_scene, vqa_oracle, CharacterSpec, Pose, PromptSpec, Quadrant, Shape, Tone, ToyImage, VqaKind,
    VqaQuestion, PALETTE,
};
use crate::rng::{self, streams};
use crate::{Error, Result};

pub const MIN_CORE_IMAGES: usize = 5;
pub const MAX_CORE_IMAGES: usize = 15;
pub const MIN_DIALOGUES: usize = 150;
pub const MAX_DIALOGUES: usize = 250;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PackSizes {
    pub core_images: usize,
    pub dialogues: usize,
    pub kqa: usize,
    pub mcq: usize,
}

impl Default for PackSizes {
    fn default() -> Self {
        Self { core_images: 10, dialogues: 160, kqa: 10, mcq: 10 }
    }
}

impl PackSizes {
    pub fn validate(&self) -> Result<()> {
        if !(MIN_CORE_IMAGES..=MAX_CORE_IMAGES).contains(&self.core_images) {
            return Err(Error::InvalidSizes(format!(
                "core_images = {} outside [{MIN_CORE_IMAGES}, {MAX_CORE_IMAGES}]",
                self.core_images
            )));
        }
        if !(MIN_DIALOGUES..=MAX_DIALOGUES).contains(&self.dialogues) {
            return Err(Error::InvalidSizes(format!(
                "dialogues = {} outside [{MIN_DIALOGUES}, {MAX_DIALOGUES}]",
                self.dialogues
            )));
        }
        if self.kqa == 0 || self.mcq == 0 {
            return Err(Error::InvalidSizes("kqa and mcq must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoreImage {
    pub image: ToyImage,
    pub prompt: PromptSpec,
    pub jitter_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub user_input: String,
    pub response: String,
}

/// A multimodal role-play sample: query, in-character reply, the reasoning
/// that leads to the picture, and the generation instruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MmSample {
    pub image_index: usize,
    pub user_input: String,
    pub response: String,
    pub thinking: String,
    pub instruction: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KqaItem {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaItem {
    pub image_index: usize,
    pub question: VqaQuestion,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqItem {
    pub question: String,
    pub options: [String; 4],
    /// One of `A`, `B`, `C`, `D`.
    pub answer_key: char,
}

impl McqItem {
    pub fn answer_index(&self) -> Option<usize> {
        match self.answer_key {
            'A' => Some(0),
            'B' => Some(1),
            'C' => Some(2),
            'D' => Some(3),
            _ => None,
        }
    }
}

/// Everything known about one character: profile, reference images, dialogues
/// and the derived annotations used by both training stages.
#[derive(Debug, Clone, PartialEq)]
pub struct CharacterPack {
    pub spec: CharacterSpec,
    pub profile: String,
    pub core_images: Vec<CoreImage>,
    pub dialogues: Vec<Dialogue>,
    pub mm_samples: Vec<MmSample>,
    pub kqa: Vec<KqaItem>,
    pub vqa: Vec<VqaItem>,
    pub mcq: Vec<McqItem>,
}

impl CharacterPack {
    /// Checks schema invariants, naming the first failing field.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let n = self.core_images.len();
        if !(MIN_CORE_IMAGES..=MAX_CORE_IMAGES).contains(&n) {
            return Err(Error::schema(
                "core_images length",
                format!("{n} outside [{MIN_CORE_IMAGES}, {MAX_CORE_IMAGES}]"),
            ));
        }
        for (i, core) in self.core_images.iter().enumerate() {
            if core.prompt.char_id != self.spec.char_id {
                return Err(Error::schema(format!("core_images[{i}].prompt.char_id"), "unknown character"));
            }
        }
        if self.dialogues.is_empty() || self.dialogues.len() > MAX_DIALOGUES {
            return Err(Error::schema(
                "dialogues length",
                format!("{} outside [1, {MAX_DIALOGUES}]", self.dialogues.len()),
            ));
        }
        for (i, s) in self.mm_samples.iter().enumerate() {
            if s.image_index >= n {
                return Err(Error::schema(format!("mm_samples[{i}].image_index"), "out of range"));
            }
        }
        for (i, v) in self.vqa.iter().enumerate() {
            if v.image_index >= n {
                return Err(Error::schema(format!("vqa[{i}].image_index"), "out of range"));
            }
        }
        for (i, m) in self.mcq.iter().enumerate() {
            if m.answer_index().is_none() {
                return Err(Error::schema(format!("mcq[{i}].answer_key"), "must be one of A, B, C, D"));
            }
        }
        Ok(())
    }

    pub fn core_image_refs(&self) -> Vec<&ToyImage> {
        self.core_images.iter().map(|c| &c.image).collect()
    }

    /// Every prompt addressing this character.
    pub fn prompts(&self) -> Vec<PromptSpec> {
        self.spec.prompts()
    }

    /// Every text fragment in the pack, for vocabulary construction.
    pub fn texts(&self) -> Vec<&str> {
        let mut out: Vec<&str> = vec![&self.profile];
        for d in &self.dialogues {
            out.extend([d.user_input.as_str(), d.response.as_str()]);
        }
        for s in &self.mm_samples {
            out.extend([s.user_input.as_str(), s.response.as_str(), s.thinking.as_str(), s.instruction.as_str()]);
        }
        for k in &self.kqa {
            out.extend([k.question.as_str(), k.answer.as_str()]);
        }
        for v in &self.vqa {
            out.extend([v.question.text.as_str(), v.answer.as_str()]);
        }
        for m in &self.mcq {
            out.push(&m.question);
            out.extend(m.options.iter().map(String::as_str));
        }
        out
    }
}

const CATCHPHRASES: [&str; 6] = ["by my stars", "oh splendid", "hold on tight", "what a day", "no doubt", "easy now"];
const HOMES: [&str; 6] =
    ["the glass tower", "the river mill", "the quiet dunes", "the old harbor", "the moss garden", "the cloud library"];
const FAVORITES: [&str; 6] = ["lanterns", "tea", "maps", "thunder", "riddles", "apples"];
const MOODS: [&str; 4] = ["cheerful", "stubborn", "curious", "gentle"];

const GREETINGS: [&str; 8] =
    ["hello", "hi there", "good morning", "hey", "greetings", "good evening", "welcome back", "nice to see you"];
const TOPICS: [(&str, &str); 5] = [
    ("where do you live ?", "home"),
    ("what do you like ?", "favorite"),
    ("how do you feel today ?", "mood"),
    ("what do you look like ?", "look"),
    ("tell me about yourself .", "self"),
];

/// Canonical generation instruction for a prompt. Its pose and tone words are
/// what instruction-to-prompt mapping keys on.
pub fn instruction_text(spec: &CharacterSpec, prompt: &PromptSpec) -> String {
    format!(
        "draw {} as a {} {} , pose {} , light {}",
        spec.char_id,
        spec.color_name(),
        spec.shape.name(),
        prompt.pose.name(),
        prompt.tone.name()
    )
}

struct Persona {
    catchphrase: &'static str,
    home: &'static str,
    favorite: &'static str,
    mood: &'static str,
}

fn look(spec: &CharacterSpec) -> String {
    format!(
        "i am a {} {} with a {} mark in the {} corner",
        spec.color_name(),
        spec.shape.name(),
        spec.marker_color_name(),
        spec.marker_quadrant.name()
    )
}

fn answer_for(spec: &CharacterSpec, persona: &Persona, topic: &str) -> String {
    match topic {
        "home" => format!("i live in {}", persona.home),
        "favorite" => format!("i love {}", persona.favorite),
        "mood" => format!("i feel {} today", persona.mood),
        "look" => look(spec),
        _ => format!("i am {} , a {} {} from {}", spec.char_id, persona.mood, spec.shape.name(), persona.home),
    }
}

/// Synthesizes a full pack for `spec` from fixed templates. Core images use
/// distinct (pose, tone, jitter) combinations and never the canonical jitter.
pub fn build_pack(spec: &CharacterSpec, seed: u64, sizes: PackSizes) -> Result<CharacterPack> {
    sizes.validate()?;
    spec.validate()?;
    let mut rng = rng::stream(rng::derive(seed, &[rng::hash_str(&spec.char_id)]), streams::PACK);

    let persona = Persona {
        catchphrase: CATCHPHRASES[rng.random_range(0..CATCHPHRASES.len())],
        home: HOMES[rng.random_range(0..HOMES.len())],
        favorite: FAVORITES[rng.random_range(0..FAVORITES.len())],
        mood: MOODS[rng.random_range(0..MOODS.len())],
    };
    let profile = format!(
        "{} is a {} {} who lives in {} and loves {} . {} . they often say {} .",
        spec.char_id,
        persona.mood,
        spec.shape.name(),
        persona.home,
        persona.favorite,
        look(spec),
        persona.catchphrase
    );

    // core images: cycle pose × tone, distinct jitter offsets within each combo
    let mut used: HashSet<(Pose, Tone, (i32, i32))> = HashSet::new();
    let mut core_images = Vec::with_capacity(sizes.core_images);
    for i in 0..sizes.core_images {
        let pose = Pose::ALL[i % 3];
        let tone = Tone::ALL[(i / 3) % 2];
        let prompt = PromptSpec { char_id: spec.char_id.clone(), pose, tone };
        let jitter_seed = loop {
            let s = rng.random_range(1..u32::MAX as u64);
            if used.insert((pose, tone, jitter_offset(s))) {
                break s;
            }
        };
        let image = render_scene(spec, &prompt, jitter_seed)?;
        core_images.push(CoreImage { image, prompt, jitter_seed });
    }

    let dialogues = (0..sizes.dialogues)
        .map(|_| {
            let greeting = GREETINGS[rng.random_range(0..GREETINGS.len())];
            let (question, topic) = TOPICS[rng.random_range(0..TOPICS.len())];
            Dialogue {
                user_input: format!("{greeting} , {question}"),
                response: format!("{} ! {} .", persona.catchphrase, answer_for(spec, &persona, topic)),
            }
        })
        .collect();

    let mm_samples = core_images
        .iter()
        .enumerate()
        .map(|(i, core)| MmSample {
            image_index: i,
            user_input: format!(
                "show me yourself at the {} on a {} day",
                core.prompt.pose.name(),
                core.prompt.tone.name()
            ),
            response: format!("{} ! here i am at the {} .", persona.catchphrase, core.prompt.pose.name()),
            thinking: format!(
                "{} , standing {} under {} light .",
                look(spec),
                core.prompt.pose.name(),
                core.prompt.tone.name()
            ),
            instruction: instruction_text(spec, &core.prompt),
        })
        .collect();

    let facts: Vec<(String, String)> = vec![
        ("what color are you ?".into(), format!("my color is {}", spec.color_name())),
        ("what shape are you ?".into(), format!("i am a {}", spec.shape.name())),
        ("where is your mark ?".into(), format!("my mark is in the {} corner", spec.marker_quadrant.name())),
        ("what color is your mark ?".into(), format!("my mark is {}", spec.marker_color_name())),
        ("where do you live ?".into(), format!("i live in {}", persona.home)),
        ("what do you love ?".into(), format!("i love {}", persona.favorite)),
        ("what do you often say ?".into(), format!("i often say {}", persona.catchphrase)),
        ("what is your temper ?".into(), format!("i am {}", persona.mood)),
    ];
    let kqa = (0..sizes.kqa)
        .map(|i| {
            let (q, a) = &facts[i % facts.len()];
            KqaItem { question: q.clone(), answer: a.clone() }
        })
        .collect();

    let mut vqa = Vec::with_capacity(core_images.len() * 3);
    for (i, core) in core_images.iter().enumerate() {
        for kind in VqaKind::ALL {
            let question = VqaQuestion::new(kind);
            let answer = vqa_oracle(&core.image, &question);
            vqa.push(VqaItem { image_index: i, question, answer });
        }
    }

    let color_names: Vec<&str> = PALETTE.iter().map(|(n, _)| *n).collect();
    let shape_names: Vec<&str> = Shape::ALL.iter().map(|s| s.name()).collect();
    let quadrant_names: Vec<&str> = Quadrant::ALL.iter().map(|q| q.name()).collect();
    let mcq_facts: Vec<(String, &str, Vec<&str>)> = vec![
        (format!("which color is {} ?", spec.char_id), spec.color_name(), color_names.clone()),
        (format!("which shape is {} ?", spec.char_id), spec.shape.name(), shape_names),
        (format!("where is the mark of {} ?", spec.char_id), spec.marker_quadrant.name(), quadrant_names),
        (format!("where does {} live ?", spec.char_id), persona.home, HOMES.to_vec()),
        (format!("what does {} love ?", spec.char_id), persona.favorite, FAVORITES.to_vec()),
        (format!("what does {} often say ?", spec.char_id), persona.catchphrase, CATCHPHRASES.to_vec()),
        (format!("what temper does {} have ?", spec.char_id), persona.mood, MOODS.to_vec()),
    ];
    let mcq = (0..sizes.mcq)
        .map(|i| {
            let (question, truth, domain) = &mcq_facts[i % mcq_facts.len()];
            mcq_item(question.clone(), truth, domain, &mut rng)
        })
        .collect();

    let pack = CharacterPack { spec: spec.clone(), profile, core_images, dialogues, mm_samples, kqa, vqa, mcq };
    pack.validate()?;
    Ok(pack)
}

/// Builds a four-option item with distractors drawn from `domain`.
pub fn mcq_item(question: String, truth: &str, domain: &[&str], rng: &mut crate::rng::Rng) -> McqItem {
    let mut distractors: Vec<&str> = domain.iter().copied().filter(|d| *d != truth).collect();
    distractors.shuffle(rng);
    let mut options: Vec<String> = distractors.into_iter().take(3).map(String::from).collect();
    let key = rng.random_range(0..=options.len());
    options.insert(key, truth.to_string());
    while options.len() < 4 {
        options.push(format!("none {}", options.len()));
    }
    McqItem {
        question,
        options: [options[0].clone(), options[1].clone(), options[2].clone(), options[3].clone()],
        answer_key: (b'A' + key as u8) as char,
    }
}
