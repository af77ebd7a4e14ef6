//! Procedural character universe.
//!
//! Each character is a colored glyph with a small contrasting marker dot. Scenes
//! are rendered deterministically onto a 16×16 RGB canvas, and every trait can be
//! read back from pixels alone by [`vqa_oracle`], so rewards and metrics have a
//! checkable ground truth.

mod image;
mod io;
mod oracle;
mod pack;
mod render;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::{self, streams};

pub use image::{ToyImage, CHANNELS, HEIGHT, PIXELS, WIDTH};
pub use io::{load_pack, read_raw_f32, write_pack, write_raw_f32};
pub use oracle::{vqa_oracle, Answer, VqaKind, VqaQuestion, BLANK_THRESHOLD};
pub use pack::{
    build_pack, instruction_text, mcq_item, CharacterPack, CoreImage, Dialogue, KqaItem, McqItem, MmSample, PackSizes,
    VqaItem,
};
pub use render::{jitter_offset, render_scene, scene_center, Brightness};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Disk, Shape::Square, Shape::Triangle, Shape::Cross];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Disk => "disk",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Quadrant {
    NE,
    NW,
    SE,
    SW,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant::NE, Quadrant::NW, Quadrant::SE, Quadrant::SW];

    pub fn name(self) -> &'static str {
        match self {
            Quadrant::NE => "NE",
            Quadrant::NW => "NW",
            Quadrant::SE => "SE",
            Quadrant::SW => "SW",
        }
    }

    /// Unit direction `(dx, dy)` in image coordinates (y grows downward).
    pub fn direction(self) -> (f64, f64) {
        match self {
            Quadrant::NE => (1.0, -1.0),
            Quadrant::NW => (-1.0, -1.0),
            Quadrant::SE => (1.0, 1.0),
            Quadrant::SW => (-1.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pose {
    Left,
    Center,
    Right,
}

impl Pose {
    pub const ALL: [Pose; 3] = [Pose::Left, Pose::Center, Pose::Right];

    pub fn name(self) -> &'static str {
        match self {
            Pose::Left => "left",
            Pose::Center => "center",
            Pose::Right => "right",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tone {
    Bright,
    Dim,
}

impl Tone {
    pub const ALL: [Tone; 2] = [Tone::Bright, Tone::Dim];

    pub fn name(self) -> &'static str {
        match self {
            Tone::Bright => "bright",
            Tone::Dim => "dim",
        }
    }
}

/// Named hues. Base colors are small perturbations of one entry; the oracle
/// answers with the nearest entry after brightness normalization.
pub const PALETTE: [(&str, [f64; 3]); 8] = [
    ("red", [1.0, 0.15, 0.1]),
    ("orange", [1.0, 0.55, 0.05]),
    ("yellow", [1.0, 0.95, 0.1]),
    ("green", [0.15, 0.9, 0.2]),
    ("cyan", [0.1, 0.9, 0.95]),
    ("blue", [0.15, 0.3, 1.0]),
    ("purple", [0.6, 0.2, 1.0]),
    ("magenta", [1.0, 0.2, 0.8]),
];

/// Marker colors: the palette plus white.
const WHITE: (&str, [f64; 3]) = ("white", [1.0, 1.0, 1.0]);

const MIN_MARKER_CONTRAST: f64 = 0.5;
const COLOR_PERTURBATION: f64 = 0.04;

/// Name of the palette entry closest to `color` after scaling its brightest
/// channel to one. Returns `None` for black.
pub fn color_name(color: [f64; 3]) -> Option<&'static str> {
    let peak = color.iter().cloned().fold(0.0_f64, f64::max);
    if peak <= 0.0 {
        return None;
    }
    let norm = color.map(|c| c / peak);
    PALETTE
        .iter()
        .chain(std::iter::once(&WHITE))
        .min_by(|a, b| sq_dist(&norm, &a.1).total_cmp(&sq_dist(&norm, &b.1)))
        .map(|(name, _)| *name)
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn l1(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterSpec {
    pub char_id: String,
    pub base_color: [f64; 3],
    pub shape: Shape,
    pub marker_quadrant: Quadrant,
    pub marker_color: [f64; 3],
}

impl CharacterSpec {
    pub fn color_name(&self) -> &'static str {
        color_name(self.base_color).unwrap_or("unknown")
    }

    pub fn marker_color_name(&self) -> &'static str {
        color_name(self.marker_color).unwrap_or("unknown")
    }

    /// Checks channel ranges and marker contrast.
    pub fn validate(&self) -> crate::Result<()> {
        let in_range = |c: &[f64; 3]| c.iter().all(|v| (0.0..=1.0).contains(v));
        if !in_range(&self.base_color) {
            return Err(crate::Error::schema("spec.base_color", "channel outside [0,1]"));
        }
        if !in_range(&self.marker_color) {
            return Err(crate::Error::schema("spec.marker_color", "channel outside [0,1]"));
        }
        if l1(&self.base_color, &self.marker_color) < MIN_MARKER_CONTRAST {
            return Err(crate::Error::schema("spec.marker_color", "L1 distance to base_color below 0.5"));
        }
        Ok(())
    }

    /// The six prompts (every pose and tone) that address this character.
    pub fn prompts(&self) -> Vec<PromptSpec> {
        Tone::ALL
            .iter()
            .flat_map(|&tone| {
                Pose::ALL.iter().map(move |&pose| PromptSpec { char_id: self.char_id.clone(), pose, tone })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSpec {
    pub char_id: String,
    pub pose: Pose,
    pub tone: Tone,
}

impl PromptSpec {
    pub fn label(&self) -> String {
        format!("{}-{}-{}", self.char_id, self.pose.name(), self.tone.name())
    }
}

/// Deterministically synthesizes a character from `seed`.
pub fn make_character(seed: u64) -> CharacterSpec {
    let mut rng = rng::stream(seed, streams::CHARACTER);
    let base_idx = rng.random_range(0..PALETTE.len());
    let base_color =
        PALETTE[base_idx].1.map(|c| (c + rng.random_range(-COLOR_PERTURBATION..=COLOR_PERTURBATION)).clamp(0.0, 1.0));
    let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
    let marker_quadrant = Quadrant::ALL[rng.random_range(0..Quadrant::ALL.len())];
    let candidates: Vec<[f64; 3]> = PALETTE
        .iter()
        .chain(std::iter::once(&WHITE))
        .map(|(_, c)| *c)
        .filter(|c| l1(c, &base_color) >= MIN_MARKER_CONTRAST)
        .collect();
    let marker_color = candidates[rng.random_range(0..candidates.len())];
    CharacterSpec { char_id: format!("char-{seed:04}"), base_color, shape, marker_quadrant, marker_color }
}
