//! Pixel-only question answering.
//!
//! The oracle never sees a [`CharacterSpec`](super::CharacterSpec). It segments
//! the glyph by per-pixel energy (brightest channel), separates the marker by
//! color contrast against the glyph's median color, matches the remaining mask
//! against shape templates, and reads the marker quadrant relative to the best
//! template center.

use serde::{Deserialize, Serialize};

use super::render::{offset, shape_contains};
use super::{color_name, l1, Quadrant, Shape, ToyImage, HEIGHT, WIDTH};
use crate::{Error, Result};

/// Mean glyph-region energy below which the image counts as blank.
pub const BLANK_THRESHOLD: f64 = 0.05;

/// Fraction of the reference energy a pixel needs to join the glyph mask.
const MASK_FRACTION: f64 = 0.5;
/// Marker contrast threshold, relative to the glyph's brightest channel.
const MARKER_CONTRAST: f64 = 0.36;
const TEMPLATE_SEARCH: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VqaKind {
    DominantColor,
    Shape,
    MarkerQuadrant,
}

impl VqaKind {
    pub const ALL: [VqaKind; 3] = [VqaKind::DominantColor, VqaKind::Shape, VqaKind::MarkerQuadrant];

    pub fn parse(kind: &str) -> Result<Self> {
        match kind {
            "dominant_color" => Ok(VqaKind::DominantColor),
            "shape" => Ok(VqaKind::Shape),
            "marker_quadrant" => Ok(VqaKind::MarkerQuadrant),
            other => Err(Error::UnsupportedQuestion(other.to_string())),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VqaKind::DominantColor => "dominant_color",
            VqaKind::Shape => "shape",
            VqaKind::MarkerQuadrant => "marker_quadrant",
        }
    }

    pub fn question_text(self) -> &'static str {
        match self {
            VqaKind::DominantColor => "what color is the character ?",
            VqaKind::Shape => "what shape is the character ?",
            VqaKind::MarkerQuadrant => "where is the marker of the character ?",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaQuestion {
    pub kind: VqaKind,
    pub text: String,
}

impl VqaQuestion {
    pub fn new(kind: VqaKind) -> Self {
        Self { kind, text: kind.question_text().to_string() }
    }
}

/// Answer token, e.g. `"red"`, `"disk"`, `"NE"` or `"unknown"`.
pub type Answer = String;

pub const UNKNOWN: &str = "unknown";

struct Segmentation {
    glyph: Vec<bool>,
    marker: Vec<bool>,
    dominant: [f64; 3],
}

fn energy(img: &ToyImage, row: usize, col: usize) -> f64 {
    img.rgb(row, col).into_iter().fold(0.0, f64::max)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn segment(img: &ToyImage) -> Option<Segmentation> {
    let n = HEIGHT * WIDTH;
    let energies: Vec<f64> = (0..n).map(|i| energy(img, i / WIDTH, i % WIDTH)).collect();
    let mut sorted = energies.clone();
    sorted.sort_by(f64::total_cmp);
    let reference = sorted[(0.95 * (n - 1) as f64).round() as usize];
    let threshold = MASK_FRACTION * reference;
    let mask: Vec<bool> = energies.iter().map(|&e| e > threshold).collect();
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return None;
    }
    let mean_energy = energies.iter().zip(&mask).filter(|(_, &m)| m).map(|(e, _)| e).sum::<f64>() / count as f64;
    if mean_energy < BLANK_THRESHOLD {
        return None;
    }

    let mut dominant = [0.0; 3];
    for (ch, d) in dominant.iter_mut().enumerate() {
        let mut vals: Vec<f64> = (0..n).filter(|&i| mask[i]).map(|i| img.rgb(i / WIDTH, i % WIDTH)[ch]).collect();
        *d = median(&mut vals);
    }
    let peak = dominant.iter().cloned().fold(0.0, f64::max);
    let contrast = MARKER_CONTRAST * peak;
    let marker: Vec<bool> =
        (0..n).map(|i| mask[i] && l1(&img.rgb(i / WIDTH, i % WIDTH), &dominant) > contrast).collect();
    let glyph: Vec<bool> = (0..n).map(|i| mask[i] && !marker[i]).collect();
    Some(Segmentation { glyph, marker, dominant })
}

fn centroid(mask: &[bool]) -> Option<(f64, f64)> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        sx += (i % WIDTH) as f64 + 0.5;
        sy += (i / WIDTH) as f64 + 0.5;
        n += 1.0;
    }
    (n > 0.0).then(|| (sx / n, sy / n))
}

/// Best `(shape, center)` by intersection-over-union; marker pixels are ignored.
fn match_template(seg: &Segmentation) -> Option<(Shape, (i32, i32))> {
    let (cx, cy) = centroid(&seg.glyph)?;
    let (cx, cy) = (cx.round() as i32, cy.round() as i32);
    let mut best: Option<(f64, Shape, (i32, i32))> = None;
    for shape in Shape::ALL {
        for oy in -TEMPLATE_SEARCH..=TEMPLATE_SEARCH {
            for ox in -TEMPLATE_SEARCH..=TEMPLATE_SEARCH {
                let center = (cx + ox, cy + oy);
                let (mut inter, mut union) = (0usize, 0usize);
                for row in 0..HEIGHT {
                    for col in 0..WIDTH {
                        let i = row * WIDTH + col;
                        if seg.marker[i] {
                            continue;
                        }
                        let (dx, dy) = offset(row, col, center);
                        let t = shape_contains(shape, dx, dy);
                        let g = seg.glyph[i];
                        inter += (t && g) as usize;
                        union += (t || g) as usize;
                    }
                }
                if union == 0 {
                    continue;
                }
                let iou = inter as f64 / union as f64;
                if best.is_none_or(|(b, _, _)| iou > b) {
                    best = Some((iou, shape, center));
                }
            }
        }
    }
    best.map(|(_, s, c)| (s, c))
}

/// Answers `question` from the pixels of `image` alone.
pub fn vqa_oracle(image: &ToyImage, question: &VqaQuestion) -> Answer {
    let Some(seg) = segment(image) else {
        return UNKNOWN.to_string();
    };
    let answer = match question.kind {
        VqaKind::DominantColor => color_name(seg.dominant).unwrap_or(UNKNOWN),
        VqaKind::Shape => match_template(&seg).map_or(UNKNOWN, |(s, _)| s.name()),
        VqaKind::MarkerQuadrant => {
            let quadrant = match_template(&seg).zip(centroid(&seg.marker)).and_then(|((_, c), (mx, my))| {
                let dx = mx - c.0 as f64;
                let dy = my - c.1 as f64;
                match (dx > 0.0, dx < 0.0, dy < 0.0, dy > 0.0) {
                    (true, _, true, _) => Some(Quadrant::NE),
                    (_, true, true, _) => Some(Quadrant::NW),
                    (true, _, _, true) => Some(Quadrant::SE),
                    (_, true, _, true) => Some(Quadrant::SW),
                    _ => None,
                }
            });
            quadrant.map_or(UNKNOWN, Quadrant::name)
        }
    };
    answer.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyworld::{make_character, render_scene, Pose, PromptSpec, Tone};

    #[test]
    fn blank_image_is_unknown() {
        let q = VqaQuestion::new(VqaKind::DominantColor);
        assert_eq!(vqa_oracle(&ToyImage::zeros(), &q), "unknown");
        assert_eq!(vqa_oracle(&ToyImage::filled(0.03), &q), "unknown");
    }

    #[test]
    fn unsupported_kind_is_an_error() {
        assert!(matches!(VqaKind::parse("texture"), Err(Error::UnsupportedQuestion(_))));
        for kind in VqaKind::ALL {
            assert_eq!(VqaKind::parse(kind.as_str()).unwrap(), kind);
        }
    }

    #[test]
    fn red_disk_reads_back() {
        let mut spec = make_character(0);
        spec.base_color = [1.0, 0.15, 0.1];
        spec.shape = Shape::Disk;
        spec.marker_quadrant = Quadrant::NE;
        spec.marker_color = [1.0, 1.0, 1.0];
        let p = PromptSpec { char_id: spec.char_id.clone(), pose: Pose::Center, tone: Tone::Bright };
        let img = render_scene(&spec, &p, 0).unwrap();
        assert_eq!(vqa_oracle(&img, &VqaQuestion::new(VqaKind::Shape)), "disk");
        assert_eq!(vqa_oracle(&img, &VqaQuestion::new(VqaKind::DominantColor)), "red");
        assert_eq!(vqa_oracle(&img, &VqaQuestion::new(VqaKind::MarkerQuadrant)), "NE");
    }

    #[test]
    fn oracle_is_sound_on_canonical_renders() {
        for seed in 0..100 {
            let spec = make_character(seed);
            for prompt in spec.prompts() {
                let img = render_scene(&spec, &prompt, 0).unwrap();
                let ask = |k| vqa_oracle(&img, &VqaQuestion::new(k));
                assert_eq!(ask(VqaKind::DominantColor), spec.color_name(), "seed {seed} {prompt:?}");
                assert_eq!(ask(VqaKind::Shape), spec.shape.name(), "seed {seed} {prompt:?}");
                assert_eq!(ask(VqaKind::MarkerQuadrant), spec.marker_quadrant.name(), "seed {seed} {prompt:?}");
            }
        }
    }

    #[test]
    fn oracle_is_sound_on_jittered_renders() {
        for seed in 0..60 {
            let spec = make_character(seed);
            for (j, prompt) in spec.prompts().into_iter().enumerate() {
                let img = render_scene(&spec, &prompt, 1 + j as u64 + 7 * seed).unwrap();
                let ask = |k| vqa_oracle(&img, &VqaQuestion::new(k));
                assert_eq!(ask(VqaKind::DominantColor), spec.color_name());
                assert_eq!(ask(VqaKind::Shape), spec.shape.name(), "seed {seed} {prompt:?}");
                assert_eq!(ask(VqaKind::MarkerQuadrant), spec.marker_quadrant.name());
            }
        }
    }
}
