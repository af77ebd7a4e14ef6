use rand::Rng as _;

use super::{CharacterSpec, Pose, PromptSpec, Shape, Tone, ToyImage, CHANNELS, HEIGHT, PIXELS, WIDTH};
use crate::rng::{self, streams};
use crate::{Error, Result};

/// Global tone curve `v ↦ brightness · v^gamma` applied to every channel.
///
/// Dim scenes use a gamma above one as well as a lower gain. A pure gain
/// would be erased by any mean-centered, L2-normalized embedding, making the
/// two tones indistinguishable to the encoders.
pub trait Brightness {
    fn brightness(self) -> f64;
    fn gamma(self) -> f64;

    fn apply(self, v: f64) -> f64
    where
        Self: Sized + Copy,
    {
        self.brightness() * v.powf(self.gamma())
    }
}

impl Brightness for Tone {
    fn brightness(self) -> f64 {
        match self {
            Tone::Bright => 1.0,
            Tone::Dim => 0.55,
        }
    }

    fn gamma(self) -> f64 {
        match self {
            Tone::Bright => 1.0,
            Tone::Dim => 1.4,
        }
    }
}

const POSE_SHIFT: i32 = 3;
const MAX_JITTER: i32 = 2;

/// Glyph offset in whole pixels for a jitter seed. Seed 0 is the canonical,
/// unshifted placement; every other seed shifts by at least one pixel and at
/// most two along each axis.
pub fn jitter_offset(jitter_seed: u64) -> (i32, i32) {
    if jitter_seed == 0 {
        return (0, 0);
    }
    let mut rng = rng::stream(jitter_seed, streams::JITTER);
    loop {
        let dx = rng.random_range(-MAX_JITTER..=MAX_JITTER);
        let dy = rng.random_range(-MAX_JITTER..=MAX_JITTER);
        if (dx, dy) != (0, 0) {
            return (dx, dy);
        }
    }
}

/// Glyph center `(cx, cy)` in pixel units for a pose and jitter.
pub fn scene_center(pose: Pose, jitter_seed: u64) -> (i32, i32) {
    let (jx, jy) = jitter_offset(jitter_seed);
    let px = match pose {
        Pose::Left => -POSE_SHIFT,
        Pose::Center => 0,
        Pose::Right => POSE_SHIFT,
    };
    (WIDTH as i32 / 2 + px + jx, HEIGHT as i32 / 2 + jy)
}

/// Whether the pixel whose center sits at offset `(dx, dy)` from the glyph
/// center belongs to `shape`. Offsets are half-integers on the pixel grid.
pub(crate) fn shape_contains(shape: Shape, dx: f64, dy: f64) -> bool {
    match shape {
        Shape::Disk => dx * dx + dy * dy <= 18.5,
        Shape::Square => dx.abs() <= 2.5 && dy.abs() <= 2.5,
        Shape::Triangle => {
            if !(-3.5..=3.5).contains(&dy) {
                return false;
            }
            let half_width = 0.5 + (dy + 3.5) * 0.5;
            dx.abs() <= half_width
        }
        Shape::Cross => (dx.abs() <= 1.0 && dy.abs() <= 3.5) || (dy.abs() <= 1.0 && dx.abs() <= 3.5),
    }
}

/// Pixel offsets of the 2×2 marker dot relative to the glyph center.
pub(crate) fn marker_contains(dir: (f64, f64), dx: f64, dy: f64) -> bool {
    let (sx, sy) = dir;
    let ax = dx * sx;
    let ay = dy * sy;
    (1.5..=2.5).contains(&ax) && (1.5..=2.5).contains(&ay)
}

/// Pixel-center offset of `(row, col)` from an integer glyph center.
#[inline]
pub(crate) fn offset(row: usize, col: usize, center: (i32, i32)) -> (f64, f64) {
    (col as f64 + 0.5 - center.0 as f64, row as f64 + 0.5 - center.1 as f64)
}

/// Renders a scene: the character glyph at the pose position (plus jitter), the
/// marker dot in its quadrant, and the whole canvas passed through the tone curve.
pub fn render_scene(spec: &CharacterSpec, prompt: &PromptSpec, jitter_seed: u64) -> Result<ToyImage> {
    if prompt.char_id != spec.char_id {
        return Err(Error::IdentityMismatch { prompt: prompt.char_id.clone(), character: spec.char_id.clone() });
    }
    let center = scene_center(prompt.pose, jitter_seed);
    let tone = prompt.tone;
    let dir = spec.marker_quadrant.direction();
    let mut px = vec![0.0_f32; PIXELS];
    for row in 0..HEIGHT {
        for col in 0..WIDTH {
            let (dx, dy) = offset(row, col, center);
            let color = if marker_contains(dir, dx, dy) {
                Some(spec.marker_color)
            } else if shape_contains(spec.shape, dx, dy) {
                Some(spec.base_color)
            } else {
                None
            };
            if let Some(c) = color {
                let i = ToyImage::index(row, col, 0);
                for ch in 0..CHANNELS {
                    px[i + ch] = tone.apply(c[ch]) as f32;
                }
            }
        }
    }
    ToyImage::new(px)
}
