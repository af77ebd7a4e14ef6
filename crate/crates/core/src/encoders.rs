//! Deterministic embedding scorers.
//!
//! Two seeded random projections (768 → 64) stand in for a semantic
//! (CLIP-like) and a structural (DINO-like) image encoder, and a patch-mean
//! distance stands in for a learned perceptual metric. Anything implementing
//! [`Scorer`] can replace them, including an out-of-process scorer speaking
//! the protocol in [`crate::scorer`].

use ndarray::{Array1, Array2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::{self, streams};
use crate::toyworld::{render_scene, CharacterPack, PromptSpec, ToyImage, CHANNELS, HEIGHT, PIXELS, WIDTH};
use crate::{Error, Result};

pub const EMBED_DIM: usize = 64;
const PATCH_GRID: usize = 4;

/// A unit-norm embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedVector(Vec<f64>);

impl EmbedVector {
    /// L2-normalizes `values`. A zero vector maps to the first basis vector so
    /// that every embedding stays on the unit sphere.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("embedding must be non-empty and finite".into()));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            values[0] = 1.0;
        } else {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(Self(values))
    }

    /// Like [`normalized`](Self::normalized), but keeps values that already
    /// have unit norm bit for bit.
    pub fn unit_or_normalized(values: Vec<f64>) -> Result<Self> {
        let norm_sq = values.iter().map(|v| v * v).sum::<f64>();
        if values.iter().all(|v| v.is_finite()) && (norm_sq - 1.0).abs() < 1e-12 {
            Ok(Self(values))
        } else {
            Self::normalized(values)
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Cosine similarity of two unit vectors.
pub fn cosine(a: &EmbedVector, b: &EmbedVector) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// Identity and prompt alignment (CLIP analogue).
    Semantic,
    /// Structural similarity for the training-set penalty (DINO analogue).
    Structure,
}

impl EncoderKind {
    fn stream(self) -> u64 {
        match self {
            EncoderKind::Semantic => streams::SEMANTIC_ENCODER,
            EncoderKind::Structure => streams::STRUCTURE_ENCODER,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub seed: u64,
    pub kind: EncoderKind,
}

/// A materialized projection for one [`EncoderSpec`].
#[derive(Debug, Clone)]
pub struct Encoder {
    spec: EncoderSpec,
    projection: Array2<f64>,
}

impl Encoder {
    pub fn new(spec: EncoderSpec) -> Self {
        let mut rng = rng::stream(spec.seed, spec.kind.stream());
        let projection = Array2::from_shape_fn((EMBED_DIM, PIXELS), |_| StandardNormal.sample(&mut rng));
        Self { spec, projection }
    }

    pub fn spec(&self) -> EncoderSpec {
        self.spec
    }

    /// Projects the mean-centered pixels and normalizes. Flat images have no
    /// variance to center away, so they are projected raw.
    pub fn encode(&self, image: &ToyImage) -> EmbedVector {
        let mut x = Array1::from(image.to_f64());
        let mean = x.mean().unwrap_or(0.0);
        if x.iter().any(|&v| v != x[0]) {
            x.mapv_inplace(|v| v - mean);
        }
        let y = self.projection.dot(&x);
        EmbedVector::normalized(y.to_vec()).expect("projection of finite pixels is finite")
    }
}

/// One-shot encoding. Prefer holding an [`Encoder`] when encoding many images.
pub fn encode_image(image: &ToyImage, enc: &EncoderSpec) -> EmbedVector {
    Encoder::new(*enc).encode(image)
}

fn patch_means(img: &ToyImage) -> [[f64; CHANNELS]; PATCH_GRID * PATCH_GRID] {
    let ph = HEIGHT / PATCH_GRID;
    let pw = WIDTH / PATCH_GRID;
    let mut out = [[0.0; CHANNELS]; PATCH_GRID * PATCH_GRID];
    for row in 0..HEIGHT {
        for col in 0..WIDTH {
            let p = (row / ph) * PATCH_GRID + col / pw;
            let rgb = img.rgb(row, col);
            for ch in 0..CHANNELS {
                out[p][ch] += rgb[ch];
            }
        }
    }
    let area = (ph * pw) as f64;
    for patch in out.iter_mut() {
        patch.iter_mut().for_each(|v| *v /= area);
    }
    out
}

/// Mean over a 4×4 patch grid of the mean absolute channel-mean difference.
/// Lies in `[0, 1]`, with black against white at exactly 1.
pub fn perceptual_distance(a: &ToyImage, b: &ToyImage) -> f64 {
    let pa = patch_means(a);
    let pb = patch_means(b);
    let total: f64 = pa
        .iter()
        .zip(&pb)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).abs()).sum::<f64>() / CHANNELS as f64)
        .sum();
    total / (PATCH_GRID * PATCH_GRID) as f64
}

/// The embedding and distance services that rewards and metrics consume.
pub trait Scorer: Send + Sync {
    fn embed(&self, image: &ToyImage, kind: EncoderKind) -> Result<EmbedVector>;
    fn perceptual_distance(&self, a: &ToyImage, b: &ToyImage) -> Result<f64>;
}

/// In-process scorer backed by the seeded projections.
#[derive(Debug, Clone)]
pub struct BuiltinScorer {
    semantic: Encoder,
    structure: Encoder,
}

impl BuiltinScorer {
    pub fn new(semantic_seed: u64, structure_seed: u64) -> Self {
        Self {
            semantic: Encoder::new(EncoderSpec { seed: semantic_seed, kind: EncoderKind::Semantic }),
            structure: Encoder::new(EncoderSpec { seed: structure_seed, kind: EncoderKind::Structure }),
        }
    }
}

impl Default for BuiltinScorer {
    fn default() -> Self {
        Self::new(0, 0)
    }
}

impl Scorer for BuiltinScorer {
    fn embed(&self, image: &ToyImage, kind: EncoderKind) -> Result<EmbedVector> {
        Ok(match kind {
            EncoderKind::Semantic => self.semantic.encode(image),
            EncoderKind::Structure => self.structure.encode(image),
        })
    }

    fn perceptual_distance(&self, a: &ToyImage, b: &ToyImage) -> Result<f64> {
        Ok(perceptual_distance(a, b))
    }
}

/// Prompt embedding: the semantic embedding of the prompt's canonical render.
pub fn encode_prompt(scorer: &dyn Scorer, prompt: &PromptSpec, pack: &CharacterPack) -> Result<EmbedVector> {
    if prompt.char_id != pack.spec.char_id {
        return Err(Error::UnknownCharacter(prompt.char_id.clone()));
    }
    let canonical = render_scene(&pack.spec, prompt, 0)?;
    scorer.embed(&canonical, EncoderKind::Semantic)
}
