use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::{self, streams, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixerConfig {
    /// Target long-run sample counts, image generation to understanding.
    pub ratio_t2i_to_vlm: (u32, u32),
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MixerConfig {
    fn default() -> Self {
        Self { ratio_t2i_to_vlm: (200, 1), batch_size: 8, seed: 0 }
    }
}

impl MixerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ratio_t2i_to_vlm.0 == 0 || self.ratio_t2i_to_vlm.1 == 0 {
            return Err(Error::config("sft.mixer.ratio_t2i_to_vlm", "both parts must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("sft.mixer.batch_size", "must hold one sample of each family"));
        }
        Ok(())
    }

    /// Probability that a free slot goes to the understanding family.
    ///
    /// One slot per family is reserved; the rest are filled so the expected
    /// understanding share equals the target share whenever that is reachable.
    /// Below `batch_size = total ratio` the reserved slot alone already exceeds
    /// the target share, so free slots all go to generation.
    pub fn free_slot_vlm_probability(&self) -> f64 {
        let (a, b) = self.ratio_t2i_to_vlm;
        let share = b as f64 / (a as f64 + b as f64);
        let free = self.batch_size - 2;
        if free == 0 {
            return 0.0;
        }
        ((share * self.batch_size as f64 - 1.0) / free as f64).clamp(0.0, 1.0)
    }
}

/// Indices into the two sample pools making up one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixedBatch {
    pub t2i: Vec<usize>,
    pub vlm: Vec<usize>,
}

/// Endless, seeded stream of mixed batches drawn with replacement.
#[derive(Debug, Clone)]
pub struct MixedBatches {
    config: MixerConfig,
    t2i_len: usize,
    vlm_len: usize,
    q: f64,
    rng: Rng,
}

impl Iterator for MixedBatches {
    type Item = MixedBatch;

    fn next(&mut self) -> Option<MixedBatch> {
        let mut batch = MixedBatch {
            t2i: vec![self.rng.random_range(0..self.t2i_len)],
            vlm: vec![self.rng.random_range(0..self.vlm_len)],
        };
        for _ in 2..self.config.batch_size {
            if self.rng.random::<f64>() < self.q {
                batch.vlm.push(self.rng.random_range(0..self.vlm_len));
            } else {
                batch.t2i.push(self.rng.random_range(0..self.t2i_len));
            }
        }
        Some(batch)
    }
}

pub fn mix_batches(t2i_len: usize, vlm_len: usize, config: MixerConfig) -> Result<MixedBatches> {
    config.validate()?;
    if t2i_len == 0 {
        return Err(Error::InvalidArgument("empty image-generation stream".into()));
    }
    if vlm_len == 0 {
        return Err(Error::InvalidArgument("empty understanding stream".into()));
    }
    Ok(MixedBatches {
        config,
        t2i_len,
        vlm_len,
        q: config.free_slot_vlm_probability(),
        rng: rng::stream(config.seed, streams::MIXER),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ratio(config: MixerConfig, batches: usize) -> (f64, bool) {
        let mut t = 0;
        let mut v = 0;
        let mut both = true;
        for b in mix_batches(10, 50, config).unwrap().take(batches) {
            both &= !b.t2i.is_empty() && !b.vlm.is_empty();
            assert_eq!(b.t2i.len() + b.vlm.len(), config.batch_size);
            t += b.t2i.len();
            v += b.vlm.len();
        }
        (t as f64 / v as f64, both)
    }

    #[test]
    fn large_batches_reach_the_target_ratio() {
        let (r, both) = ratio(MixerConfig { batch_size: 402, ..Default::default() }, 2000);
        assert!(both);
        assert!((r / 200.0 - 1.0).abs() < 0.1, "ratio {r}");
    }

    #[test]
    fn small_batches_saturate_at_the_reserved_slot() {
        // one understanding sample per batch is the most skewed mix possible
        let (r, both) = ratio(MixerConfig::default(), 2000);
        assert!(both);
        assert_eq!(r, 7.0);
    }

    #[test]
    fn balanced_ratio_is_balanced() {
        let (r, _) = ratio(MixerConfig { ratio_t2i_to_vlm: (1, 1), batch_size: 8, seed: 3 }, 4000);
        assert!((r - 1.0).abs() < 0.05, "ratio {r}");
    }

    #[test]
    fn same_seed_same_batches() {
        let a: Vec<_> = mix_batches(10, 50, MixerConfig::default()).unwrap().take(50).collect();
        let b: Vec<_> = mix_batches(10, 50, MixerConfig::default()).unwrap().take(50).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_streams_are_rejected() {
        assert!(mix_batches(0, 5, MixerConfig::default()).is_err());
        assert!(mix_batches(5, 0, MixerConfig::default()).is_err());
        assert!(MixerConfig { ratio_t2i_to_vlm: (0, 1), ..Default::default() }.validate().is_err());
    }
}
