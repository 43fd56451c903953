use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::LabeledExample;
use super::features::FeatureSource;
use crate::error::{Error, Result};
use crate::metrics::rouge_l;
use crate::schedule::{PrecisionSchedule, SwitchGrid};
use crate::tinylm::{generate, prefill, ModelVariants, SamplerConfig};

/// Slack used for the "matches or exceeds" comparison.
pub const LABEL_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    pub high: u8,
    pub low: u8,
    pub prefill: u8,
    pub seed: u64,
    pub feature: FeatureSource,
    pub sampler: SamplerConfig,
    pub eos: Option<u32>,
}

/// Smallest grid index whose score reaches the score at the last grid point.
pub fn minimal_label(scores: &[f64]) -> Option<usize> {
    let target = *scores.last()? - LABEL_TOLERANCE;
    scores.iter().position(|&s| s >= target)
}

/// Cut point for a prompt of `len` tokens, in `[max(1, len/4), len - 1]`.
fn truncation_point(rng: &mut ChaCha8Rng, len: usize) -> usize {
    if len < 2 {
        return len;
    }
    let lo = (len / 4).max(1);
    rng.random_range(lo..len)
}

/// Truncates every prompt at a seeded random point. Draws happen in prompt
/// order, so the result depends only on the seed and the prompt lengths.
pub fn truncate_prompts(prompts: &[Vec<u32>], seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    prompts
        .iter()
        .map(|p| p[..truncation_point(&mut rng, p.len())].to_vec())
        .collect()
}

/// Builds one labeled example per usable prompt. Returns the examples and the
/// number of prompts skipped because their reference generation was empty.
pub fn generate_labels(
    model: &ModelVariants,
    prompts: &[Vec<u32>],
    grid: &SwitchGrid,
    cfg: &LabelConfig,
) -> Result<(Vec<LabeledExample>, usize)> {
    if prompts.is_empty() {
        return Err(Error::Input("label generation needs at least one prompt".into()));
    }
    let horizon = grid.horizon();
    let schedules = grid
        .points()
        .iter()
        .map(|&st| PrecisionSchedule::two_level(cfg.high, cfg.low, st, cfg.prefill, horizon))
        .collect::<Result<Vec<_>>>()?;
    let p_ref = model.reference_precision();
    let reference = PrecisionSchedule::uniform(p_ref, p_ref, horizon)?;
    let truncated = truncate_prompts(prompts, cfg.seed);

    let results = truncated
        .par_iter()
        .map(|prompt| -> Result<Option<LabeledExample>> {
            if prompt.is_empty() {
                return Ok(None);
            }
            let ref_trace = generate(model, prompt, &reference, cfg.sampler, cfg.eos, horizon)?;
            if ref_trace.text_tokens().is_empty() {
                return Ok(None);
            }
            let scores = schedules
                .iter()
                .map(|s| {
                    let t = generate(model, prompt, s, cfg.sampler, cfg.eos, horizon)?;
                    Ok(rouge_l(t.text_tokens(), ref_trace.text_tokens()).f1)
                })
                .collect::<Result<Vec<f64>>>()?;
            let label = minimal_label(&scores).expect("grid is non-empty");
            let out = prefill(model, cfg.prefill, prompt)?;
            let f = cfg.feature.extract(&out)?;
            let mut e = LabeledExample::from_features(&f.keys, &f.values, f.tokens, label)?;
            e.prompt = prompt.clone();
            e.scores = scores;
            Ok(Some(e))
        })
        .collect::<Result<Vec<_>>>()?;

    let skipped = results.iter().filter(|r| r.is_none()).count();
    if skipped > 0 {
        log::warn!("skipped {skipped} prompts with empty reference output");
    }
    Ok((results.into_iter().flatten().collect(), skipped))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_label_rules() {
        assert_eq!(minimal_label(&[0.9, 0.9, 0.9]), Some(0));
        assert_eq!(minimal_label(&[0.1, 0.2, 0.8]), Some(2));
        assert_eq!(minimal_label(&[0.1, 0.9, 0.5, 0.8]), Some(1));
        assert_eq!(minimal_label(&[0.5, 0.8 - 1e-12, 0.8]), Some(1));
        assert_eq!(minimal_label(&[]), None);
    }

    #[test]
    fn truncation_is_seeded_and_in_range() {
        let prompts: Vec<Vec<u32>> = (2..40).map(|n| (0..n).collect()).collect();
        let a = truncate_prompts(&prompts, 7);
        assert_eq!(a, truncate_prompts(&prompts, 7));
        assert_ne!(a, truncate_prompts(&prompts, 8));
        for (p, t) in prompts.iter().zip(&a) {
            assert!(t.len() >= (p.len() / 4).max(1) && t.len() < p.len());
            assert_eq!(&p[..t.len()], &t[..]);
        }
        assert_eq!(truncate_prompts(&[vec![5]], 0), vec![vec![5]]);
    }
}
