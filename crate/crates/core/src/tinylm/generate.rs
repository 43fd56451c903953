use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::forward::{decode_step, prefill, PrefillOutput};
use super::sampler::{Sampler, SamplerConfig};
use super::variants::ModelVariants;
use crate::error::{Error, Result};
use crate::schedule::PrecisionSchedule;

/// Decides prefill precision and the decode schedule for one prompt.
pub trait PrecisionScheduler {
    fn prefill_precision(&self) -> u8;

    /// Called once, after prefill and before the first decode step.
    fn plan(&self, prefilled: &PrefillOutput) -> Result<PrecisionSchedule>;
}

/// Prompt-agnostic: the same schedule for every prompt.
impl PrecisionScheduler for PrecisionSchedule {
    fn prefill_precision(&self) -> u8 {
        self.prefill()
    }

    fn plan(&self, _: &PrefillOutput) -> Result<PrecisionSchedule> {
        Ok(self.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Eos,
    Length,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub prompt: Vec<u32>,
    /// `t_0` from prefill, then one token per decode step.
    pub tokens: Vec<u32>,
    /// Precision that produced each output token; entry 0 is the prefill precision.
    pub precisions: Vec<u8>,
    pub logits_hashes: Vec<String>,
    pub termination: Termination,
    pub schedule: PrecisionSchedule,
    pub eos: Option<u32>,
}

impl GenerationTrace {
    /// Precisions of the decode steps only.
    pub fn decode_precisions(&self) -> &[u8] {
        &self.precisions[1..]
    }

    /// Output tokens without the terminating EOS.
    pub fn text_tokens(&self) -> &[u32] {
        match (self.termination, self.tokens.last()) {
            (Termination::Eos, Some(_)) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

fn logits_hash(logits: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in logits {
        h.update(v.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

fn check_precision(model: &ModelVariants, p: u8, what: &str) -> Result<()> {
    if model.supports(p) {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "scheduler emitted {what} precision {p}, which the model does not provide"
        )))
    }
}

/// Prefill, then up to `max_new` decode steps with per-step precision taken
/// from the scheduler's plan. Stops early when `eos` is sampled.
pub fn generate(
    model: &ModelVariants,
    prompt: &[u32],
    scheduler: &dyn PrecisionScheduler,
    sampler: SamplerConfig,
    eos: Option<u32>,
    max_new: usize,
) -> Result<GenerationTrace> {
    let cfg = model.config();
    if prompt.len() + max_new > cfg.max_context {
        return Err(Error::Length(format!(
            "prompt {} + {max_new} new tokens exceed max context {}",
            prompt.len(),
            cfg.max_context
        )));
    }
    let mut sampler = Sampler::new(sampler)?;
    let prefill_p = scheduler.prefill_precision();
    check_precision(model, prefill_p, "prefill")?;

    let out = prefill(model, prefill_p, prompt)?;
    let schedule = scheduler.plan(&out)?;
    if let Some(v) = schedule.validate().first() {
        return Err(Error::Contract(format!("scheduler produced an invalid schedule: {v}")));
    }
    if max_new > schedule.horizon() {
        return Err(Error::Config(format!(
            "max_new {max_new} exceeds schedule horizon {}",
            schedule.horizon()
        )));
    }

    let mut tokens = vec![sampler.sample(&out.logits)?];
    let mut precisions = vec![prefill_p];
    let mut logits_hashes = vec![logits_hash(&out.logits)];
    let mut cache = out.cache;
    let mut termination = Termination::Length;

    if eos == Some(tokens[0]) {
        termination = Termination::Eos;
    } else {
        for i in 0..max_new {
            let p = schedule.precision_at(i);
            check_precision(model, p, "decode")?;
            let last = *tokens.last().expect("non-empty");
            let logits = decode_step(model, p, last, &mut cache)?;
            let t = sampler.sample(&logits)?;
            tokens.push(t);
            precisions.push(p);
            logits_hashes.push(logits_hash(&logits));
            if eos == Some(t) {
                termination = Termination::Eos;
                break;
            }
        }
    }

    Ok(GenerationTrace {
        prompt: prompt.to_vec(),
        tokens,
        precisions,
        logits_hashes,
        termination,
        schedule,
        eos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::{ModelConfig, EOS_TOKEN};

    fn model() -> ModelVariants {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 24,
            vocab_size: 257,
            max_context: 64,
            rope_theta: 10_000.0,
        };
        ModelVariants::random(cfg, 2, 4, 8).unwrap()
    }

    #[test]
    fn constant_schedule_matches_uniform_baseline() {
        let m = model();
        let a = PrecisionSchedule::uniform(4, 4, 16).unwrap();
        let b = PrecisionSchedule::two_level(4, 2, 16, 4, 16).unwrap();
        let ta = generate(&m, &[1, 2, 3], &a, SamplerConfig::greedy(), None, 16).unwrap();
        let tb = generate(&m, &[1, 2, 3], &b, SamplerConfig::greedy(), None, 16).unwrap();
        assert_eq!(ta.tokens, tb.tokens);
        assert_eq!(ta.logits_hashes, tb.logits_hashes);
        assert_eq!(ta.tokens.len(), 17);
        assert_eq!(ta.termination, Termination::Length);
    }

    #[test]
    fn switch_point_sets_decode_precisions() {
        let m = model();
        let s = PrecisionSchedule::two_level(4, 2, 3, 4, 8).unwrap();
        let t = generate(&m, &[9, 8], &s, SamplerConfig::greedy(), None, 6).unwrap();
        assert_eq!(t.decode_precisions(), &[4, 4, 4, 2, 2, 2]);
        assert_eq!(t.precisions.len(), t.tokens.len());
    }

    #[test]
    fn eos_stops_generation() {
        let m = model();
        let s = PrecisionSchedule::uniform(4, 4, 16).unwrap();
        let free = generate(&m, &[5], &s, SamplerConfig::greedy(), None, 16).unwrap();
        // pretend the 4th output token is end-of-sequence
        let eos = free.tokens[3];
        let k = free.tokens.iter().position(|&t| t == eos).unwrap();
        let t = generate(&m, &[5], &s, SamplerConfig::greedy(), Some(eos), 16).unwrap();
        assert_eq!(t.termination, Termination::Eos);
        assert_eq!(t.tokens.len(), k + 1);
        assert_eq!(t.text_tokens().len(), k);
    }

    struct Rogue;
    impl PrecisionScheduler for Rogue {
        fn prefill_precision(&self) -> u8 {
            4
        }
        fn plan(&self, _: &PrefillOutput) -> Result<PrecisionSchedule> {
            PrecisionSchedule::uniform(7, 4, 8)
        }
    }

    #[test]
    fn unsupported_precision_is_a_contract_violation() {
        let m = model();
        let err = generate(&m, &[1], &Rogue, SamplerConfig::greedy(), Some(EOS_TOKEN), 4).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn max_new_bounded_by_horizon_and_context() {
        let m = model();
        let s = PrecisionSchedule::uniform(4, 4, 4).unwrap();
        assert!(generate(&m, &[1], &s, SamplerConfig::greedy(), None, 5).is_err());
        let s = PrecisionSchedule::uniform(4, 4, 100).unwrap();
        assert!(matches!(
            generate(&m, &[1; 10], &s, SamplerConfig::greedy(), None, 60),
            Err(Error::Length(_))
        ));
    }
}
