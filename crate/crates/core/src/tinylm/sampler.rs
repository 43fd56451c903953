use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SamplingMode {
    Greedy,
    Temperature { tau: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    #[serde(flatten)]
    pub mode: SamplingMode,
    #[serde(default)]
    pub seed: u64,
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        Self {
            mode: SamplingMode::Greedy,
            seed: 0,
        }
    }

    pub fn temperature(tau: f64, seed: u64) -> Self {
        Self {
            mode: SamplingMode::Temperature { tau },
            seed,
        }
    }
}

/// Stateful token sampler; one per generation.
#[derive(Debug, Clone)]
pub struct Sampler {
    mode: SamplingMode,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(cfg: SamplerConfig) -> Result<Self> {
        if let SamplingMode::Temperature { tau } = cfg.mode {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::Config(format!("temperature must be positive, got {tau}")));
            }
        }
        Ok(Self {
            mode: cfg.mode,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    pub fn sample(&mut self, logits: &[f64]) -> Result<u32> {
        if logits.is_empty() {
            return Err(Error::Input("cannot sample from empty logits".into()));
        }
        if let Some(bad) = logits.iter().find(|x| !x.is_finite()) {
            return Err(Error::Input(format!("non-finite logit {bad}")));
        }
        match self.mode {
            SamplingMode::Greedy => Ok(argmax(logits) as u32),
            SamplingMode::Temperature { tau } => {
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = logits.iter().map(|l| ((l - max) / tau).exp()).collect();
                let total: f64 = weights.iter().sum();
                let mut u = self.rng.random::<f64>() * total;
                for (i, w) in weights.iter().enumerate() {
                    if u < *w {
                        return Ok(i as u32);
                    }
                    u -= w;
                }
                // u landed on accumulated rounding; take the last non-zero weight
                Ok(weights.iter().rposition(|&w| w > 0.0).unwrap_or(0) as u32)
            }
        }
    }
}

/// Index of the largest value, lowest index on exact ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// One-shot sampling with a fresh generator.
pub fn sample(logits: &[f64], cfg: SamplerConfig) -> Result<u32> {
    Sampler::new(cfg)?.sample(logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_picks_argmax_with_low_index_ties() {
        assert_eq!(sample(&[0.1, 2.0, -1.0], SamplerConfig::greedy()).unwrap(), 1);
        assert_eq!(sample(&[3.0, 3.0], SamplerConfig::greedy()).unwrap(), 0);
    }

    #[test]
    fn temperature_is_seeded() {
        let logits: Vec<f64> = (0..20).map(|i| f64::from(i).sin()).collect();
        let draw = |seed| {
            let mut s = Sampler::new(SamplerConfig::temperature(0.7, seed)).unwrap();
            (0..50).map(|_| s.sample(&logits).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(4), draw(4));
        assert_ne!(draw(4), draw(5));
    }

    #[test]
    fn tiny_temperature_approaches_greedy() {
        let mut s = Sampler::new(SamplerConfig::temperature(1e-3, 1)).unwrap();
        for _ in 0..20 {
            assert_eq!(s.sample(&[0.0, 1.0, 0.5]).unwrap(), 1);
        }
    }

    #[test]
    fn rejects_bad_config_and_logits() {
        assert!(Sampler::new(SamplerConfig::temperature(0.0, 1)).is_err());
        assert!(Sampler::new(SamplerConfig::temperature(-1.0, 1)).is_err());
        assert!(sample(&[f64::NAN], SamplerConfig::greedy()).is_err());
    }
}
