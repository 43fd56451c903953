use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tinylm::PrefillOutput;

/// Which prefill state feeds the scheduler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "source", content = "layer", rename_all = "snake_case")]
pub enum FeatureSource {
    #[default]
    LastBlock,
    FirstBlock,
    MiddleBlock,
    Block(usize),
    /// Final hidden states used as both keys and values.
    Activations,
}

/// Flattened `T x width` key/value features.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
    pub tokens: usize,
}

impl Features {
    pub fn d_k(&self) -> usize {
        self.keys.len() / self.tokens.max(1)
    }

    pub fn d_v(&self) -> usize {
        self.values.len() / self.tokens.max(1)
    }
}

impl FeatureSource {
    pub fn extract(&self, prefilled: &PrefillOutput) -> Result<Features> {
        let cache = &prefilled.cache;
        let n = cache.n_layers();
        let layer = match *self {
            FeatureSource::LastBlock => n - 1,
            FeatureSource::FirstBlock => 0,
            FeatureSource::MiddleBlock => n / 2,
            FeatureSource::Block(l) if l < n => l,
            FeatureSource::Block(l) => {
                return Err(Error::Config(format!("block {l} outside {n} layers")))
            }
            FeatureSource::Activations => {
                return Ok(Features {
                    keys: prefilled.hidden.clone(),
                    values: prefilled.hidden.clone(),
                    tokens: cache.len(),
                })
            }
        };
        Ok(Features {
            keys: cache.keys(layer).to_vec(),
            values: cache.values(layer).to_vec(),
            tokens: cache.len(),
        })
    }

    /// Key and value widths this source produces for a model.
    pub fn widths(&self, d_model: usize) -> (usize, usize) {
        (d_model, d_model)
    }
}
