use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::quant::{parse_model, serialize_model, QuantizedTensor, Quantizer, UniformQuantizer, WeightFile};
use crate::schedule::FULL_PRECISION;

pub const DEFAULT_DEQUANT_BUDGET: usize = 256 << 20;

/// RMSNorm gains, kept at full precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormGains {
    pub attn: Vec<Vec<f64>>,
    pub mlp: Vec<Vec<f64>>,
    #[serde(rename = "final")]
    pub final_norm: Vec<f64>,
}

impl NormGains {
    fn ones(cfg: &ModelConfig) -> Self {
        Self {
            attn: vec![vec![1.0; cfg.d_model]; cfg.n_layers],
            mlp: vec![vec![1.0; cfg.d_model]; cfg.n_layers],
            final_norm: vec![1.0; cfg.d_model],
        }
    }

    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let ok = self.attn.len() == cfg.n_layers
            && self.mlp.len() == cfg.n_layers
            && self
                .attn
                .iter()
                .chain(&self.mlp)
                .chain(std::iter::once(&self.final_norm))
                .all(|g| g.len() == cfg.d_model && g.iter().all(|x| x.is_finite()));
        if ok {
            Ok(())
        } else {
            Err(Error::Input("norm gains do not match the model config".into()))
        }
    }
}

/// Where the full-precision weights came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSource {
    /// Seeded Gaussian init, reproducible from the seed.
    Random { seed: u64 },
    /// Weights supplied by the caller; the unquantized copy is not kept on disk.
    External,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: ModelConfig,
    norms: NormGains,
    source: ModelSource,
    quantizer: String,
}

/// Seeded Gaussian weights with standard deviation `1 / sqrt(d_model)`.
pub fn random_weights(cfg: &ModelConfig, seed: u64) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / (cfg.d_model as f64).sqrt())
        .map_err(|e| Error::Config(e.to_string()))?;
    Ok(cfg
        .tensor_shapes()
        .iter()
        .map(|(_, r, c)| (0..r * c).map(|_| normal.sample(&mut rng)).collect())
        .collect())
}

/// Dense weights plus the tick of their last use, keyed by (tensor, bits).
type CacheEntries = HashMap<(usize, u8), (Arc<Vec<f64>>, u64)>;

struct DequantCache {
    budget: usize,
    used: usize,
    tick: u64,
    entries: CacheEntries,
}

impl DequantCache {
    fn new(budget: usize) -> Self {
        Self {
            budget,
            used: 0,
            tick: 0,
            entries: HashMap::new(),
        }
    }

    fn get(&mut self, key: (usize, u8)) -> Option<Arc<Vec<f64>>> {
        self.tick += 1;
        let tick = self.tick;
        self.entries.get_mut(&key).map(|(m, t)| {
            *t = tick;
            Arc::clone(m)
        })
    }

    fn insert(&mut self, key: (usize, u8), m: Arc<Vec<f64>>) {
        self.tick += 1;
        self.used += m.len() * 8;
        self.entries.insert(key, (m, self.tick));
        while self.used > self.budget && self.entries.len() > 1 {
            let victim = self
                .entries
                .iter()
                .filter(|(k, _)| **k != key)
                .min_by_key(|(_, (_, t))| *t)
                .map(|(k, _)| *k)
                .expect("more than one entry");
            let (m, _) = self.entries.remove(&victim).expect("present");
            self.used -= m.len() * 8;
        }
    }
}

/// Quantized weights readable at any supported precision, plus the
/// unquantized reference when it is available.
pub struct ModelVariants {
    config: ModelConfig,
    tensors: Vec<QuantizedTensor>,
    norms: NormGains,
    reference: Option<Vec<Arc<Vec<f64>>>>,
    source: ModelSource,
    quantizer: String,
    cache: Mutex<DequantCache>,
}

impl std::fmt::Debug for ModelVariants {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelVariants")
            .field("config", &self.config)
            .field("p_max", &self.p_max())
            .field("source", &self.source)
            .finish_non_exhaustive()
    }
}

impl ModelVariants {
    /// Quantizes dense weights given in [`ModelConfig::tensor_shapes`] order.
    pub fn from_dense(
        config: ModelConfig,
        dense: Vec<Vec<f64>>,
        quantizer: &dyn Quantizer,
        source: ModelSource,
    ) -> Result<Self> {
        config.validate()?;
        let shapes = config.tensor_shapes();
        if dense.len() != shapes.len() {
            return Err(Error::Input(format!(
                "expected {} tensors, got {}",
                shapes.len(),
                dense.len()
            )));
        }
        let tensors = shapes
            .iter()
            .zip(&dense)
            .map(|((name, r, c), w)| {
                quantizer.quantize(w, *r, *c).map_err(|e| match e {
                    Error::Input(m) => Error::Input(format!("{name}: {m}")),
                    other => other,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let p_max = tensors[0].p_max();
        if tensors.iter().any(|t| t.p_max() != p_max) {
            return Err(Error::Contract("quantizer produced mixed p_max".into()));
        }
        Ok(Self {
            norms: NormGains::ones(&config),
            config,
            tensors,
            reference: Some(dense.into_iter().map(Arc::new).collect()),
            source,
            quantizer: quantizer.name().to_string(),
            cache: Mutex::new(DequantCache::new(DEFAULT_DEQUANT_BUDGET)),
        })
    }

    /// Seeded random model quantized with the uniform quantizer.
    pub fn random(config: ModelConfig, seed: u64, p_max: u8, group_size: usize) -> Result<Self> {
        let dense = random_weights(&config, seed)?;
        Self::from_dense(
            config,
            dense,
            &UniformQuantizer { p_max, group_size },
            ModelSource::Random { seed },
        )
    }

    pub fn with_dequant_budget(self, bytes: usize) -> Self {
        *self.cache.lock().expect("cache lock") = DequantCache::new(bytes);
        self
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn p_max(&self) -> u8 {
        self.tensors[0].p_max()
    }

    pub fn group_size(&self) -> usize {
        self.tensors[0].group_size()
    }

    pub fn source(&self) -> &ModelSource {
        &self.source
    }

    pub fn norms(&self) -> &NormGains {
        &self.norms
    }

    pub fn tensors(&self) -> &[QuantizedTensor] {
        &self.tensors
    }

    pub fn has_reference(&self) -> bool {
        self.reference.is_some()
    }

    /// Precision of the reference model: full precision when the unquantized
    /// weights are known, otherwise `p_max`.
    pub fn reference_precision(&self) -> u8 {
        if self.has_reference() {
            FULL_PRECISION
        } else {
            self.p_max()
        }
    }

    pub fn supports(&self, p: u8) -> bool {
        (1..=self.p_max()).contains(&p) || (p == FULL_PRECISION && self.has_reference())
    }

    /// All weight matrices at precision `p`, in storage order.
    pub fn weights_at(&self, p: u8) -> Result<Vec<Arc<Vec<f64>>>> {
        if p == FULL_PRECISION {
            return self.reference.clone().ok_or_else(|| {
                Error::Config("full-precision weights are not available for this model".into())
            });
        }
        if !self.supports(p) {
            return Err(Error::Config(format!(
                "precision {p} outside [1, {}]",
                self.p_max()
            )));
        }
        (0..self.tensors.len()).map(|i| self.tensor_at(i, p)).collect()
    }

    fn tensor_at(&self, i: usize, p: u8) -> Result<Arc<Vec<f64>>> {
        if let Some(m) = self.cache.lock().expect("cache lock").get((i, p)) {
            return Ok(m);
        }
        let m = Arc::new(self.tensors[i].dequantize(p)?);
        self.cache
            .lock()
            .expect("cache lock")
            .insert((i, p), Arc::clone(&m));
        Ok(m)
    }

    pub fn to_weight_file(&self) -> WeightFile {
        let meta = ModelMeta {
            config: self.config,
            norms: self.norms.clone(),
            source: self.source.clone(),
            quantizer: self.quantizer.clone(),
        };
        WeightFile {
            model: serde_json::to_value(meta).expect("metadata serializes"),
            tensors: self
                .config
                .tensor_shapes()
                .into_iter()
                .map(|(n, _, _)| n)
                .zip(self.tensors.iter().cloned())
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let file = self.to_weight_file();
        serialize_model(&file.tensors, &file.model)
    }

    /// Loads a weight file. Seeded random models get their unquantized
    /// reference regenerated from the recorded seed.
    pub fn from_weight_file(file: WeightFile) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_value(file.model)
            .map_err(|e| Error::Input(format!("model metadata: {e}")))?;
        meta.config.validate()?;
        meta.norms.check(&meta.config)?;
        let shapes = meta.config.tensor_shapes();
        if shapes.len() != file.tensors.len() {
            return Err(Error::Input(format!(
                "weight file has {} tensors, config expects {}",
                file.tensors.len(),
                shapes.len()
            )));
        }
        for ((name, r, c), (fname, t)) in shapes.iter().zip(&file.tensors) {
            if name != fname || *r != t.rows() || *c != t.cols() {
                return Err(Error::Input(format!(
                    "tensor `{fname}` {}x{} does not match expected `{name}` {r}x{c}",
                    t.rows(),
                    t.cols()
                )));
            }
        }
        let reference = match meta.source {
            ModelSource::Random { seed } => Some(
                random_weights(&meta.config, seed)?
                    .into_iter()
                    .map(Arc::new)
                    .collect(),
            ),
            ModelSource::External => None,
        };
        Ok(Self {
            config: meta.config,
            tensors: file.tensors.into_iter().map(|(_, t)| t).collect(),
            norms: meta.norms,
            reference,
            source: meta.source,
            quantizer: meta.quantizer,
            cache: Mutex::new(DequantCache::new(DEFAULT_DEQUANT_BUDGET)),
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_weight_file(parse_model(bytes)?)
    }

    /// Per-tensor worst reconstruction error at `p_max`, with each tensor's
    /// largest half-step bound.
    pub fn quantization_report(&self) -> Option<Vec<TensorError>> {
        let reference = self.reference.as_ref()?;
        Some(
            self.config
                .tensor_shapes()
                .iter()
                .zip(&self.tensors)
                .zip(reference)
                .map(|(((name, _, _), qt), dense)| tensor_error(name, qt, dense))
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorError {
    pub name: String,
    pub max_abs_error: f64,
    /// Largest `|w - w_hat| - step / 2` over all weights; non-positive when
    /// every group honours the round-to-nearest bound.
    pub max_bound_excess: f64,
    pub within_bound: bool,
}

fn tensor_error(name: &str, qt: &QuantizedTensor, dense: &[f64]) -> TensorError {
    let rec = qt
        .dequantize(qt.p_max())
        .expect("p_max is always a valid precision");
    let mut max_abs_error = 0.0f64;
    let mut max_bound_excess = f64::NEG_INFINITY;
    for (i, (w, r)) in dense.iter().zip(&rec).enumerate() {
        let err = (w - r).abs();
        let half = f64::from(qt.steps()[qt.group_of(i)]) / 2.0;
        max_abs_error = max_abs_error.max(err);
        max_bound_excess = max_bound_excess.max(err - half);
    }
    TensorError {
        name: name.to_string(),
        max_abs_error,
        max_bound_excess,
        // allow f64 evaluation noise only
        within_bound: max_bound_excess <= 1e-12,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 12,
            vocab_size: 11,
            max_context: 16,
            rope_theta: 10_000.0,
        }
    }

    #[test]
    fn random_model_round_trips_through_bytes() {
        let m = ModelVariants::random(tiny(), 3, 4, 4).unwrap();
        let bytes = m.to_bytes().unwrap();
        let back = ModelVariants::from_bytes(&bytes).unwrap();
        assert_eq!(back.tensors(), m.tensors());
        assert_eq!(back.config(), m.config());
        assert!(back.has_reference());
        assert_eq!(
            back.weights_at(16).unwrap()[3],
            m.weights_at(16).unwrap()[3]
        );
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = ModelVariants::random(tiny(), 7, 4, 4).unwrap().to_bytes().unwrap();
        let b = ModelVariants::random(tiny(), 7, 4, 4).unwrap().to_bytes().unwrap();
        let c = ModelVariants::random(tiny(), 8, 4, 4).unwrap().to_bytes().unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn precision_support() {
        let m = ModelVariants::random(tiny(), 3, 3, 4).unwrap();
        assert!(m.supports(1) && m.supports(3) && m.supports(16));
        assert!(!m.supports(4) && !m.supports(0));
        assert!(m.weights_at(4).is_err());
        let shapes = m.config().tensor_shapes();
        for p in 1..=3 {
            let w = m.weights_at(p).unwrap();
            for (t, (_, r, c)) in w.iter().zip(&shapes) {
                assert_eq!(t.len(), r * c);
            }
        }
    }

    #[test]
    fn lru_respects_budget_and_keeps_results() {
        let m = ModelVariants::random(tiny(), 3, 4, 4)
            .unwrap()
            .with_dequant_budget(1024);
        let first = m.weights_at(2).unwrap();
        let _ = m.weights_at(3).unwrap();
        let again = m.weights_at(2).unwrap();
        assert_eq!(first, again);
        let cache = m.cache.lock().unwrap();
        let largest = m.tensors().iter().map(|t| t.rows() * t.cols() * 8).max().unwrap();
        assert!(cache.used <= 1024.max(largest));
    }

    #[test]
    fn quantization_report_within_half_step() {
        let m = ModelVariants::random(tiny(), 5, 4, 4).unwrap();
        let report = m.quantization_report().unwrap();
        assert!(report.iter().all(|e| e.within_bound));
    }
}
