use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{PrecisionSchedule, SwitchGrid};
use crate::tinylm::{argmax, softmax_in_place, PrecisionScheduler, PrefillOutput};

use super::features::FeatureSource;

pub const NET_FORMAT_TAG: &str = "pmpd-sched-v1";
pub const DEFAULT_HIDDEN: usize = 64;

/// Trainable parameters. `w1` is `hidden x d_v`, `w2` is `classes x hidden`,
/// both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub query: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Params {
    pub fn zeros_like(other: &Params) -> Params {
        Params {
            query: vec![0.0; other.query.len()],
            w1: vec![0.0; other.w1.len()],
            b1: vec![0.0; other.b1.len()],
            w2: vec![0.0; other.w2.len()],
            b2: vec![0.0; other.b2.len()],
        }
    }

    pub fn slices(&self) -> [&Vec<f64>; 5] {
        [&self.query, &self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn slices_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [
            &mut self.query,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Params) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for dst in self.slices_mut() {
            dst.iter_mut().for_each(|d| *d *= alpha);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }
}

/// Attention-pooled KV features feeding a one-hidden-layer ReLU classifier
/// over switch-point grid indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetJson", into = "NetJson")]
pub struct SchedulerNet {
    pub params: Params,
    d_k: usize,
    d_v: usize,
    hidden: usize,
    grid: SwitchGrid,
    high: u8,
    low: u8,
    prefill: u8,
    feature: FeatureSource,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct NetForward {
    /// Pooling weights over the `T` positions.
    pub attention: Vec<f64>,
    pub pooled: Vec<f64>,
    pub pre_activation: Vec<f64>,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub d_k: usize,
    pub d_v: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetPrecisions {
    pub high: u8,
    pub low: u8,
    pub prefill: u8,
}

impl SchedulerNet {
    pub fn new(
        shape: NetShape,
        grid: SwitchGrid,
        precisions: NetPrecisions,
        feature: FeatureSource,
        seed: u64,
    ) -> Result<Self> {
        let NetShape { d_k, d_v, hidden } = shape;
        if d_k == 0 || d_v == 0 || hidden == 0 {
            return Err(Error::Config(format!("degenerate scheduler shape {shape:?}")));
        }
        PrecisionSchedule::two_level(precisions.high, precisions.low, 0, precisions.prefill, grid.horizon())?;
        let classes = grid.n();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |n: usize, std: f64| -> Vec<f64> {
            let d = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| d.sample(&mut rng)).collect()
        };
        let params = Params {
            query: gauss(d_k, 0.1 / (d_k as f64).sqrt()),
            w1: gauss(hidden * d_v, (2.0 / d_v as f64).sqrt()),
            b1: vec![0.0; hidden],
            w2: gauss(classes * hidden, (1.0 / hidden as f64).sqrt()),
            b2: vec![0.0; classes],
        };
        Ok(Self {
            params,
            d_k,
            d_v,
            hidden,
            grid,
            high: precisions.high,
            low: precisions.low,
            prefill: precisions.prefill,
            feature,
        })
    }

    pub fn shape(&self) -> NetShape {
        NetShape {
            d_k: self.d_k,
            d_v: self.d_v,
            hidden: self.hidden,
        }
    }

    pub fn classes(&self) -> usize {
        self.grid.n()
    }

    pub fn grid(&self) -> &SwitchGrid {
        &self.grid
    }

    pub fn feature(&self) -> FeatureSource {
        self.feature
    }

    pub fn precisions(&self) -> NetPrecisions {
        NetPrecisions {
            high: self.high,
            low: self.low,
            prefill: self.prefill,
        }
    }

    fn check_inputs(&self, keys: &[f64], values: &[f64], t: usize) -> Result<()> {
        if t == 0 {
            return Err(Error::Input("pooling needs at least one position".into()));
        }
        if keys.len() != t * self.d_k || values.len() != t * self.d_v {
            return Err(Error::Config(format!(
                "feature widths ({}, {}) over {t} positions do not match scheduler ({}, {})",
                keys.len() / t,
                values.len() / t,
                self.d_k,
                self.d_v
            )));
        }
        Ok(())
    }

    /// `softmax(q K^T / sqrt(d_k)) V` and the pooling weights.
    pub fn pool_kv(&self, keys: &[f64], values: &[f64], t: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_inputs(keys, values, t)?;
        let scale = 1.0 / (self.d_k as f64).sqrt();
        let mut attention: Vec<f64> = keys
            .chunks_exact(self.d_k)
            .map(|k| k.iter().zip(&self.params.query).map(|(a, b)| a * b).sum::<f64>() * scale)
            .collect();
        softmax_in_place(&mut attention);
        let mut pooled = vec![0.0; self.d_v];
        for (a, v) in attention.iter().zip(values.chunks_exact(self.d_v)) {
            for (o, x) in pooled.iter_mut().zip(v) {
                *o += a * x;
            }
        }
        Ok((attention, pooled))
    }

    pub fn forward(&self, keys: &[f64], values: &[f64], t: usize) -> Result<NetForward> {
        let (attention, pooled) = self.pool_kv(keys, values, t)?;
        let p = &self.params;
        let pre_activation: Vec<f64> = p
            .w1
            .chunks_exact(self.d_v)
            .zip(&p.b1)
            .map(|(row, b)| row.iter().zip(&pooled).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect();
        let hidden: Vec<f64> = pre_activation.iter().map(|&z| z.max(0.0)).collect();
        let logits: Vec<f64> = p
            .w2
            .chunks_exact(self.hidden)
            .zip(&p.b2)
            .map(|(row, b)| row.iter().zip(&hidden).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect();
        let mut probs = logits.clone();
        softmax_in_place(&mut probs);
        Ok(NetForward {
            attention,
            pooled,
            pre_activation,
            hidden,
            logits,
            probs,
        })
    }

    /// Cross-entropy of one example and its gradient with respect to every
    /// parameter, including the pooling query.
    pub fn loss_and_grad(&self, keys: &[f64], values: &[f64], t: usize, label: usize) -> Result<(f64, Params)> {
        if label >= self.classes() {
            return Err(Error::Input(format!(
                "label {label} outside {} classes",
                self.classes()
            )));
        }
        let f = self.forward(keys, values, t)?;
        let loss = -f.probs[label].max(f64::MIN_POSITIVE).ln();
        let p = &self.params;
        let mut g = Params::zeros_like(p);

        let mut d_logits = f.probs.clone();
        d_logits[label] -= 1.0;
        for (c, &dz) in d_logits.iter().enumerate() {
            g.b2[c] = dz;
            for (gw, h) in g.w2[c * self.hidden..(c + 1) * self.hidden].iter_mut().zip(&f.hidden) {
                *gw = dz * h;
            }
        }
        let mut d_pre = vec![0.0; self.hidden];
        for (j, d) in d_pre.iter_mut().enumerate() {
            if f.pre_activation[j] > 0.0 {
                *d = d_logits
                    .iter()
                    .enumerate()
                    .map(|(c, dz)| dz * p.w2[c * self.hidden + j])
                    .sum();
            }
        }
        let mut d_pooled = vec![0.0; self.d_v];
        for (j, &dp) in d_pre.iter().enumerate() {
            g.b1[j] = dp;
            let row = &p.w1[j * self.d_v..(j + 1) * self.d_v];
            for i in 0..self.d_v {
                g.w1[j * self.d_v + i] = dp * f.pooled[i];
                d_pooled[i] += dp * row[i];
            }
        }
        // pooled = sum_t a_t v_t ; a = softmax(s) ; s_t = q . k_t / sqrt(d_k)
        let d_attn: Vec<f64> = values
            .chunks_exact(self.d_v)
            .map(|v| v.iter().zip(&d_pooled).map(|(x, d)| x * d).sum())
            .collect();
        let mean: f64 = f.attention.iter().zip(&d_attn).map(|(a, d)| a * d).sum();
        let scale = 1.0 / (self.d_k as f64).sqrt();
        for ((a, da), k) in f.attention.iter().zip(&d_attn).zip(keys.chunks_exact(self.d_k)) {
            let ds = a * (da - mean) * scale;
            for (gq, kv) in g.query.iter_mut().zip(k) {
                *gq += ds * kv;
            }
        }
        Ok((loss, g))
    }

    /// Grid class with the highest probability; ties go to the lowest index.
    pub fn predict_class(&self, keys: &[f64], values: &[f64], t: usize) -> Result<usize> {
        Ok(argmax(&self.forward(keys, values, t)?.probs))
    }

    /// Two-level schedule switching to `low` at the predicted grid point.
    pub fn schedule_for_class(&self, class: usize) -> Result<PrecisionSchedule> {
        let st = *self.grid.points().get(class).ok_or_else(|| {
            Error::Input(format!("class {class} outside {} grid points", self.grid.n()))
        })?;
        PrecisionSchedule::two_level(self.high, self.low, st, self.prefill, self.grid.horizon())
    }

    pub fn predict_schedule(&self, prefilled: &PrefillOutput) -> Result<PrecisionSchedule> {
        let f = self.feature.extract(prefilled)?;
        let class = self.predict_class(&f.keys, &f.values, f.tokens)?;
        self.schedule_for_class(class)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let j: NetJson = serde_json::from_str(text).map_err(|e| Error::Input(format!("scheduler file: {e}")))?;
        j.try_into()
    }
}

impl PrecisionScheduler for SchedulerNet {
    fn prefill_precision(&self) -> u8 {
        self.prefill
    }

    fn plan(&self, prefilled: &PrefillOutput) -> Result<PrecisionSchedule> {
        self.predict_schedule(prefilled)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorJson {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TensorJson {
    fn new(shape: Vec<usize>, data: &[f64]) -> Self {
        Self {
            shape,
            data: data.to_vec(),
        }
    }

    fn take(self, shape: &[usize], name: &str) -> Result<Vec<f64>> {
        if self.shape != shape || self.data.len() != shape.iter().product::<usize>() {
            return Err(Error::Input(format!(
                "parameter `{name}` has shape {:?} with {} values, expected {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        Ok(self.data)
    }
}

#[derive(Serialize, Deserialize)]
struct NetJson {
    format: String,
    grid: SwitchGrid,
    high: u8,
    low: u8,
    prefill: u8,
    feature: FeatureSource,
    query: TensorJson,
    w1: TensorJson,
    b1: TensorJson,
    w2: TensorJson,
    b2: TensorJson,
}

impl From<SchedulerNet> for NetJson {
    fn from(n: SchedulerNet) -> Self {
        let c = n.classes();
        Self {
            format: NET_FORMAT_TAG.into(),
            query: TensorJson::new(vec![n.d_k], &n.params.query),
            w1: TensorJson::new(vec![n.hidden, n.d_v], &n.params.w1),
            b1: TensorJson::new(vec![n.hidden], &n.params.b1),
            w2: TensorJson::new(vec![c, n.hidden], &n.params.w2),
            b2: TensorJson::new(vec![c], &n.params.b2),
            grid: n.grid,
            high: n.high,
            low: n.low,
            prefill: n.prefill,
            feature: n.feature,
        }
    }
}

impl TryFrom<NetJson> for SchedulerNet {
    type Error = Error;

    fn try_from(j: NetJson) -> Result<Self> {
        if j.format != NET_FORMAT_TAG {
            return Err(Error::Input(format!(
                "scheduler format tag `{}`, expected `{NET_FORMAT_TAG}`",
                j.format
            )));
        }
        let d_k = j.query.shape.first().copied().unwrap_or(0);
        let (hidden, d_v) = match j.w1.shape[..] {
            [h, v] => (h, v),
            _ => return Err(Error::Input("w1 must be two-dimensional".into())),
        };
        let c = j.grid.n();
        let params = Params {
            query: j.query.take(&[d_k], "query")?,
            w1: j.w1.take(&[hidden, d_v], "w1")?,
            b1: j.b1.take(&[hidden], "b1")?,
            w2: j.w2.take(&[c, hidden], "w2")?,
            b2: j.b2.take(&[c], "b2")?,
        };
        if !params.all_finite() {
            return Err(Error::Input("non-finite scheduler parameter".into()));
        }
        if d_k == 0 || d_v == 0 || hidden == 0 {
            return Err(Error::Input("degenerate scheduler shape".into()));
        }
        PrecisionSchedule::two_level(j.high, j.low, 0, j.prefill, j.grid.horizon())?;
        Ok(Self {
            params,
            d_k,
            d_v,
            hidden,
            grid: j.grid,
            high: j.high,
            low: j.low,
            prefill: j.prefill,
            feature: j.feature,
        })
    }
}
