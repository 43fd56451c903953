//! Pre-norm decoder blocks: RMSNorm, rotary attention, SiLU-gated MLP.

use std::sync::Arc;

use super::config::{layer_tensor_index, LayerTensor, ModelConfig};
use super::variants::{ModelVariants, NormGains};
use crate::error::{Error, Result};

const RMS_EPS: f64 = 1e-6;

/// Per-layer keys (post-rotary) and values, each `T x d_model` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    width: usize,
    len: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl KvCache {
    pub fn new(n_layers: usize, width: usize) -> Self {
        Self {
            width,
            len: 0,
            keys: vec![Vec::new(); n_layers],
            values: vec![Vec::new(); n_layers],
        }
    }

    /// Tokens held.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn keys(&self, layer: usize) -> &[f64] {
        &self.keys[layer]
    }

    pub fn values(&self, layer: usize) -> &[f64] {
        &self.values[layer]
    }
}

/// Result of a prefill pass.
#[derive(Debug, Clone)]
pub struct PrefillOutput {
    pub logits: Vec<f64>,
    pub cache: KvCache,
    /// Final normed hidden states, `T x d_model`.
    pub hidden: Vec<f64>,
}

struct Weights<'a> {
    cfg: &'a ModelConfig,
    mats: Vec<Arc<Vec<f64>>>,
    norms: &'a NormGains,
}

impl Weights<'_> {
    fn layer(&self, l: usize, t: LayerTensor) -> &[f64] {
        &self.mats[layer_tensor_index(l, t)]
    }

    fn embedding(&self, token: u32) -> &[f64] {
        let d = self.cfg.d_model;
        let t = token as usize;
        &self.mats[0][t * d..(t + 1) * d]
    }

    fn lm_head(&self) -> &[f64] {
        self.mats.last().expect("lm head")
    }
}

fn load(model: &ModelVariants, p: u8) -> Result<Weights<'_>> {
    Ok(Weights {
        cfg: model.config(),
        mats: model.weights_at(p)?,
        norms: model.norms(),
    })
}

/// `w` is `[rows x cols]`; returns `w · x`.
fn matvec(w: &[f64], rows: usize, x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    debug_assert_eq!(w.len(), rows * cols);
    w.chunks_exact(cols).map(|row| dot(row, x)).collect()
}

/// Dot product with four independent accumulators so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ac, ar) = a.split_at(a.len() / 4 * 4);
    let (bc, br) = b.split_at(ac.len());
    for (x, y) in ac.chunks_exact(4).zip(bc.chunks_exact(4)) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn rms_norm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Numerically stable softmax in place.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

fn rope(x: &mut [f64], pos: usize, cfg: &ModelConfig) {
    let dh = cfg.d_head();
    for head in x.chunks_exact_mut(dh) {
        for i in 0..dh / 2 {
            let freq = cfg.rope_theta.powf(-((2 * i) as f64) / dh as f64);
            let (sin, cos) = (pos as f64 * freq).sin_cos();
            let (a, b) = (head[2 * i], head[2 * i + 1]);
            head[2 * i] = a * cos - b * sin;
            head[2 * i + 1] = a * sin + b * cos;
        }
    }
}

fn check_token(cfg: &ModelConfig, token: u32) -> Result<()> {
    if (token as usize) < cfg.vocab_size {
        Ok(())
    } else {
        Err(Error::Input(format!(
            "token id {token} outside vocabulary of {}",
            cfg.vocab_size
        )))
    }
}

fn mlp(w: &Weights<'_>, l: usize, h: &[f64]) -> Vec<f64> {
    let (d, f) = (w.cfg.d_model, w.cfg.d_ff);
    let gate = matvec(w.layer(l, LayerTensor::Gate), f, h);
    let up = matvec(w.layer(l, LayerTensor::Up), f, h);
    let act: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect();
    matvec(w.layer(l, LayerTensor::Down), d, &act)
}

fn project_qkv(w: &Weights<'_>, l: usize, h: &[f64], pos: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = w.cfg.d_model;
    let mut q = matvec(w.layer(l, LayerTensor::Wq), d, h);
    let mut k = matvec(w.layer(l, LayerTensor::Wk), d, h);
    let v = matvec(w.layer(l, LayerTensor::Wv), d, h);
    rope(&mut q, pos, w.cfg);
    rope(&mut k, pos, w.cfg);
    (q, k, v)
}

/// Full causal pass over `tokens` from position 0 without a cache.
///
/// Returns logits for every position, the per-layer keys/values, and the
/// final normed hidden states. Attention is computed as a masked
/// `T x T` score matrix per head.
pub fn forward_sequence(
    model: &ModelVariants,
    p: u8,
    tokens: &[u32],
) -> Result<(Vec<Vec<f64>>, KvCache, Vec<f64>)> {
    let cfg = model.config();
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_context {
        return Err(Error::Length(format!(
            "{} tokens exceed max context {}",
            tokens.len(),
            cfg.max_context
        )));
    }
    for &t in tokens {
        check_token(cfg, t)?;
    }
    let w = load(model, p)?;
    let (d, n, dh, nh) = (cfg.d_model, tokens.len(), cfg.d_head(), cfg.n_heads);
    let scale = 1.0 / (dh as f64).sqrt();

    let mut xs: Vec<Vec<f64>> = tokens.iter().map(|&t| w.embedding(t).to_vec()).collect();
    let mut cache = KvCache::new(cfg.n_layers, d);
    for l in 0..cfg.n_layers {
        let mut qs = Vec::with_capacity(n);
        let mut ks = Vec::with_capacity(n);
        let mut vs = Vec::with_capacity(n);
        for (pos, x) in xs.iter().enumerate() {
            let h = rms_norm(x, &w.norms.attn[l]);
            let (q, k, v) = project_qkv(&w, l, &h, pos);
            qs.push(q);
            ks.push(k);
            vs.push(v);
        }
        for head in 0..nh {
            let r = head * dh..(head + 1) * dh;
            let mut scores = vec![f64::NEG_INFINITY; n * n];
            for i in 0..n {
                for j in 0..=i {
                    scores[i * n + j] = qs[i][r.clone()]
                        .iter()
                        .zip(&ks[j][r.clone()])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        * scale;
                }
            }
            for (i, row) in scores.chunks_exact_mut(n).enumerate() {
                softmax_in_place(row);
                let mut out = vec![0.0; dh];
                for (j, &a) in row.iter().enumerate() {
                    for (o, v) in out.iter_mut().zip(&vs[j][r.clone()]) {
                        *o += a * v;
                    }
                }
                // stash head output in the query buffer; q is no longer needed
                qs[i][r.clone()].copy_from_slice(&out);
            }
        }
        for (pos, x) in xs.iter_mut().enumerate() {
            let attn = matvec(w.layer(l, LayerTensor::Wo), d, &qs[pos]);
            x.iter_mut().zip(&attn).for_each(|(a, b)| *a += b);
            let h = rms_norm(x, &w.norms.mlp[l]);
            let m = mlp(&w, l, &h);
            x.iter_mut().zip(&m).for_each(|(a, b)| *a += b);
        }
        cache.keys[l] = ks.concat();
        cache.values[l] = vs.concat();
    }
    cache.len = n;

    let mut hidden = Vec::with_capacity(n * d);
    let mut logits = Vec::with_capacity(n);
    for x in &xs {
        let h = rms_norm(x, &w.norms.final_norm);
        logits.push(matvec(w.lm_head(), cfg.vocab_size, &h));
        hidden.extend_from_slice(&h);
    }
    Ok((logits, cache, hidden))
}

/// Processes the whole prompt at precision `p`.
pub fn prefill(model: &ModelVariants, p: u8, prompt: &[u32]) -> Result<PrefillOutput> {
    let cfg = model.config();
    if prompt.len() >= cfg.max_context {
        return Err(Error::Length(format!(
            "prompt of {} tokens leaves no room in max context {}",
            prompt.len(),
            cfg.max_context
        )));
    }
    let (mut logits, cache, hidden) = forward_sequence(model, p, prompt)?;
    Ok(PrefillOutput {
        logits: logits.pop().expect("non-empty prompt"),
        cache,
        hidden,
    })
}

/// One token through every layer, attending over the cache; appends one
/// key/value row per layer.
pub fn decode_step(model: &ModelVariants, p: u8, token: u32, cache: &mut KvCache) -> Result<Vec<f64>> {
    let cfg = model.config();
    if cache.is_empty() {
        return Err(Error::Input("decode step needs a prefilled cache".into()));
    }
    if cache.n_layers() != cfg.n_layers || cache.width() != cfg.d_model {
        return Err(Error::Config("cache shape does not match the model".into()));
    }
    if cache.len() >= cfg.max_context {
        return Err(Error::Length(format!(
            "cache already holds max context {} tokens",
            cfg.max_context
        )));
    }
    check_token(cfg, token)?;
    let w = load(model, p)?;
    let (d, dh) = (cfg.d_model, cfg.d_head());
    let pos = cache.len();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut x = w.embedding(token).to_vec();
    for l in 0..cfg.n_layers {
        let h = rms_norm(&x, &w.norms.attn[l]);
        let (q, k, v) = project_qkv(&w, l, &h, pos);
        cache.keys[l].extend_from_slice(&k);
        cache.values[l].extend_from_slice(&v);
        let (keys, values) = (&cache.keys[l], &cache.values[l]);
        let mut o = vec![0.0; d];
        for head in 0..cfg.n_heads {
            let off = head * dh;
            let qh = &q[off..off + dh];
            let mut a: Vec<f64> = keys
                .chunks_exact(d)
                .map(|krow| {
                    qh.iter().zip(&krow[off..off + dh]).map(|(x, y)| x * y).sum::<f64>() * scale
                })
                .collect();
            softmax_in_place(&mut a);
            for (weight, vrow) in a.iter().zip(values.chunks_exact(d)) {
                for (oi, vi) in o[off..off + dh].iter_mut().zip(&vrow[off..off + dh]) {
                    *oi += weight * vi;
                }
            }
        }
        let attn = matvec(w.layer(l, LayerTensor::Wo), d, &o);
        x.iter_mut().zip(&attn).for_each(|(a, b)| *a += b);
        let h = rms_norm(&x, &w.norms.mlp[l]);
        let m = mlp(&w, l, &h);
        x.iter_mut().zip(&m).for_each(|(a, b)| *a += b);
    }
    cache.len += 1;
    let h = rms_norm(&x, &w.norms.final_norm);
    Ok(matvec(w.lm_head(), cfg.vocab_size, &h))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelVariants {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 24,
            vocab_size: 257,
            max_context: 12,
            rope_theta: 10_000.0,
        };
        ModelVariants::random(cfg, 11, 4, 8).unwrap()
    }

    fn rel_close(a: &[f64], b: &[f64], tol: f64) -> bool {
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * scale)
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut v = vec![1000.0, -3.0, 2.5, f64::NEG_INFINITY];
        softmax_in_place(&mut v);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(v[3], 0.0);
    }

    #[test]
    fn prefill_then_step_matches_longer_prefill() {
        let m = small();
        let seq = [72u32, 101, 108, 108, 111];
        for p in [2, 4, 16] {
            let mut out = prefill(&m, p, &seq[..4]).unwrap();
            assert_eq!(out.cache.len(), 4);
            let step = decode_step(&m, p, seq[4], &mut out.cache).unwrap();
            assert_eq!(out.cache.len(), 5);
            let full = prefill(&m, p, &seq).unwrap();
            assert!(rel_close(&step, &full.logits, 1e-9));
            for l in 0..2 {
                assert!(rel_close(out.cache.keys(l), full.cache.keys(l), 1e-12));
            }
        }
    }

    #[test]
    fn repeated_prefill_is_bit_identical() {
        let m = small();
        let a = prefill(&m, 3, &[1, 2, 3]).unwrap();
        let b = prefill(&m, 3, &[1, 2, 3]).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn precisions_produce_different_logits() {
        let m = small();
        let base = prefill(&m, 4, &[5, 6]).unwrap();
        let mut c2 = base.cache.clone();
        let mut c4 = base.cache.clone();
        let l2 = decode_step(&m, 2, 7, &mut c2).unwrap();
        let l4 = decode_step(&m, 4, 7, &mut c4).unwrap();
        assert_ne!(l2, l4);
    }

    #[test]
    fn length_and_token_errors() {
        let m = small();
        assert!(matches!(prefill(&m, 4, &[1; 12]), Err(Error::Length(_))));
        assert!(matches!(prefill(&m, 4, &[300]), Err(Error::Input(_))));
        assert!(matches!(prefill(&m, 4, &[]), Err(Error::Input(_))));
        let mut out = prefill(&m, 4, &[1; 11]).unwrap();
        decode_step(&m, 4, 1, &mut out.cache).unwrap();
        assert!(matches!(
            decode_step(&m, 4, 1, &mut out.cache),
            Err(Error::Length(_))
        ));
        let mut empty = KvCache::new(2, 16);
        assert!(decode_step(&m, 4, 1, &mut empty).is_err());
        assert!(prefill(&m, 5, &[1]).is_err());
    }
}
