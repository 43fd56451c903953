//! Analytic latency model: a roofline accelerator for prefill and decode, and
//! a step-weighted kernel-latency average for measured GPU numbers.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{PrecisionSchedule, FULL_PRECISION};
use crate::tinylm::ModelConfig;

/// Bytes of quantization metadata per group (an f32 minimum and an f32 step).
pub const GROUP_METADATA_BYTES: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardwareConfig {
    pub mac_units: u64,
    pub clock_hz: f64,
    pub mem_bw_bytes_per_s: f64,
    /// Overlapped compute and memory take the max of the two, otherwise the sum.
    pub overlap: bool,
}

impl HardwareConfig {
    /// 4K MACs at 1 GHz with 32 GB/s off-chip bandwidth.
    pub fn npu_4k() -> Self {
        Self {
            mac_units: 4096,
            clock_hz: 1e9,
            mem_bw_bytes_per_s: 32e9,
            overlap: true,
        }
    }

    /// 16K MACs at 1 GHz with 32 GB/s off-chip bandwidth.
    pub fn npu_16k() -> Self {
        Self {
            mac_units: 16384,
            ..Self::npu_4k()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.mac_units > 0
            && self.clock_hz.is_finite()
            && self.clock_hz > 0.0
            && self.mem_bw_bytes_per_s.is_finite()
            && self.mem_bw_bytes_per_s > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("hardware parameters must be positive: {self:?}")))
        }
    }

    fn combine(&self, compute: f64, memory: f64) -> f64 {
        if self.overlap {
            compute.max(memory)
        } else {
            compute + memory
        }
    }
}

/// Parameter and KV-cache sizes of a decoder-only model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelFootprint {
    pub n_layers: u64,
    pub attn_params_per_layer: u64,
    pub mlp_params_per_layer: u64,
    pub embedding_params: u64,
    pub head_params: u64,
    /// Key plus value bytes for one token in one layer, at 16 bits.
    pub kv_bytes_per_token_per_layer: u64,
    pub total_params: u64,
    /// Weights sharing one (min, step) pair.
    pub group_size: u64,
}

impl ModelFootprint {
    pub fn dense(n_layers: u64, d_model: u64, d_ff: u64, vocab: u64, group_size: u64) -> Result<Self> {
        let attn = 4 * d_model * d_model;
        let mlp = 3 * d_model * d_ff;
        let fp = Self {
            n_layers,
            attn_params_per_layer: attn,
            mlp_params_per_layer: mlp,
            embedding_params: vocab * d_model,
            head_params: vocab * d_model,
            kv_bytes_per_token_per_layer: 2 * d_model * 2,
            total_params: n_layers * (attn + mlp) + 2 * vocab * d_model,
            group_size,
        };
        fp.validate()?;
        Ok(fp)
    }

    pub fn from_config(cfg: &ModelConfig, group_size: usize) -> Result<Self> {
        Self::dense(
            cfg.n_layers as u64,
            cfg.d_model as u64,
            cfg.d_ff as u64,
            cfg.vocab_size as u64,
            group_size as u64,
        )
    }

    /// A 7B-class footprint (32 layers, d_model 4096) with one group per row.
    pub fn vicuna_7b() -> Self {
        Self::dense(32, 4096, 11008, 32000, 4096).expect("valid preset")
    }

    /// A 1.4B-class mobile footprint (24 layers, d_model 2048) with one group per row.
    pub fn mobile_1_4b() -> Self {
        Self::dense(24, 2048, 5632, 32000, 2048).expect("valid preset")
    }

    pub fn validate(&self) -> Result<()> {
        let parts = self.n_layers * (self.attn_params_per_layer + self.mlp_params_per_layer)
            + self.embedding_params
            + self.head_params;
        if parts != self.total_params {
            return Err(Error::Config(format!(
                "footprint total {} differs from the sum of its parts {parts}",
                self.total_params
            )));
        }
        if self.total_params == 0 || self.n_layers == 0 || self.group_size == 0 {
            return Err(Error::Config(format!("degenerate footprint {self:?}")));
        }
        Ok(())
    }

    pub fn groups(&self) -> u64 {
        self.total_params.div_ceil(self.group_size)
    }
}

/// Terms included in the latency model. Disabling terms isolates the
/// bandwidth ratio between precisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerfOptions {
    pub kv_traffic: bool,
    pub compute: bool,
    pub metadata: bool,
}

impl Default for PerfOptions {
    fn default() -> Self {
        Self {
            kv_traffic: true,
            compute: true,
            metadata: true,
        }
    }
}

impl PerfOptions {
    pub fn weights_only() -> Self {
        Self {
            kv_traffic: false,
            compute: false,
            metadata: false,
        }
    }
}

fn check_bits(p: u8) -> Result<()> {
    if p == 0 {
        return Err(Error::Input("bit-width must be at least 1".into()));
    }
    Ok(())
}

/// Bytes moved to stream every weight once at `p` bits. Full precision
/// carries no quantization metadata.
pub fn weight_bytes(fp: &ModelFootprint, p: u8, opts: &PerfOptions) -> f64 {
    let mut bytes = fp.total_params as f64 * f64::from(p) / 8.0;
    if opts.metadata && p != FULL_PRECISION {
        bytes += fp.groups() as f64 * GROUP_METADATA_BYTES;
    }
    bytes
}

fn kv_bytes(fp: &ModelFootprint, tokens: u64, opts: &PerfOptions) -> f64 {
    if opts.kv_traffic {
        (fp.n_layers * fp.kv_bytes_per_token_per_layer * tokens) as f64
    } else {
        0.0
    }
}

fn compute_time(fp: &ModelFootprint, tokens: u64, hw: &HardwareConfig, opts: &PerfOptions) -> f64 {
    if opts.compute {
        2.0 * fp.total_params as f64 * tokens as f64 / (hw.mac_units as f64 * hw.clock_hz)
    } else {
        0.0
    }
}

/// Pure memory and pure compute times of one decode step with
/// `past_tokens` already cached.
pub fn decode_token_bounds(
    fp: &ModelFootprint,
    p: u8,
    hw: &HardwareConfig,
    opts: &PerfOptions,
    past_tokens: u64,
) -> Result<(f64, f64)> {
    check_bits(p)?;
    hw.validate()?;
    // every past entry is read and the new one written
    let bytes = weight_bytes(fp, p, opts) + kv_bytes(fp, past_tokens + 1, opts);
    Ok((compute_time(fp, 1, hw, opts), bytes / hw.mem_bw_bytes_per_s))
}

pub fn decode_token_latency(
    fp: &ModelFootprint,
    p: u8,
    hw: &HardwareConfig,
    opts: &PerfOptions,
    past_tokens: u64,
) -> Result<f64> {
    let (compute, memory) = decode_token_bounds(fp, p, hw, opts, past_tokens)?;
    Ok(hw.combine(compute, memory))
}

/// One weight pass at `p` bits against the compute for the whole prompt.
/// A one-token prompt costs exactly one decode step on an empty cache.
pub fn prefill_latency(
    fp: &ModelFootprint,
    p: u8,
    hw: &HardwareConfig,
    opts: &PerfOptions,
    prompt_len: u64,
) -> Result<f64> {
    check_bits(p)?;
    hw.validate()?;
    if prompt_len == 0 {
        return Err(Error::Input("prefill needs at least one prompt token".into()));
    }
    let memory = (weight_bytes(fp, p, opts) + kv_bytes(fp, prompt_len, opts)) / hw.mem_bw_bytes_per_s;
    Ok(hw.combine(compute_time(fp, prompt_len, hw, opts), memory))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfReport {
    pub prompt_len: u64,
    pub gen_len: u64,
    pub prefill_precision: u8,
    pub prefill_latency_s: f64,
    /// Per-token decode latency of each scheduled precision at the first decode position.
    pub decode_latency_per_token_s: BTreeMap<u8, f64>,
    pub decode_latency_s: f64,
    pub end_to_end_s: f64,
    pub tokens_per_s: f64,
    pub fp16_end_to_end_s: f64,
    pub speedup_vs_fp16: f64,
    pub decode_speedup_vs_fp16: f64,
    pub uniform_high_end_to_end_s: f64,
    pub speedup_vs_uniform_high: f64,
    pub avg_bitwidth: f64,
    /// Extra end-to-end time from running prefill above the highest decode precision, in percent.
    pub prefill_uplift_overhead_pct: f64,
}

impl PerfReport {
    pub const CSV_HEADER: &'static str = "prompt_len,gen_len,prefill_precision,avg_bitwidth,prefill_latency_s,decode_latency_s,end_to_end_s,tokens_per_s,speedup_vs_fp16,decode_speedup_vs_fp16,speedup_vs_uniform_high,prefill_uplift_overhead_pct";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.prompt_len,
            self.gen_len,
            self.prefill_precision,
            self.avg_bitwidth,
            self.prefill_latency_s,
            self.decode_latency_s,
            self.end_to_end_s,
            self.tokens_per_s,
            self.speedup_vs_fp16,
            self.decode_speedup_vs_fp16,
            self.speedup_vs_uniform_high,
            self.prefill_uplift_overhead_pct
        )
    }
}

/// Header plus one row per report.
pub fn reports_to_csv(reports: &[PerfReport]) -> String {
    let mut out = String::from(PerfReport::CSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Sum of decode latencies for steps `0..gen_len` under `precision`.
fn decode_time(
    fp: &ModelFootprint,
    hw: &HardwareConfig,
    opts: &PerfOptions,
    prompt_len: u64,
    gen_len: u64,
    precision: impl Fn(usize) -> u8,
) -> Result<f64> {
    (0..gen_len)
        .map(|i| decode_token_latency(fp, precision(i as usize), hw, opts, prompt_len + i))
        .sum()
}

pub fn pipeline_perf(
    fp: &ModelFootprint,
    schedule: &PrecisionSchedule,
    hw: &HardwareConfig,
    opts: &PerfOptions,
    prompt_len: u64,
    gen_len: u64,
) -> Result<PerfReport> {
    schedule.ensure_valid()?;
    if gen_len == 0 {
        return Err(Error::Input("gen_len must be at least 1".into()));
    }
    if gen_len > schedule.horizon() as u64 {
        return Err(Error::Input(format!(
            "gen_len {gen_len} exceeds schedule horizon {}",
            schedule.horizon()
        )));
    }
    let p_pre = schedule.prefill();
    let high = schedule.highest();

    let prefill = prefill_latency(fp, p_pre, hw, opts, prompt_len)?;
    let decode = decode_time(fp, hw, opts, prompt_len, gen_len, |i| schedule.precision_at(i))?;
    let e2e = prefill + decode;

    let fp16_prefill = prefill_latency(fp, FULL_PRECISION, hw, opts, prompt_len)?;
    let fp16_decode = decode_time(fp, hw, opts, prompt_len, gen_len, |_| FULL_PRECISION)?;
    let fp16 = fp16_prefill + fp16_decode;

    let high_decode = decode_time(fp, hw, opts, prompt_len, gen_len, |_| high)?;
    let uniform_high = prefill + high_decode;

    let overhead = if p_pre > high {
        let base = prefill_latency(fp, high, hw, opts, prompt_len)? + decode;
        (e2e - base) / base * 100.0
    } else {
        0.0
    };

    let mut per_token = BTreeMap::new();
    for &p in schedule.precisions() {
        per_token.insert(p, decode_token_latency(fp, p, hw, opts, prompt_len)?);
    }

    Ok(PerfReport {
        prompt_len,
        gen_len,
        prefill_precision: p_pre,
        prefill_latency_s: prefill,
        decode_latency_per_token_s: per_token,
        decode_latency_s: decode,
        end_to_end_s: e2e,
        tokens_per_s: gen_len as f64 / decode,
        fp16_end_to_end_s: fp16,
        speedup_vs_fp16: fp16 / e2e,
        decode_speedup_vs_fp16: fp16_decode / decode,
        uniform_high_end_to_end_s: uniform_high,
        speedup_vs_uniform_high: uniform_high / e2e,
        avg_bitwidth: schedule.avg_bitwidth(gen_len as usize)?,
        prefill_uplift_overhead_pct: overhead,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedLatency {
    pub latency_us: f64,
    /// Present when the table has a full-precision entry.
    pub speedup_vs_fp16: Option<f64>,
}

/// Kernel latency averaged over decode steps by the precision each step uses.
pub fn weighted_gpu_latency(
    latencies_us: &BTreeMap<u8, f64>,
    schedule: &PrecisionSchedule,
    gen_len: usize,
) -> Result<WeightedLatency> {
    if gen_len == 0 {
        return Err(Error::Input("gen_len must be at least 1".into()));
    }
    let mut steps: BTreeMap<u8, usize> = BTreeMap::new();
    for i in 0..gen_len {
        *steps.entry(schedule.precision_at(i)).or_default() += 1;
    }
    let mut latency_us = 0.0;
    for (p, n) in steps {
        let l = latencies_us
            .get(&p)
            .ok_or_else(|| Error::Input(format!("kernel latency table has no entry for {p} bits")))?;
        latency_us += n as f64 / gen_len as f64 * l;
    }
    Ok(WeightedLatency {
        latency_us,
        speedup_vs_fp16: latencies_us.get(&FULL_PRECISION).map(|f| f / latency_us),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn presets() {
        let v = ModelFootprint::vicuna_7b();
        assert!(rel(v.total_params as f64, 6.7e9) < 0.01);
        let m = ModelFootprint::mobile_1_4b();
        assert!(rel(m.total_params as f64, 1.4e9) < 0.05);
        assert_eq!(HardwareConfig::npu_16k().mac_units, 16384);
    }

    #[test]
    fn bandwidth_ratio_is_exact_without_overheads() {
        let fp = ModelFootprint::vicuna_7b();
        let hw = HardwareConfig::npu_16k();
        let o = PerfOptions::weights_only();
        let l16 = decode_token_latency(&fp, 16, &hw, &o, 100).unwrap();
        for b in 1..=8u8 {
            let lb = decode_token_latency(&fp, b, &hw, &o, 100).unwrap();
            assert!(rel(l16 / lb, 16.0 / f64::from(b)) < 1e-12);
        }
    }

    #[test]
    fn memory_bound_mobile_rate() {
        // 1.4e9 * 2 / 8 = 0.35 GB per token at 32 GB/s
        let fp = ModelFootprint {
            n_layers: 1,
            attn_params_per_layer: 1_400_000_000,
            mlp_params_per_layer: 0,
            embedding_params: 0,
            head_params: 0,
            kv_bytes_per_token_per_layer: 0,
            total_params: 1_400_000_000,
            group_size: 64,
        };
        fp.validate().unwrap();
        let l = decode_token_latency(&fp, 2, &HardwareConfig::npu_4k(), &PerfOptions::weights_only(), 0).unwrap();
        assert!((1.0 / l - 91.43).abs() < 0.01, "{}", 1.0 / l);
    }

    #[test]
    fn prefill_of_one_token_is_a_decode_step() {
        let fp = ModelFootprint::mobile_1_4b();
        for hw in [HardwareConfig::npu_4k(), HardwareConfig { overlap: false, ..HardwareConfig::npu_16k() }] {
            for p in [2, 3, 16] {
                let a = prefill_latency(&fp, p, &hw, &PerfOptions::default(), 1).unwrap();
                let b = decode_token_latency(&fp, p, &hw, &PerfOptions::default(), 0).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn long_prefill_is_compute_bound() {
        let fp = ModelFootprint::mobile_1_4b();
        let hw = HardwareConfig::npu_4k();
        let o = PerfOptions::default();
        let a = prefill_latency(&fp, 2, &hw, &o, 4096).unwrap();
        let b = prefill_latency(&fp, 8, &hw, &o, 4096).unwrap();
        assert_eq!(a, b);
        let expect = 2.0 * fp.total_params as f64 * 4096.0 / (4096.0 * 1e9);
        assert!(rel(a, expect) < 1e-12);
    }

    #[test]
    fn fp16_schedule_has_unit_speedup() {
        let s = PrecisionSchedule::uniform(16, 16, 64).unwrap();
        let r = pipeline_perf(&ModelFootprint::mobile_1_4b(), &s, &HardwareConfig::npu_4k(), &PerfOptions::default(), 32, 64).unwrap();
        assert_eq!(r.speedup_vs_fp16, 1.0);
        assert_eq!(r.avg_bitwidth, 16.0);
    }

    #[test]
    fn mixed_schedule_sits_between_uniform_baselines() {
        let fp = ModelFootprint::vicuna_7b();
        let hw = HardwareConfig::npu_16k();
        let o = PerfOptions::default();
        let speed = |s: &PrecisionSchedule| pipeline_perf(&fp, s, &hw, &o, 512, 256).unwrap().speedup_vs_fp16;
        let hi = speed(&PrecisionSchedule::uniform(3, 3, 256).unwrap());
        let lo = speed(&PrecisionSchedule::uniform(2, 3, 256).unwrap());
        let mix = speed(&PrecisionSchedule::two_level(3, 2, 100, 3, 256).unwrap());
        assert!(hi < mix && mix < lo, "{hi} {mix} {lo}");
    }

    #[test]
    fn report_decomposes_into_token_latencies() {
        let fp = ModelFootprint::mobile_1_4b();
        let hw = HardwareConfig::npu_4k();
        let o = PerfOptions::default();
        let s = PrecisionSchedule::two_level(4, 2, 7, 4, 20).unwrap();
        let r = pipeline_perf(&fp, &s, &hw, &o, 10, 20).unwrap();
        let manual: f64 = (0..20)
            .map(|i| decode_token_latency(&fp, if i < 7 { 4 } else { 2 }, &hw, &o, 10 + i as u64).unwrap())
            .sum();
        assert!(rel(r.decode_latency_s, manual) < 1e-12);
        assert!(rel(r.end_to_end_s, r.prefill_latency_s + r.decode_latency_s) < 1e-12);
        assert!(rel(r.tokens_per_s, 20.0 / r.decode_latency_s) < 1e-12);
        assert_eq!(r.decode_latency_per_token_s.len(), 2);
    }

    #[test]
    fn uplift_overhead_is_zero_without_uplift() {
        let s = PrecisionSchedule::two_level(3, 2, 5, 3, 10).unwrap();
        let r = pipeline_perf(&ModelFootprint::mobile_1_4b(), &s, &HardwareConfig::npu_4k(), &PerfOptions::default(), 8, 10).unwrap();
        assert_eq!(r.prefill_uplift_overhead_pct, 0.0);
        let s = PrecisionSchedule::two_level(3, 2, 5, 4, 10).unwrap();
        let hw = HardwareConfig { overlap: false, ..HardwareConfig::npu_4k() };
        let r = pipeline_perf(&ModelFootprint::mobile_1_4b(), &s, &hw, &PerfOptions::default(), 8, 10).unwrap();
        assert!(r.prefill_uplift_overhead_pct > 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let fp = ModelFootprint::mobile_1_4b();
        let hw = HardwareConfig::npu_4k();
        let o = PerfOptions::default();
        assert!(decode_token_latency(&fp, 0, &hw, &o, 0).is_err());
        assert!(prefill_latency(&fp, 2, &hw, &o, 0).is_err());
        let bad = HardwareConfig { mem_bw_bytes_per_s: 0.0, ..hw };
        assert!(decode_token_latency(&fp, 2, &bad, &o, 0).is_err());
        let s = PrecisionSchedule::uniform(2, 2, 8).unwrap();
        assert!(pipeline_perf(&fp, &s, &hw, &o, 4, 9).is_err());
        let broken = ModelFootprint { total_params: 1, ..fp };
        assert!(broken.validate().is_err());
    }

    #[test]
    fn weighted_latency_examples() {
        let table: BTreeMap<u8, f64> = [(3, 8.1), (2, 7.0), (16, 21.0)].into();
        let s = PrecisionSchedule::two_level(3, 2, 4, 3, 10).unwrap();
        let w = weighted_gpu_latency(&table, &s, 10).unwrap();
        assert!((w.latency_us - 7.44).abs() < 1e-12);
        assert!((w.speedup_vs_fp16.unwrap() - 21.0 / 7.44).abs() < 1e-12);

        let u = PrecisionSchedule::uniform(3, 3, 10).unwrap();
        assert_eq!(weighted_gpu_latency(&table, &u, 10).unwrap().latency_us, 8.1);

        let missing: BTreeMap<u8, f64> = [(3, 8.1)].into();
        assert!(matches!(weighted_gpu_latency(&missing, &s, 10), Err(Error::Input(_))));
    }

    #[test]
    fn csv_has_one_row_per_report() {
        let s = PrecisionSchedule::uniform(3, 3, 8).unwrap();
        let r = pipeline_perf(&ModelFootprint::mobile_1_4b(), &s, &HardwareConfig::npu_4k(), &PerfOptions::default(), 4, 8).unwrap();
        let csv = reports_to_csv(&[r.clone(), r]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1].split(',').count(), lines[0].split(',').count());
    }

    fn any_hw() -> impl Strategy<Value = HardwareConfig> {
        (1u64..100_000, 1e8f64..4e9, 1e9f64..1e12, any::<bool>()).prop_map(|(m, c, b, o)| HardwareConfig {
            mac_units: m,
            clock_hz: c,
            mem_bw_bytes_per_s: b,
            overlap: o,
        })
    }

    fn any_fp() -> impl Strategy<Value = ModelFootprint> {
        (1u64..48, 64u64..4096, 64u64..12000, 100u64..50000, 1u64..8192)
            .prop_map(|(l, d, f, v, g)| ModelFootprint::dense(l, d, f, v, g).unwrap())
    }

    proptest! {
        #[test]
        fn latency_monotone_in_bits(fp in any_fp(), hw in any_hw(), past in 0u64..2048, p in 1u8..8) {
            let o = PerfOptions::default();
            let lo = decode_token_latency(&fp, p, &hw, &o, past).unwrap();
            let hi = decode_token_latency(&fp, p + 1, &hw, &o, past).unwrap();
            prop_assert!(lo <= hi);
        }

        #[test]
        fn roofline_dominates_both_bounds(fp in any_fp(), hw in any_hw(), past in 0u64..2048, p in 1u8..=16) {
            let o = PerfOptions::default();
            let (c, m) = decode_token_bounds(&fp, p, &hw, &o, past).unwrap();
            let l = decode_token_latency(&fp, p, &hw, &o, past).unwrap();
            prop_assert!(l >= c && l >= m);
        }

        #[test]
        fn doubling_bandwidth_halves_memory_time(fp in any_fp(), hw in any_hw(), past in 0u64..2048, p in 1u8..=16) {
            let o = PerfOptions::default();
            let (_, m1) = decode_token_bounds(&fp, p, &hw, &o, past).unwrap();
            let hw2 = HardwareConfig { mem_bw_bytes_per_s: 2.0 * hw.mem_bw_bytes_per_s, ..hw };
            let (_, m2) = decode_token_bounds(&fp, p, &hw2, &o, past).unwrap();
            prop_assert!(rel(m2, m1 / 2.0) < 1e-12);
        }

        #[test]
        fn weighted_latency_is_convex(a in 0.1f64..100.0, b in 0.1f64..100.0, st in 0usize..=32) {
            let table: BTreeMap<u8, f64> = [(4, a), (2, b)].into();
            let s = PrecisionSchedule::two_level(4, 2, st, 4, 32).unwrap();
            let w = weighted_gpu_latency(&table, &s, 32).unwrap().latency_us;
            prop_assert!(w >= a.min(b) - 1e-12 && w <= a.max(b) + 1e-12);
        }
    }
}
