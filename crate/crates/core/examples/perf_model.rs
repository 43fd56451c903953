//! Accelerator latency for fp16, uniform and switching schedules, plus the
//! step-weighted kernel latency used for measured GPU numbers.

use std::collections::BTreeMap;

use pmpd::perf::{pipeline_perf, reports_to_csv, weighted_gpu_latency, HardwareConfig, ModelFootprint, PerfOptions};
use pmpd::schedule::PrecisionSchedule;

fn main() -> anyhow::Result<()> {
    let opts = PerfOptions::default();
    let (prompt, gen) = (512, 256);
    let cases = [
        ("7B, 16K MACs", ModelFootprint::vicuna_7b(), HardwareConfig::npu_16k()),
        ("1.4B, 4K MACs", ModelFootprint::mobile_1_4b(), HardwareConfig::npu_4k()),
    ];
    let mut reports = Vec::new();
    for (name, fp, hw) in cases {
        for (label, s) in [
            ("uniform 3", PrecisionSchedule::uniform(3, 3, gen as usize)?),
            ("3 then 2", PrecisionSchedule::two_level(3, 2, 64, 3, gen as usize)?),
            ("uniform 2", PrecisionSchedule::uniform(2, 3, gen as usize)?),
        ] {
            let r = pipeline_perf(&fp, &s, &hw, &opts, prompt, gen)?;
            println!(
                "{name:<14} {label:<10} {:>6.1} tok/s  {:.2}x vs fp16  {:.3} bits",
                r.tokens_per_s, r.speedup_vs_fp16, r.avg_bitwidth
            );
            reports.push(r);
        }
    }

    let kernels: BTreeMap<u8, f64> = [(16, 20.5), (3, 8.1), (2, 7.0)].into();
    let s = PrecisionSchedule::two_level(3, 2, 40, 3, 100)?;
    let w = weighted_gpu_latency(&kernels, &s, 100)?;
    println!("weighted kernel latency {:.2} us, {:.2}x vs fp16", w.latency_us, w.speedup_vs_fp16.unwrap_or(f64::NAN));

    print!("{}", reports_to_csv(&reports[..2]));
    Ok(())
}
