//! Static switch-point search on a synthetic quality function, checked
//! against exhaustive search.

use pmpd::schedule::{
    brute_force_best, count_schedules, solve_static, PrecisionSchedule, QualityTarget, SwitchGrid,
};

fn main() -> anyhow::Result<()> {
    let horizon = 8;
    // quality drops with the share of steps at the lowest precision
    let quality = |s: &PrecisionSchedule| {
        let low = (0..s.horizon()).filter(|&i| s.precision_at(i) == 2).count();
        let mid = (0..s.horizon()).filter(|&i| s.precision_at(i) == 3).count();
        1.0 - (0.12 * low as f64 + 0.03 * mid as f64) / s.horizon() as f64
    };
    let target = QualityTarget::new(1.0, 0.05)?;
    let precisions = [4, 3, 2];
    println!("{} precedence-respecting schedules over {horizon} steps", count_schedules(horizon, 3)?);

    let grid = SwitchGrid::new(horizon + 1, horizon)?;
    let fast = solve_static(&quality, &precisions, 4, &target, &grid)?;
    let exact = brute_force_best(&quality, &precisions, 4, &target, horizon)?;
    for (name, o) in [("grid", &fast), ("exhaustive", &exact)] {
        println!(
            "{name:>10}: st={:?} avg bits {:.3} quality {:.4} ({} candidates)",
            o.schedule.switch_points(),
            o.schedule.avg_bitwidth(horizon)?,
            o.quality.unwrap_or(f64::NAN),
            o.candidates.len()
        );
    }
    Ok(())
}
