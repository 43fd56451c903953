use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{PrecisionSchedule, QualityTarget, SwitchGrid};
use crate::error::{Error, Result};

pub const BRUTE_FORCE_MAX_HORIZON: usize = 16;
pub const BRUTE_FORCE_MAX_PRECISIONS: usize = 3;

/// Mean quality of a schedule over some prompt set.
pub trait ScheduleEvaluator: Sync {
    fn quality(&self, schedule: &PrecisionSchedule) -> Result<f64>;

    /// Prompts left out of the mean (for example empty references).
    fn skipped_prompts(&self) -> usize {
        0
    }
}

impl<F> ScheduleEvaluator for F
where
    F: Fn(&PrecisionSchedule) -> f64 + Sync,
{
    fn quality(&self, schedule: &PrecisionSchedule) -> Result<f64> {
        Ok(self(schedule))
    }
}

/// Number of precedence-respecting schedules over `horizon` steps with `k`
/// precisions: `sum_{r=0}^{k-1} C(OL, r) * C(k-1, r)`.
pub fn count_schedules(horizon: usize, k: usize) -> Result<u128> {
    if horizon == 0 || k == 0 {
        return Err(Error::Config(format!(
            "count_schedules needs OL >= 1 and k >= 1, got ({horizon}, {k})"
        )));
    }
    let overflow = || Error::Overflow(format!("schedule count for OL={horizon}, k={k}"));
    let mut total: u128 = 0;
    for r in 0..k.min(horizon.saturating_add(1)) {
        let term = binomial(horizon as u128, r as u128)
            .and_then(|a| binomial(k as u128 - 1, r as u128).and_then(|b| a.checked_mul(b)))
            .ok_or_else(overflow)?;
        total = total.checked_add(term).ok_or_else(overflow)?;
    }
    Ok(total)
}

fn binomial(n: u128, r: u128) -> Option<u128> {
    if r > n {
        return Some(0);
    }
    let r = r.min(n - r);
    let mut acc: u128 = 1;
    for i in 0..r {
        // acc * (n - i) is divisible by (i + 1) at every step
        acc = acc.checked_mul(n - i)? / (i + 1);
    }
    Some(acc)
}

/// One evaluated schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub schedule: PrecisionSchedule,
    pub quality: f64,
    pub avg_bitwidth: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOutcome {
    /// Chosen schedule; flagged infeasible (and all-high) when nothing met the floor.
    pub schedule: PrecisionSchedule,
    pub quality: Option<f64>,
    pub candidates: Vec<Candidate>,
    pub skipped_prompts: usize,
}

impl SolverOutcome {
    pub fn feasible(&self) -> bool {
        self.schedule.feasible()
    }
}

fn check_decode_precisions(precisions: &[u8]) -> Result<()> {
    if precisions.is_empty() {
        return Err(Error::Config("no decode precisions".into()));
    }
    if precisions.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::Config(format!(
            "decode precisions {precisions:?} must be strictly descending"
        )));
    }
    Ok(())
}

/// All non-decreasing tuples of length `len` drawn from sorted `points`.
fn non_decreasing_tuples(points: &[usize], len: usize) -> Vec<Vec<usize>> {
    fn rec(points: &[usize], from: usize, len: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == len {
            out.push(cur.clone());
            return;
        }
        for i in from..points.len() {
            cur.push(points[i]);
            rec(points, i, len, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(points, 0, len, &mut Vec::with_capacity(len), &mut out);
    out
}

fn evaluate_all<E: ScheduleEvaluator + ?Sized>(
    evaluator: &E,
    schedules: Vec<PrecisionSchedule>,
    target: &QualityTarget,
) -> Result<Vec<Candidate>> {
    schedules
        .into_par_iter()
        .map(|schedule| {
            let quality = evaluator.quality(&schedule)?;
            if !quality.is_finite() {
                return Err(Error::Contract(format!(
                    "evaluator returned non-finite quality {quality}"
                )));
            }
            let avg_bitwidth = schedule.avg_bitwidth(schedule.horizon())?;
            Ok(Candidate {
                feasible: target.accepts(quality),
                schedule,
                quality,
                avg_bitwidth,
            })
        })
        .collect()
}

/// Picks the feasible candidate with the fewest bit-tokens, preferring
/// earlier switches for higher precisions on ties.
fn pick(
    candidates: Vec<Candidate>,
    precisions: &[u8],
    prefill: u8,
    horizon: usize,
    skipped_prompts: usize,
) -> Result<SolverOutcome> {
    let best = candidates
        .iter()
        .filter(|c| c.feasible)
        .min_by(|a, b| {
            a.schedule
                .bit_tokens(horizon)
                .cmp(&b.schedule.bit_tokens(horizon))
                .then_with(|| a.schedule.switch_points().cmp(b.schedule.switch_points()))
        })
        .cloned();
    let (schedule, quality) = match best {
        Some(c) => (c.schedule, Some(c.quality)),
        None => {
            let mut st = vec![horizon; precisions.len()];
            st[0] = 0;
            let all_high = PrecisionSchedule::new(precisions.to_vec(), prefill, st, horizon)?
                .with_feasible(false);
            let quality = candidates
                .iter()
                .find(|c| c.schedule == all_high)
                .map(|c| c.quality);
            (all_high, quality)
        }
    };
    Ok(SolverOutcome {
        schedule,
        quality,
        candidates,
        skipped_prompts,
    })
}

/// Offline static solver over grid-restricted switch points.
pub fn solve_static<E: ScheduleEvaluator + ?Sized>(
    evaluator: &E,
    precisions: &[u8],
    prefill: u8,
    target: &QualityTarget,
    grid: &SwitchGrid,
) -> Result<SolverOutcome> {
    check_decode_precisions(precisions)?;
    let horizon = grid.horizon();
    let schedules = non_decreasing_tuples(grid.points(), precisions.len() - 1)
        .into_iter()
        .map(|tail| {
            let mut st = Vec::with_capacity(precisions.len());
            st.push(0);
            st.extend(tail);
            PrecisionSchedule::new(precisions.to_vec(), prefill, st, horizon)
        })
        .collect::<Result<Vec<_>>>()?;
    let candidates = evaluate_all(evaluator, schedules, target)?;
    pick(candidates, precisions, prefill, horizon, evaluator.skipped_prompts())
}

/// Exact optimum over every integer switch point, found by walking all
/// `|P|^OL` per-step precision assignments and keeping the non-increasing
/// ones. Intended as a test oracle.
pub fn brute_force_best<E: ScheduleEvaluator + ?Sized>(
    evaluator: &E,
    precisions: &[u8],
    prefill: u8,
    target: &QualityTarget,
    horizon: usize,
) -> Result<SolverOutcome> {
    check_decode_precisions(precisions)?;
    if horizon == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    if horizon > BRUTE_FORCE_MAX_HORIZON || precisions.len() > BRUTE_FORCE_MAX_PRECISIONS {
        return Err(Error::Config(format!(
            "brute force refused for OL={horizon}, |P|={} (limits {BRUTE_FORCE_MAX_HORIZON}, {BRUTE_FORCE_MAX_PRECISIONS})",
            precisions.len()
        )));
    }
    let k = precisions.len();
    let total = (k as u64).pow(horizon as u32);
    let mut levels = vec![0usize; horizon];
    let mut schedules = Vec::new();
    for code in 0..total {
        let mut c = code;
        for slot in levels.iter_mut() {
            *slot = (c % k as u64) as usize;
            c /= k as u64;
        }
        // level index grows as precision drops
        if levels.windows(2).any(|w| w[0] > w[1]) {
            continue;
        }
        let st: Vec<usize> = (0..k)
            .map(|j| levels.iter().position(|&l| l >= j).unwrap_or(horizon))
            .collect();
        schedules.push(PrecisionSchedule::new(precisions.to_vec(), prefill, st, horizon)?);
    }
    let candidates = evaluate_all(evaluator, schedules, target)?;
    pick(candidates, precisions, prefill, horizon, evaluator.skipped_prompts())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairQuality {
    pub prefill: u8,
    pub decode: u8,
    pub quality: f64,
}

/// Outcome of phase-aware precision allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub table: Vec<PairQuality>,
    pub prefill: u8,
    pub decode: u8,
    pub fallback: bool,
    pub q_ref: f64,
    #[serde(with = "super::tolerance_serde")]
    pub epsilon: f64,
    pub skipped_prompts: usize,
}

/// Smallest decode precision, then smallest prefill precision, whose
/// quality clears the floor; `(p_max, p_max)` flagged as fallback otherwise.
pub fn select_pair(
    table: Vec<PairQuality>,
    precisions: &[u8],
    target: &QualityTarget,
) -> Result<CalibrationReport> {
    let p_max = *precisions
        .iter()
        .max()
        .ok_or_else(|| Error::Config("empty precision set".into()))?;
    let chosen = table
        .iter()
        .filter(|e| target.accepts(e.quality))
        .min_by_key(|e| (e.decode, e.prefill))
        .map(|e| (e.prefill, e.decode));
    let (prefill, decode, fallback) = match chosen {
        Some((pf, pd)) => (pf, pd, false),
        None => (p_max, p_max, true),
    };
    Ok(CalibrationReport {
        table,
        prefill,
        decode,
        fallback,
        q_ref: target.q_ref,
        epsilon: target.epsilon,
        skipped_prompts: 0,
    })
}

/// Evaluates every `(prefill, decode)` pair with `prefill >= decode` as a
/// uniform decode schedule and applies [`select_pair`].
pub fn allocate_phase_precisions<E: ScheduleEvaluator + ?Sized>(
    evaluator: &E,
    precisions: &[u8],
    target: &QualityTarget,
    horizon: usize,
) -> Result<CalibrationReport> {
    let mut pairs = Vec::new();
    for &pf in precisions {
        for &pd in precisions.iter().filter(|&&pd| pd <= pf) {
            pairs.push((pf, pd));
        }
    }
    let table = pairs
        .into_par_iter()
        .map(|(pf, pd)| {
            let s = PrecisionSchedule::uniform(pd, pf, horizon)?;
            Ok(PairQuality {
                prefill: pf,
                decode: pd,
                quality: evaluator.quality(&s)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = select_pair(table, precisions, target)?;
    report.skipped_prompts = evaluator.skipped_prompts();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn target(q_ref: f64, eps: f64) -> QualityTarget {
        QualityTarget::new(q_ref, eps).unwrap()
    }

    #[test]
    fn schedule_counts() {
        assert_eq!(count_schedules(4, 2).unwrap(), 5);
        assert_eq!(count_schedules(4, 1).unwrap(), 1);
        assert_eq!(count_schedules(6, 3).unwrap(), 28);
        assert!(count_schedules(0, 2).is_err());
        assert!(count_schedules(4, 0).is_err());
        assert!(matches!(
            count_schedules(usize::MAX, 40),
            Err(Error::Overflow(_))
        ));
    }

    #[test]
    fn brute_force_enumerates_formula_count() {
        for ol in 1..=6 {
            for k in 1..=3usize {
                let precisions: Vec<u8> = (0..k as u8).map(|i| 4 - i).collect();
                let out = brute_force_best(&|_: &PrecisionSchedule| 1.0, &precisions, 4, &target(1.0, 0.0), ol)
                    .unwrap();
                assert_eq!(out.candidates.len() as u128, count_schedules(ol, k).unwrap());
            }
        }
    }

    #[test]
    fn brute_force_guard() {
        let q = |_: &PrecisionSchedule| 1.0;
        assert!(brute_force_best(&q, &[3, 2], 3, &target(1.0, 0.0), 17).is_err());
        assert!(brute_force_best(&q, &[5, 4, 3, 2], 5, &target(1.0, 0.0), 4).is_err());
    }

    #[test]
    fn horizon_one_is_trivial() {
        let q = |s: &PrecisionSchedule| if s.precision_at(0) == 3 { 1.0 } else { 0.0 };
        let out = brute_force_best(&q, &[3, 2], 3, &target(1.0, 0.0), 1).unwrap();
        assert_eq!(out.candidates.len(), 2);
        assert_eq!(out.schedule.switch_point(2), Some(1));
        assert!(out.feasible());
    }

    #[test]
    fn constant_quality_picks_all_low() {
        let q = |_: &PrecisionSchedule| 0.5;
        let out = brute_force_best(&q, &[4, 3, 2], 4, &target(0.5, 0.0), 6).unwrap();
        assert_eq!(out.schedule.switch_points(), &[0, 0, 0]);
        let grid = SwitchGrid::new(5, 64).unwrap();
        let out = solve_static(&q, &[4, 3, 2], 4, &target(0.5, 0.0), &grid).unwrap();
        assert_eq!(out.schedule.switch_points(), &[0, 0, 0]);
        assert_eq!(out.schedule.avg_bitwidth(64).unwrap(), 2.0);
    }

    #[test]
    fn synthetic_fraction_boundary() {
        // q = 1 - 0.1 * low_fraction, floor 0.95 => at most half the tokens low
        let horizon = 64;
        let q = move |s: &PrecisionSchedule| {
            let low = (0..horizon).filter(|&i| s.precision_at(i) == 2).count();
            1.0 - 0.1 * low as f64 / horizon as f64
        };
        let grid = SwitchGrid::new(5, horizon).unwrap();
        let out = solve_static(&q, &[3, 2], 3, &target(1.0, 0.05), &grid).unwrap();
        assert_eq!(out.schedule.switch_point(2), Some(32));
        assert!(out.feasible());
    }

    #[test]
    fn infeasible_returns_flagged_all_high() {
        let q = |_: &PrecisionSchedule| 0.1;
        let grid = SwitchGrid::new(5, 16).unwrap();
        let out = solve_static(&q, &[4, 3, 2], 4, &target(0.9, 0.0), &grid).unwrap();
        assert!(!out.feasible());
        assert_eq!(out.schedule.switch_points(), &[0, 16, 16]);
        assert!(out.schedule.validate().is_empty());
    }

    #[test]
    fn ties_prefer_earlier_high_switches() {
        // (st3, st2) = (1, 3) and (2, 2) carry the same bit-tokens over OL = 4
        let q = |s: &PrecisionSchedule| {
            let st = s.switch_points();
            if st == [0, 1, 3] || st == [0, 2, 2] { 1.0 } else { 0.0 }
        };
        let out = brute_force_best(&q, &[4, 3, 2], 4, &target(1.0, 0.0), 4).unwrap();
        assert_eq!(out.schedule.switch_points(), &[0, 1, 3]);
    }

    #[test]
    fn pair_selection_examples() {
        let table = vec![
            PairQuality { prefill: 2, decode: 2, quality: 0.50 },
            PairQuality { prefill: 3, decode: 2, quality: 0.80 },
            PairQuality { prefill: 3, decode: 3, quality: 0.82 },
            PairQuality { prefill: 4, decode: 4, quality: 0.83 },
        ];
        let r = select_pair(table.clone(), &[4, 3, 2], &target(0.83, 0.03)).unwrap();
        assert_eq!((r.prefill, r.decode, r.fallback), (3, 2, false));

        let r = select_pair(table.clone(), &[4, 3, 2], &target(0.83, 1.0)).unwrap();
        assert_eq!((r.prefill, r.decode), (2, 2));

        let r = select_pair(table, &[4, 3, 2], &target(0.99, 0.0)).unwrap();
        assert_eq!((r.prefill, r.decode, r.fallback), (4, 4, true));
    }

    #[test]
    fn allocation_enumerates_ordered_pairs() {
        let q = |s: &PrecisionSchedule| f64::from(s.prefill()) + f64::from(s.highest());
        let r = allocate_phase_precisions(&q, &[4, 3, 2], &target(6.0, 0.0), 8).unwrap();
        assert_eq!(r.table.len(), 6);
        assert!(r.table.iter().all(|e| e.prefill >= e.decode));
        assert_eq!((r.prefill, r.decode), (4, 2));
    }
}
