//! Precision-switching schedules.
//!
//! A schedule assigns every decode precision `p` a switch index `st(p)`: the
//! first decode step run at `p`. The highest decode precision starts at step
//! 0, lower precisions switch no earlier than higher ones, and `st(p) = OL`
//! means `p` is never used.

mod quality;
mod solver;

pub use quality::FidelityEvaluator;

pub use solver::{
    allocate_phase_precisions, brute_force_best, count_schedules, select_pair, solve_static,
    CalibrationReport, Candidate, PairQuality, ScheduleEvaluator, SolverOutcome,
    BRUTE_FORCE_MAX_HORIZON, BRUTE_FORCE_MAX_PRECISIONS,
};

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bitwidth used to denote the unquantized reference weights.
pub const FULL_PRECISION: u8 = 16;
pub const DEFAULT_GRID_POINTS: usize = 5;

pub fn is_supported_bitwidth(p: u8) -> bool {
    (1..=8).contains(&p) || p == FULL_PRECISION
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleJson", into = "ScheduleJson")]
pub struct PrecisionSchedule {
    precisions: Vec<u8>,
    prefill: u8,
    switch_points: Vec<usize>,
    horizon: usize,
    feasible: bool,
}

/// A broken schedule constraint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    /// Empty, unsorted or duplicated precision list, or mismatched lengths.
    Structure { reason: String },
    Bitwidth { precision: u8 },
    Range {
        precision: u8,
        switch_point: usize,
        horizon: usize,
    },
    Precedence {
        higher: u8,
        lower: u8,
        higher_switch: usize,
        lower_switch: usize,
    },
    HighestNotFirst { precision: u8, switch_point: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Structure { reason } => write!(f, "malformed schedule: {reason}"),
            Violation::Bitwidth { precision } => write!(f, "unsupported bitwidth {precision}"),
            Violation::Range {
                precision,
                switch_point,
                horizon,
            } => write!(
                f,
                "st({precision}) = {switch_point} outside [0, {horizon}]"
            ),
            Violation::Precedence {
                higher,
                lower,
                higher_switch,
                lower_switch,
            } => write!(
                f,
                "{higher} > {lower} but st({higher}) = {higher_switch} > st({lower}) = {lower_switch}"
            ),
            Violation::HighestNotFirst {
                precision,
                switch_point,
            } => write!(
                f,
                "highest decode precision {precision} must start at 0, got {switch_point}"
            ),
        }
    }
}

impl PrecisionSchedule {
    /// Builds a schedule without checking it; see [`PrecisionSchedule::validate`].
    pub fn from_parts(
        precisions: Vec<u8>,
        prefill: u8,
        switch_points: Vec<usize>,
        horizon: usize,
    ) -> Self {
        Self {
            precisions,
            prefill,
            switch_points,
            horizon,
            feasible: true,
        }
    }

    pub fn new(
        precisions: Vec<u8>,
        prefill: u8,
        switch_points: Vec<usize>,
        horizon: usize,
    ) -> Result<Self> {
        let s = Self::from_parts(precisions, prefill, switch_points, horizon);
        s.ensure_valid()?;
        Ok(s)
    }

    /// Every decode step at `decode`.
    pub fn uniform(decode: u8, prefill: u8, horizon: usize) -> Result<Self> {
        Self::new(vec![decode], prefill, vec![0], horizon)
    }

    /// `high` for steps `[0, switch)` then `low` until the end.
    pub fn two_level(high: u8, low: u8, switch: usize, prefill: u8, horizon: usize) -> Result<Self> {
        Self::new(vec![high, low], prefill, vec![0, switch], horizon)
    }

    pub fn with_feasible(mut self, feasible: bool) -> Self {
        self.feasible = feasible;
        self
    }

    pub fn precisions(&self) -> &[u8] {
        &self.precisions
    }

    pub fn prefill(&self) -> u8 {
        self.prefill
    }

    pub fn switch_points(&self) -> &[usize] {
        &self.switch_points
    }

    pub fn switch_point(&self, p: u8) -> Option<usize> {
        let i = self.precisions.iter().position(|&q| q == p)?;
        Some(self.switch_points[i])
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn feasible(&self) -> bool {
        self.feasible
    }

    pub fn highest(&self) -> u8 {
        self.precisions[0]
    }

    pub fn lowest(&self) -> u8 {
        *self.precisions.last().expect("non-empty schedule")
    }

    /// Precision of decode step `i`: the lowest `p` with `st(p) <= i`.
    pub fn precision_at(&self, i: usize) -> u8 {
        self.precisions
            .iter()
            .zip(&self.switch_points)
            .rev()
            .find(|(_, &st)| st <= i)
            .map_or(self.precisions[0], |(&p, _)| p)
    }

    /// Sum of bits over the first `steps` decode steps.
    pub fn bit_tokens(&self, steps: usize) -> u64 {
        let mut total = 0u64;
        for (k, (&p, &st)) in self.precisions.iter().zip(&self.switch_points).enumerate() {
            let end = self
                .switch_points
                .get(k + 1..)
                .and_then(|rest| rest.iter().min().copied())
                .unwrap_or(steps)
                .min(steps);
            let start = st.min(steps);
            if end > start {
                total += u64::from(p) * (end - start) as u64;
            }
        }
        total
    }

    /// Average bitwidth over `steps` decode steps.
    pub fn avg_bitwidth(&self, steps: usize) -> Result<f64> {
        if steps == 0 {
            return Err(Error::Input("average bitwidth over zero tokens".into()));
        }
        Ok(self.bit_tokens(steps) as f64 / steps as f64)
    }

    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.precisions.is_empty() {
            out.push(Violation::Structure {
                reason: "no decode precisions".into(),
            });
            return out;
        }
        if self.precisions.len() != self.switch_points.len() {
            out.push(Violation::Structure {
                reason: format!(
                    "{} precisions but {} switch points",
                    self.precisions.len(),
                    self.switch_points.len()
                ),
            });
            return out;
        }
        if self.precisions.windows(2).any(|w| w[0] <= w[1]) {
            out.push(Violation::Structure {
                reason: format!("precisions {:?} are not strictly descending", self.precisions),
            });
        }
        for &p in self.precisions.iter().chain(std::iter::once(&self.prefill)) {
            if !is_supported_bitwidth(p) {
                out.push(Violation::Bitwidth { precision: p });
            }
        }
        for (&p, &st) in self.precisions.iter().zip(&self.switch_points) {
            if st > self.horizon {
                out.push(Violation::Range {
                    precision: p,
                    switch_point: st,
                    horizon: self.horizon,
                });
            }
        }
        for i in 0..self.precisions.len() {
            for j in 0..self.precisions.len() {
                let (p, q) = (self.precisions[i], self.precisions[j]);
                if p > q && self.switch_points[i] > self.switch_points[j] {
                    out.push(Violation::Precedence {
                        higher: p,
                        lower: q,
                        higher_switch: self.switch_points[i],
                        lower_switch: self.switch_points[j],
                    });
                }
            }
        }
        if self.switch_points[0] != 0 {
            out.push(Violation::HighestNotFirst {
                precision: self.precisions[0],
                switch_point: self.switch_points[0],
            });
        }
        out
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let violations = self.validate();
        if violations.is_empty() {
            Ok(())
        } else {
            let msgs: Vec<String> = violations.iter().map(ToString::to_string).collect();
            Err(Error::Config(format!("invalid schedule: {}", msgs.join("; "))))
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ScheduleJson {
    precisions: Vec<u8>,
    prefill: u8,
    st: BTreeMap<u8, usize>,
    #[serde(rename = "OL")]
    horizon: usize,
    #[serde(default = "default_true")]
    feasible: bool,
}

fn default_true() -> bool {
    true
}

impl From<PrecisionSchedule> for ScheduleJson {
    fn from(s: PrecisionSchedule) -> Self {
        Self {
            st: s
                .precisions
                .iter()
                .copied()
                .zip(s.switch_points.iter().copied())
                .collect(),
            precisions: s.precisions,
            prefill: s.prefill,
            horizon: s.horizon,
            feasible: s.feasible,
        }
    }
}

impl TryFrom<ScheduleJson> for PrecisionSchedule {
    type Error = Error;

    fn try_from(j: ScheduleJson) -> Result<Self> {
        if j.st.len() != j.precisions.len() {
            return Err(Error::Input(format!(
                "schedule lists {} precisions but {} switch points",
                j.precisions.len(),
                j.st.len()
            )));
        }
        let switch_points = j
            .precisions
            .iter()
            .map(|p| {
                j.st.get(p)
                    .copied()
                    .ok_or_else(|| Error::Input(format!("no switch point for precision {p}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let s = PrecisionSchedule::from_parts(j.precisions, j.prefill, switch_points, j.horizon)
            .with_feasible(j.feasible);
        s.ensure_valid()?;
        Ok(s)
    }
}

/// Average bitwidth of the given decode-step precisions.
pub fn avg_bitwidth(decode_precisions: &[u8]) -> Result<f64> {
    if decode_precisions.is_empty() {
        return Err(Error::Input("average bitwidth over zero tokens".into()));
    }
    let total: u64 = decode_precisions.iter().map(|&p| u64::from(p)).sum();
    Ok(total as f64 / decode_precisions.len() as f64)
}

/// `N` candidate switch points `round(j * OL / (N - 1))`, `j = 0..N`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GridJson", into = "GridJson")]
pub struct SwitchGrid {
    horizon: usize,
    points: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct GridJson {
    n: usize,
    #[serde(rename = "OL")]
    horizon: usize,
}

impl From<SwitchGrid> for GridJson {
    fn from(g: SwitchGrid) -> Self {
        Self {
            n: g.points.len(),
            horizon: g.horizon,
        }
    }
}

impl TryFrom<GridJson> for SwitchGrid {
    type Error = Error;

    fn try_from(j: GridJson) -> Result<Self> {
        SwitchGrid::new(j.n, j.horizon)
    }
}

impl SwitchGrid {
    pub fn new(n: usize, horizon: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config(format!("grid needs at least 2 points, got {n}")));
        }
        if horizon < n - 1 {
            return Err(Error::Config(format!(
                "horizon {horizon} too short for {n} distinct grid points"
            )));
        }
        let den = n - 1;
        // round half up in integer arithmetic
        let points = (0..n)
            .map(|j| (2 * j * horizon + den) / (2 * den))
            .collect();
        Ok(Self { horizon, points })
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn points(&self) -> &[usize] {
        &self.points
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QualityMetric {
    #[default]
    RougeLFidelity,
}

/// Serde for a tolerance that may be `+inf`, written as the string `"inf"`
/// because JSON has no infinity.
pub mod tolerance_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityTarget {
    pub q_ref: f64,
    #[serde(with = "tolerance_serde")]
    pub epsilon: f64,
    #[serde(default)]
    pub metric: QualityMetric,
}

impl QualityTarget {
    pub fn new(q_ref: f64, epsilon: f64) -> Result<Self> {
        if epsilon.is_nan() || epsilon < 0.0 || q_ref.is_nan() {
            return Err(Error::Config(format!(
                "quality target needs finite q_ref and epsilon >= 0, got ({q_ref}, {epsilon})"
            )));
        }
        Ok(Self {
            q_ref,
            epsilon,
            metric: QualityMetric::RougeLFidelity,
        })
    }

    pub fn floor(&self) -> f64 {
        self.q_ref - self.epsilon
    }

    pub fn accepts(&self, quality: f64) -> bool {
        quality >= self.floor()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn precision_at_follows_switch_points() {
        let s = PrecisionSchedule::two_level(3, 2, 3, 3, 8).unwrap();
        let seq: Vec<u8> = (0..5).map(|i| s.precision_at(i)).collect();
        assert_eq!(seq, vec![3, 3, 3, 2, 2]);
        let now = PrecisionSchedule::two_level(3, 2, 0, 3, 8).unwrap();
        assert!((0..8).all(|i| now.precision_at(i) == 2));
        let never = PrecisionSchedule::two_level(3, 2, 8, 3, 8).unwrap();
        assert!((0..8).all(|i| never.precision_at(i) == 3));
    }

    #[test]
    fn validate_examples() {
        let ok = PrecisionSchedule::from_parts(vec![4, 3, 2], 4, vec![0, 2, 5], 8);
        assert!(ok.validate().is_empty());

        let bad = PrecisionSchedule::from_parts(vec![4, 3], 4, vec![3, 1], 8);
        let v = bad.validate();
        assert!(v.contains(&Violation::Precedence {
            higher: 4,
            lower: 3,
            higher_switch: 3,
            lower_switch: 1
        }));
        assert!(v.contains(&Violation::HighestNotFirst {
            precision: 4,
            switch_point: 3
        }));

        let out = PrecisionSchedule::from_parts(vec![3, 2], 3, vec![0, 9], 8);
        assert_eq!(
            out.validate(),
            vec![Violation::Range {
                precision: 2,
                switch_point: 9,
                horizon: 8
            }]
        );
    }

    #[test]
    fn validate_reports_structure_problems() {
        assert!(!PrecisionSchedule::from_parts(vec![], 3, vec![], 4)
            .validate()
            .is_empty());
        assert!(!PrecisionSchedule::from_parts(vec![2, 3], 3, vec![0, 0], 4)
            .validate()
            .is_empty());
        assert!(!PrecisionSchedule::from_parts(vec![3], 3, vec![0, 1], 4)
            .validate()
            .is_empty());
        assert_eq!(
            PrecisionSchedule::from_parts(vec![12], 3, vec![0], 4).validate(),
            vec![Violation::Bitwidth { precision: 12 }]
        );
        assert!(PrecisionSchedule::uniform(16, 16, 4).is_ok());
    }

    #[test]
    fn avg_bitwidth_examples() {
        let mut v = vec![3u8; 39];
        v.extend(vec![2u8; 61]);
        assert!((avg_bitwidth(&v).unwrap() - 2.39).abs() < 1e-12);
        assert_eq!(avg_bitwidth(&[4; 7]).unwrap(), 4.0);
        assert_eq!(avg_bitwidth(&[4, 4, 3, 3]).unwrap(), 3.5);
        assert!(avg_bitwidth(&[]).is_err());

        let s = PrecisionSchedule::two_level(3, 2, 39, 3, 100).unwrap();
        assert!((s.avg_bitwidth(100).unwrap() - 2.39).abs() < 1e-12);
        assert!(s.avg_bitwidth(0).is_err());
    }

    #[test]
    fn grid_points() {
        let g = SwitchGrid::new(5, 256).unwrap();
        assert_eq!(g.points(), &[0, 64, 128, 192, 256]);
        let g = SwitchGrid::new(4, 10).unwrap();
        assert_eq!(g.points(), &[0, 3, 7, 10]);
        assert!(SwitchGrid::new(1, 10).is_err());
        assert!(SwitchGrid::new(5, 3).is_err());
        assert_eq!(SwitchGrid::new(5, 4).unwrap().points(), &[0, 1, 2, 3, 4]);
    }

    #[test]
    fn json_shape() {
        let s = PrecisionSchedule::two_level(3, 2, 38, 3, 256).unwrap();
        let v = serde_json::to_value(&s).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"precisions":[3,2],"prefill":3,"st":{"3":0,"2":38},"OL":256,"feasible":true})
        );
        let back: PrecisionSchedule = serde_json::from_value(v).unwrap();
        assert_eq!(back, s);
        let broken = serde_json::json!({"precisions":[3,2],"prefill":3,"st":{"3":4,"2":1},"OL":8});
        assert!(serde_json::from_value::<PrecisionSchedule>(broken).is_err());
    }

    #[test]
    fn infinite_tolerance_round_trips() {
        let t = QualityTarget::new(0.4, f64::INFINITY).unwrap();
        let text = serde_json::to_string(&t).unwrap();
        assert!(text.contains("\"inf\""), "{text}");
        assert_eq!(serde_json::from_str::<QualityTarget>(&text).unwrap(), t);
        let finite = QualityTarget::new(0.4, 0.05).unwrap();
        assert_eq!(serde_json::from_str::<QualityTarget>(&serde_json::to_string(&finite).unwrap()).unwrap(), finite);
        assert!(serde_json::from_str::<QualityTarget>(r#"{"q_ref":0.4,"epsilon":"lots"}"#).is_err());
    }

    #[test]
    fn quality_target_rejects_negative_tolerance() {
        assert!(QualityTarget::new(1.0, -0.1).is_err());
        assert!(QualityTarget::new(1.0, f64::INFINITY).unwrap().accepts(-5.0));
    }

    fn valid_schedule() -> impl Strategy<Value = PrecisionSchedule> {
        (1usize..40, prop::collection::vec(0usize..50, 0..3)).prop_map(|(ol, raw)| {
            let mut st: Vec<usize> = raw.into_iter().map(|x| x % (ol + 1)).collect();
            st.sort_unstable();
            st.insert(0, 0);
            let precisions: Vec<u8> = (0..st.len() as u8).map(|k| 4 - k).collect();
            PrecisionSchedule::new(precisions, 4, st, ol).unwrap()
        })
    }

    proptest! {
        #[test]
        fn precision_is_non_increasing_and_avg_in_range(s in valid_schedule()) {
            let seq: Vec<u8> = (0..s.horizon()).map(|i| s.precision_at(i)).collect();
            prop_assert!(seq.windows(2).all(|w| w[0] >= w[1]));
            let avg = s.avg_bitwidth(s.horizon()).unwrap();
            prop_assert!(avg >= f64::from(s.lowest()) && avg <= f64::from(s.highest()));
            prop_assert_eq!(s.bit_tokens(s.horizon()), seq.iter().map(|&p| u64::from(p)).sum::<u64>());
        }
    }
}
