//! Nested uniform weight quantization.
//!
//! A tensor is quantized once at `p_max` bits with asymmetric per-group
//! scales. Codes are kept as MSB-first bit planes, so the top `p` planes form
//! a valid `p`-bit code and every lower precision is read from the same
//! store without extra memory.

mod bitplane;
pub mod format;

pub use bitplane::BitPlaneStore;
pub use format::{parse_model, serialize_model, TensorEntry, WeightFile, FORMAT_VERSION, MAGIC};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use bitplane::check_bits;

pub const DEFAULT_GROUP_SIZE: usize = 64;

/// Ordered set of supported weight bitwidths, highest first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct PrecisionSet(Vec<u8>);

impl PrecisionSet {
    pub fn new(mut precisions: Vec<u8>) -> Result<Self> {
        if precisions.is_empty() {
            return Err(Error::Config("precision set is empty".into()));
        }
        for &p in &precisions {
            check_bits(p)?;
        }
        precisions.sort_unstable_by(|a, b| b.cmp(a));
        if precisions.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(format!(
                "duplicate precision in {precisions:?}"
            )));
        }
        Ok(Self(precisions))
    }

    pub fn p_max(&self) -> u8 {
        self.0[0]
    }

    pub fn p_min(&self) -> u8 {
        *self.0.last().expect("non-empty")
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn contains(&self, p: u8) -> bool {
        self.0.contains(&p)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl TryFrom<Vec<u8>> for PrecisionSet {
    type Error = Error;

    fn try_from(v: Vec<u8>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<PrecisionSet> for Vec<u8> {
    fn from(set: PrecisionSet) -> Self {
        set.0
    }
}

/// A row-major weight matrix quantized at `p_max` bits.
///
/// Groups run contiguously along each row: row `r` owns groups
/// `r * groups_per_row .. (r + 1) * groups_per_row`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    rows: usize,
    cols: usize,
    group_size: usize,
    mins: Vec<f32>,
    steps: Vec<f32>,
    store: BitPlaneStore,
}

impl QuantizedTensor {
    /// Assembles a tensor from already-validated parts.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        group_size: usize,
        mins: Vec<f32>,
        steps: Vec<f32>,
        store: BitPlaneStore,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 || group_size == 0 {
            return Err(Error::Config(format!(
                "invalid tensor shape {rows}x{cols} with group size {group_size}"
            )));
        }
        let groups = rows * cols.div_ceil(group_size);
        if mins.len() != groups || steps.len() != groups {
            return Err(Error::Input(format!(
                "expected {groups} groups, got {} mins and {} steps",
                mins.len(),
                steps.len()
            )));
        }
        if store.len() != rows * cols {
            return Err(Error::Input(format!(
                "store holds {} codes for a {rows}x{cols} tensor",
                store.len()
            )));
        }
        if let Some(bad) = mins.iter().chain(&steps).find(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite group parameter {bad}")));
        }
        if let Some(bad) = steps.iter().find(|&&s| s < 0.0) {
            return Err(Error::Input(format!("negative group step {bad}")));
        }
        Ok(Self {
            rows,
            cols,
            group_size,
            mins,
            steps,
            store,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn p_max(&self) -> u8 {
        self.store.p_max()
    }

    pub fn groups_per_row(&self) -> usize {
        self.cols.div_ceil(self.group_size)
    }

    pub fn num_groups(&self) -> usize {
        self.mins.len()
    }

    pub fn mins(&self) -> &[f32] {
        &self.mins
    }

    pub fn steps(&self) -> &[f32] {
        &self.steps
    }

    pub fn store(&self) -> &BitPlaneStore {
        &self.store
    }

    /// Group index of element `i` in row-major order.
    pub fn group_of(&self, i: usize) -> usize {
        let (r, c) = (i / self.cols, i % self.cols);
        r * self.groups_per_row() + c / self.group_size
    }

    pub fn unpack_prefix(&self, p: u8) -> Result<Vec<u8>> {
        self.store.unpack_prefix(p)
    }

    /// Reconstructs real weights from the top `p` planes.
    ///
    /// At `p_max` this is `min + code * step`. Below `p_max` the truncated
    /// code selects a bucket of `2^(p_max - p)` full-precision codes and the
    /// bucket center is returned.
    pub fn dequantize(&self, p: u8) -> Result<Vec<f64>> {
        let codes = self.store.unpack_prefix(p)?;
        let shift = (self.p_max() - p) as u32;
        let scale = f64::from(1u32 << shift);
        let center = if shift == 0 {
            0.0
        } else {
            f64::from(1u32 << (shift - 1))
        };
        let mut out = Vec::with_capacity(codes.len());
        for (i, &code) in codes.iter().enumerate() {
            let g = self.group_of(i);
            let min = f64::from(self.mins[g]);
            let step = f64::from(self.steps[g]);
            if step == 0.0 {
                out.push(min);
            } else {
                out.push(min + (f64::from(code) * scale + center) * step);
            }
        }
        Ok(out)
    }

    /// Bytes touched when loading precision `p`: the first `p` planes plus the
    /// per-group parameters.
    pub fn bytes_at(&self, p: u8) -> usize {
        p as usize * bitplane::plane_bytes(self.rows * self.cols) + self.num_groups() * 8
    }
}

/// Turns a dense row-major matrix into a [`QuantizedTensor`].
///
/// Only the uniform scheme below ships; other post-training quantizers can
/// plug in through this trait as long as they produce nested codes.
pub trait Quantizer {
    fn name(&self) -> &str;
    fn quantize(&self, weights: &[f64], rows: usize, cols: usize) -> Result<QuantizedTensor>;
}

/// Asymmetric min/max quantizer over contiguous row groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UniformQuantizer {
    pub p_max: u8,
    pub group_size: usize,
}

impl Quantizer for UniformQuantizer {
    fn name(&self) -> &str {
        "uniform-minmax"
    }

    fn quantize(&self, weights: &[f64], rows: usize, cols: usize) -> Result<QuantizedTensor> {
        quantize_tensor(weights, rows, cols, self.p_max, self.group_size)
    }
}

/// Quantizes a row-major `rows x cols` matrix at `p_max` bits.
pub fn quantize_tensor(
    weights: &[f64],
    rows: usize,
    cols: usize,
    p_max: u8,
    group_size: usize,
) -> Result<QuantizedTensor> {
    check_bits(p_max)?;
    if group_size == 0 {
        return Err(Error::Config("group size must be at least 1".into()));
    }
    if rows == 0 || cols == 0 || weights.len() != rows * cols {
        return Err(Error::Config(format!(
            "{} weights do not form a {rows}x{cols} matrix",
            weights.len()
        )));
    }
    if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
        return Err(Error::Input(format!(
            "non-finite weight {} at index {i}",
            weights[i]
        )));
    }

    let levels = f64::from((1u32 << p_max) - 1);
    let groups_per_row = cols.div_ceil(group_size);
    let mut mins = Vec::with_capacity(rows * groups_per_row);
    let mut steps = Vec::with_capacity(rows * groups_per_row);
    let mut codes = vec![0u8; weights.len()];

    for r in 0..rows {
        for g in 0..groups_per_row {
            let start = r * cols + g * group_size;
            let end = r * cols + ((g + 1) * group_size).min(cols);
            let group = &weights[start..end];
            let lo = group.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = group.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            // Codes are computed against the stored f32 parameters so that
            // reconstruction sees exactly what rounding saw.
            let min = lo as f32;
            let step = ((hi - lo) / levels) as f32;
            mins.push(min);
            steps.push(step);
            if step > 0.0 {
                let (min, step) = (f64::from(min), f64::from(step));
                for (code, &w) in codes[start..end].iter_mut().zip(group) {
                    *code = ((w - min) / step).round().clamp(0.0, levels) as u8;
                }
            }
        }
    }

    let store = BitPlaneStore::from_codes(&codes, p_max)?;
    QuantizedTensor::from_parts(rows, cols, group_size, mins, steps, store)
}

/// Convenience wrapper matching [`QuantizedTensor::dequantize`].
pub fn dequantize(qt: &QuantizedTensor, p: u8) -> Result<Vec<f64>> {
    qt.dequantize(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_grid_points_quantize_to_their_index() {
        let qt = quantize_tensor(&[0.0, 1.0, 2.0, 3.0], 1, 4, 2, 4).unwrap();
        assert_eq!(qt.mins(), &[0.0]);
        assert_eq!(qt.steps(), &[1.0]);
        assert_eq!(qt.store().codes(), vec![0, 1, 2, 3]);
        assert_eq!(qt.dequantize(2).unwrap(), vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn one_bit_readout_uses_bucket_centers() {
        let qt = quantize_tensor(&[0.0, 1.0, 2.0, 3.0], 1, 4, 2, 4).unwrap();
        assert_eq!(qt.unpack_prefix(1).unwrap(), vec![0, 0, 1, 1]);
        assert_eq!(qt.dequantize(1).unwrap(), vec![1.0, 1.0, 3.0, 3.0]);
    }

    #[test]
    fn constant_group_has_zero_step_and_exact_reconstruction() {
        for p_max in 1..=8 {
            let qt = quantize_tensor(&[5.0, 5.0, 5.0], 1, 3, p_max, 64).unwrap();
            assert_eq!(qt.steps(), &[0.0]);
            assert!(qt.store().codes().iter().all(|&c| c == 0));
            for p in 1..=p_max {
                assert_eq!(qt.dequantize(p).unwrap(), vec![5.0; 3]);
            }
        }
    }

    #[test]
    fn groups_follow_rows() {
        let w: Vec<f64> = (0..10).map(f64::from).collect();
        let qt = quantize_tensor(&w, 2, 5, 3, 2).unwrap();
        assert_eq!(qt.num_groups(), 2 * 3);
        assert_eq!(qt.group_of(4), 2);
        assert_eq!(qt.group_of(5), 3);
        assert_eq!(qt.mins(), &[0.0, 2.0, 4.0, 5.0, 7.0, 9.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            quantize_tensor(&[0.0, f64::NAN], 1, 2, 4, 2),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            quantize_tensor(&[0.0, 1.0], 1, 2, 9, 2),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            quantize_tensor(&[0.0, 1.0], 1, 2, 0, 2),
            Err(Error::Config(_))
        ));
        assert!(quantize_tensor(&[0.0, 1.0], 1, 2, 4, 0).is_err());
        let qt = quantize_tensor(&[0.0, 1.0], 1, 2, 3, 2).unwrap();
        assert!(matches!(qt.dequantize(4), Err(Error::Config(_))));
        assert!(matches!(qt.dequantize(0), Err(Error::Config(_))));
    }

    #[test]
    fn precision_set_sorts_and_validates() {
        let set = PrecisionSet::new(vec![2, 4, 3]).unwrap();
        assert_eq!(set.as_slice(), &[4, 3, 2]);
        assert_eq!((set.p_max(), set.p_min()), (4, 2));
        assert!(PrecisionSet::new(vec![]).is_err());
        assert!(PrecisionSet::new(vec![3, 3]).is_err());
        assert!(PrecisionSet::new(vec![9]).is_err());
        assert!(PrecisionSet::new(vec![0, 2]).is_err());
    }

    #[test]
    fn loading_p_bits_touches_p_planes() {
        let w: Vec<f64> = (0..100).map(|i| f64::from(i).sin()).collect();
        let qt = quantize_tensor(&w, 4, 25, 4, 8).unwrap();
        assert_eq!(qt.store().payload_bytes(), 4 * 13);
        assert_eq!(qt.bytes_at(2) - qt.num_groups() * 8, 2 * 13);
    }

    fn matrix() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
        (1usize..8, 1usize..20).prop_flat_map(|(r, c)| {
            (
                Just(r),
                Just(c),
                prop::collection::vec(-10.0f64..10.0, r * c),
            )
        })
    }

    proptest! {
        #[test]
        fn requantizing_the_reconstruction_is_code_stable(
            (rows, cols, w) in matrix(), p_max in 1u8..=8, gs in 1usize..10,
        ) {
            let qt = quantize_tensor(&w, rows, cols, p_max, gs).unwrap();
            let back = qt.dequantize(p_max).unwrap();
            let again = quantize_tensor(&back, rows, cols, p_max, gs).unwrap();
            prop_assert_eq!(qt.store().codes(), again.store().codes());
        }

        #[test]
        fn prefixes_are_shifted_codes(
            (rows, cols, w) in matrix(), p_max in 1u8..=8, gs in 1usize..10,
        ) {
            let qt = quantize_tensor(&w, rows, cols, p_max, gs).unwrap();
            let full = qt.store().codes();
            for p in 1..=p_max {
                let expect: Vec<u8> = full.iter().map(|c| c >> (p_max - p)).collect();
                prop_assert_eq!(qt.unpack_prefix(p).unwrap(), expect);
            }
        }
    }
}
