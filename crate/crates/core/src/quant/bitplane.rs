use crate::error::{Error, Result};

/// Codes stored as `p_max` bit planes, most significant plane first.
///
/// Plane `k` holds bit `p_max - 1 - k` of every code, packed row-major and
/// LSB-first within each byte. Reading the first `p` planes yields the
/// `p`-bit prefix of every code, so a single store serves every precision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitPlaneStore {
    p_max: u8,
    len: usize,
    planes: Vec<Vec<u8>>,
}

pub(crate) fn plane_bytes(len: usize) -> usize {
    len.div_ceil(8)
}

impl BitPlaneStore {
    pub fn from_codes(codes: &[u8], p_max: u8) -> Result<Self> {
        check_bits(p_max)?;
        let limit = 1u16 << p_max;
        let nbytes = plane_bytes(codes.len());
        let mut planes = vec![vec![0u8; nbytes]; p_max as usize];
        for (i, &code) in codes.iter().enumerate() {
            if u16::from(code) >= limit {
                return Err(Error::Input(format!(
                    "code {code} at index {i} does not fit in {p_max} bits"
                )));
            }
            for (k, plane) in planes.iter_mut().enumerate() {
                let bit = (code >> (p_max as usize - 1 - k)) & 1;
                plane[i / 8] |= bit << (i % 8);
            }
        }
        Ok(Self {
            p_max,
            len: codes.len(),
            planes,
        })
    }

    /// Rebuilds a store from raw plane bytes, rejecting wrong lengths and
    /// non-zero padding bits.
    pub fn from_planes(planes: Vec<Vec<u8>>, len: usize) -> Result<Self> {
        let p_max = u8::try_from(planes.len())
            .map_err(|_| Error::Config(format!("{} planes is too many", planes.len())))?;
        check_bits(p_max)?;
        let nbytes = plane_bytes(len);
        for (k, plane) in planes.iter().enumerate() {
            if plane.len() != nbytes {
                return Err(Error::Input(format!(
                    "plane {k} has {} bytes, expected {nbytes}",
                    plane.len()
                )));
            }
            let used = len % 8;
            if used != 0 && plane[nbytes - 1] >> used != 0 {
                return Err(Error::Input(format!("plane {k} has non-zero padding bits")));
            }
        }
        Ok(Self { p_max, len, planes })
    }

    pub fn p_max(&self) -> u8 {
        self.p_max
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn planes(&self) -> &[Vec<u8>] {
        &self.planes
    }

    /// Total packed payload across all planes.
    pub fn payload_bytes(&self) -> usize {
        self.p_max as usize * plane_bytes(self.len)
    }

    /// Integer formed by the top `p` plane bits of every element.
    ///
    /// Only the first `p` planes are read.
    pub fn unpack_prefix(&self, p: u8) -> Result<Vec<u8>> {
        if p == 0 || p > self.p_max {
            return Err(Error::Config(format!(
                "precision {p} outside [1, {}]",
                self.p_max
            )));
        }
        let mut codes = vec![0u8; self.len];
        for plane in &self.planes[..p as usize] {
            for (i, code) in codes.iter_mut().enumerate() {
                *code = (*code << 1) | ((plane[i / 8] >> (i % 8)) & 1);
            }
        }
        Ok(codes)
    }

    pub fn codes(&self) -> Vec<u8> {
        self.unpack_prefix(self.p_max)
            .expect("p_max is always a valid prefix")
    }
}

pub(crate) fn check_bits(p: u8) -> Result<()> {
    if (1..=8).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("bitwidth {p} outside [1, 8]")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_bit_planes_split_msb_and_lsb() {
        let store = BitPlaneStore::from_codes(&[0b10, 0b01], 2).unwrap();
        assert_eq!(store.planes()[0], vec![0b01]);
        assert_eq!(store.planes()[1], vec![0b10]);
        assert_eq!(store.unpack_prefix(1).unwrap(), vec![1, 0]);
        assert_eq!(store.unpack_prefix(2).unwrap(), vec![2, 1]);
    }

    #[test]
    fn zero_codes_stay_zero_at_every_prefix() {
        let store = BitPlaneStore::from_codes(&[0; 21], 4).unwrap();
        for p in 1..=4 {
            assert!(store.unpack_prefix(p).unwrap().iter().all(|&c| c == 0));
        }
    }

    #[test]
    fn payload_is_planes_times_padded_bytes() {
        let store = BitPlaneStore::from_codes(&[1; 17], 3).unwrap();
        assert_eq!(store.payload_bytes(), 3 * 3);
    }

    #[test]
    fn rejects_oversized_codes_and_bad_prefix() {
        assert!(BitPlaneStore::from_codes(&[4], 2).is_err());
        let store = BitPlaneStore::from_codes(&[3], 2).unwrap();
        assert!(store.unpack_prefix(0).is_err());
        assert!(store.unpack_prefix(3).is_err());
    }

    #[test]
    fn padding_bits_must_be_zero() {
        assert!(BitPlaneStore::from_planes(vec![vec![0b1000_0000]], 7).is_err());
        assert!(BitPlaneStore::from_planes(vec![vec![0b0100_0000]], 7).is_ok());
        assert!(BitPlaneStore::from_planes(vec![vec![0, 0]], 7).is_err());
    }
}
