//! Little-endian weight file.
//!
//! ```text
//! "PMPD" | version u32 | metadata length u32 | metadata (UTF-8 JSON)
//! per tensor, in metadata order:
//!     mins  f32[groups]
//!     steps f32[groups]
//!     p_max planes, MSB first, each ceil(rows*cols/8) bytes, LSB-first bits
//! ```

use serde::{Deserialize, Serialize};

use super::bitplane::{check_bits, plane_bytes, BitPlaneStore};
use super::QuantizedTensor;
use crate::error::{Error, ParseError, Result};

pub const MAGIC: [u8; 4] = *b"PMPD";
pub const FORMAT_VERSION: u32 = 1;

/// Shape record for one tensor inside the metadata block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    p_max: u8,
    group_size: usize,
    tensors: Vec<TensorEntry>,
    model: serde_json::Value,
}

/// In-memory form of a weight file.
///
/// `model` is opaque to this module; the model layer stores its config and
/// provenance there.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub model: serde_json::Value,
    pub tensors: Vec<(String, QuantizedTensor)>,
}

impl WeightFile {
    pub fn tensor(&self, name: &str) -> Option<&QuantizedTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn serialize_model(
    tensors: &[(String, QuantizedTensor)],
    model: &serde_json::Value,
) -> Result<Vec<u8>> {
    let first = tensors
        .first()
        .ok_or_else(|| Error::Input("weight file needs at least one tensor".into()))?;
    let (p_max, group_size) = (first.1.p_max(), first.1.group_size());
    for (name, t) in tensors {
        if t.p_max() != p_max || t.group_size() != group_size {
            return Err(Error::Input(format!(
                "tensor `{name}` has p_max {} / group size {}, expected {p_max} / {group_size}",
                t.p_max(),
                t.group_size()
            )));
        }
    }
    let meta = Metadata {
        p_max,
        group_size,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect(),
        model: model.clone(),
    };
    let meta_bytes = serde_json::to_vec(&meta)?;
    let meta_len = u32::try_from(meta_bytes.len())
        .map_err(|_| Error::Input("metadata exceeds 4 GiB".into()))?;

    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&meta_len.to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    for (_, t) in tensors {
        for v in t.mins().iter().chain(t.steps()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for plane in t.store().planes() {
            out.extend_from_slice(plane);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(
        &mut self,
        n: usize,
        what: &'static str,
        tensor: Option<&str>,
    ) -> std::result::Result<&'a [u8], ParseError> {
        if self.buf.len() - self.pos < n {
            return Err(ParseError::Truncated {
                offset: self.buf.len(),
                what,
                tensor: tensor.map(str::to_owned),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> std::result::Result<u32, ParseError> {
        let b = self.take(4, what, None)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn f32s(
        &mut self,
        n: usize,
        what: &'static str,
        tensor: &str,
    ) -> std::result::Result<Vec<f32>, ParseError> {
        let b = self.take(n * 4, what, Some(tensor))?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn parse_model(bytes: &[u8]) -> Result<WeightFile> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic", None)?;
    if magic != MAGIC {
        return Err(ParseError::BadMagic {
            found: magic.try_into().expect("4 bytes"),
        }
        .into());
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(ParseError::UnsupportedVersion {
            found: version,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta_offset = r.pos;
    let meta_raw = r.take(meta_len, "metadata", None)?;
    let meta: Metadata = serde_json::from_slice(meta_raw).map_err(|e| ParseError::Metadata {
        offset: meta_offset,
        reason: e.to_string(),
    })?;
    check_bits(meta.p_max).map_err(|e| ParseError::Metadata {
        offset: meta_offset,
        reason: e.to_string(),
    })?;
    if meta.group_size == 0 {
        return Err(ParseError::Metadata {
            offset: meta_offset,
            reason: "group size is zero".into(),
        }
        .into());
    }

    let mut tensors = Vec::with_capacity(meta.tensors.len());
    for entry in &meta.tensors {
        let start = r.pos;
        let tensor_err = |reason: String| ParseError::Tensor {
            offset: start,
            tensor: entry.name.clone(),
            reason,
        };
        let n = entry
            .rows
            .checked_mul(entry.cols)
            .filter(|&n| n > 0)
            .ok_or_else(|| tensor_err(format!("invalid shape {}x{}", entry.rows, entry.cols)))?;
        let groups = entry.rows * entry.cols.div_ceil(meta.group_size);
        let mins = r.f32s(groups, "group mins", &entry.name)?;
        let steps = r.f32s(groups, "group steps", &entry.name)?;
        let nbytes = plane_bytes(n);
        let mut planes = Vec::with_capacity(meta.p_max as usize);
        for _ in 0..meta.p_max {
            planes.push(r.take(nbytes, "bit plane", Some(&entry.name))?.to_vec());
        }
        let store =
            BitPlaneStore::from_planes(planes, n).map_err(|e| tensor_err(e.to_string()))?;
        let t = QuantizedTensor::from_parts(
            entry.rows,
            entry.cols,
            meta.group_size,
            mins,
            steps,
            store,
        )
        .map_err(|e| tensor_err(e.to_string()))?;
        tensors.push((entry.name.clone(), t));
    }
    if r.pos != bytes.len() {
        return Err(ParseError::TrailingBytes {
            offset: r.pos,
            extra: bytes.len() - r.pos,
        }
        .into());
    }
    Ok(WeightFile {
        model: meta.model,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::quantize_tensor;

    fn sample() -> (Vec<(String, QuantizedTensor)>, serde_json::Value) {
        let a: Vec<f64> = (0..30).map(|i| (f64::from(i) * 0.37).cos()).collect();
        let b: Vec<f64> = (0..7).map(|i| f64::from(i) - 3.0).collect();
        (
            vec![
                ("a".into(), quantize_tensor(&a, 3, 10, 4, 4).unwrap()),
                ("b".into(), quantize_tensor(&b, 1, 7, 4, 4).unwrap()),
            ],
            serde_json::json!({"d_model": 10}),
        )
    }

    #[test]
    fn round_trip_is_identity() {
        let (tensors, model) = sample();
        let bytes = serialize_model(&tensors, &model).unwrap();
        assert_eq!(&bytes[..4], b"PMPD");
        let file = parse_model(&bytes).unwrap();
        assert_eq!(file.tensors, tensors);
        assert_eq!(file.model, model);
    }

    #[test]
    fn flipped_magic_is_reported() {
        let (tensors, model) = sample();
        let mut bytes = serialize_model(&tensors, &model).unwrap();
        bytes[1] ^= 0xff;
        let err = parse_model(&bytes).unwrap_err();
        assert!(matches!(err, Error::Parse(ParseError::BadMagic { .. })));
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn wrong_version_is_reported() {
        let (tensors, model) = sample();
        let mut bytes = serialize_model(&tensors, &model).unwrap();
        bytes[4] = 9;
        assert!(matches!(
            parse_model(&bytes),
            Err(Error::Parse(ParseError::UnsupportedVersion { found: 9, .. }))
        ));
    }

    #[test]
    fn truncation_mid_plane_names_the_tensor() {
        let (tensors, model) = sample();
        let bytes = serialize_model(&tensors, &model).unwrap();
        // the last tensor's final plane is its trailing byte
        let err = parse_model(&bytes[..bytes.len() - 1]).unwrap_err();
        match err {
            Error::Parse(ParseError::Truncated { tensor, what, .. }) => {
                assert_eq!(tensor.as_deref(), Some("b"));
                assert_eq!(what, "bit plane");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_model(&bytes[..bytes.len() - 1])
            .unwrap_err()
            .to_string()
            .contains("`b`"));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let (tensors, model) = sample();
        let mut bytes = serialize_model(&tensors, &model).unwrap();
        bytes.push(0);
        assert!(matches!(
            parse_model(&bytes),
            Err(Error::Parse(ParseError::TrailingBytes { extra: 1, .. }))
        ));
    }

    #[test]
    fn payload_size_matches_layout() {
        let (tensors, model) = sample();
        let bytes = serialize_model(&tensors, &model).unwrap();
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        // a: 3 rows x 3 groups, b: 1 row x 2 groups; 4 planes each
        let expected = 12 + meta_len + (9 * 8 + 4 * 4) + (2 * 8 + 4 * 1);
        assert_eq!(bytes.len(), expected);
    }

    #[test]
    fn mixed_p_max_is_rejected() {
        let (mut tensors, model) = sample();
        tensors.push(("c".into(), quantize_tensor(&[1.0, 2.0], 1, 2, 3, 4).unwrap()));
        assert!(serialize_model(&tensors, &model).is_err());
    }
}
