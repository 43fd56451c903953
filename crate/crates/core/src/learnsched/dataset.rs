use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Prefill features for one prompt and the grid index it should map to.
///
/// Features are stored at f32 so the in-memory example and its JSON-lines
/// form are identical.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub prompt: Vec<u32>,
    pub tokens: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
    pub label: usize,
    /// Rouge-L F1 against the reference at every grid point.
    pub scores: Vec<f64>,
}

impl LabeledExample {
    pub fn keys_f64(&self) -> Vec<f64> {
        self.keys.iter().map(|&x| f64::from(x)).collect()
    }

    pub fn values_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&x| f64::from(x)).collect()
    }

    /// Builds an example directly from real-valued features.
    pub fn from_features(keys: &[f64], values: &[f64], tokens: usize, label: usize) -> Result<Self> {
        if tokens == 0 || !keys.len().is_multiple_of(tokens) || !values.len().is_multiple_of(tokens) {
            return Err(Error::Input(format!(
                "features of length ({}, {}) do not split into {tokens} rows",
                keys.len(),
                values.len()
            )));
        }
        Ok(Self {
            prompt: Vec::new(),
            tokens,
            d_k: keys.len() / tokens,
            d_v: values.len() / tokens,
            keys: keys.iter().map(|&x| x as f32).collect(),
            values: values.iter().map(|&x| x as f32).collect(),
            label,
            scores: Vec::new(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ExampleJson {
    prompt: Vec<u32>,
    tokens: usize,
    d_k: usize,
    d_v: usize,
    keys: String,
    values: String,
    label: usize,
    scores: Vec<f64>,
}

fn encode_f32(v: &[f32]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode_f32(s: &str, expected: usize, what: &str) -> Result<Vec<f32>> {
    let bytes = STANDARD
        .decode(s)
        .map_err(|e| Error::Input(format!("{what}: bad base64: {e}")))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Input(format!(
            "{what}: {} bytes, expected {}",
            bytes.len(),
            expected * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

pub fn write_jsonl(examples: &[LabeledExample]) -> Result<String> {
    let mut out = String::new();
    for e in examples {
        let j = ExampleJson {
            prompt: e.prompt.clone(),
            tokens: e.tokens,
            d_k: e.d_k,
            d_v: e.d_v,
            keys: encode_f32(&e.keys),
            values: encode_f32(&e.values),
            label: e.label,
            scores: e.scores.clone(),
        };
        out.push_str(&serde_json::to_string(&j)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_jsonl(text: &str) -> Result<Vec<LabeledExample>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let j: ExampleJson = serde_json::from_str(line)
                .map_err(|e| Error::Input(format!("dataset line {}: {e}", i + 1)))?;
            Ok(LabeledExample {
                keys: decode_f32(&j.keys, j.tokens * j.d_k, "keys")?,
                values: decode_f32(&j.values, j.tokens * j.d_v, "values")?,
                prompt: j.prompt,
                tokens: j.tokens,
                d_k: j.d_k,
                d_v: j.d_v,
                label: j.label,
                scores: j.scores,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let mut e = LabeledExample::from_features(&[0.5, -1.25, 3.0, 4.0], &[1.0, 2.0], 2, 3).unwrap();
        e.prompt = vec![1, 2, 3];
        e.scores = vec![0.1, 0.9];
        let text = write_jsonl(&[e.clone(), e.clone()]).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(read_jsonl(&text).unwrap(), vec![e.clone(), e]);
    }

    #[test]
    fn rejects_wrong_feature_length() {
        let e = LabeledExample::from_features(&[0.5, 1.0], &[1.0, 2.0], 2, 0).unwrap();
        let text = write_jsonl(&[e]).unwrap().replace("\"tokens\":2", "\"tokens\":3");
        assert!(read_jsonl(&text).is_err());
        assert!(LabeledExample::from_features(&[1.0; 3], &[1.0; 2], 2, 0).is_err());
    }
}
