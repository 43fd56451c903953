//! Quantizes a random matrix once and reads it back at every precision.

use pmpd::quant::{parse_model, quantize_tensor, serialize_model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> anyhow::Result<()> {
    let (rows, cols) = (16, 128);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let normal = Normal::new(0.0, 0.05)?;
    let w: Vec<f64> = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();

    let qt = quantize_tensor(&w, rows, cols, 4, 64)?;
    let full = qt.unpack_prefix(4)?;
    println!("{} groups, payload {} bytes at p_max", qt.num_groups(), qt.bytes_at(4));
    for p in (1..=4u8).rev() {
        let codes = qt.unpack_prefix(p)?;
        let nested = codes.iter().zip(&full).all(|(&c, &f)| c == f >> (4 - p));
        let rec = qt.dequantize(p)?;
        let max_err = w.iter().zip(&rec).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!("p={p}: {:>5} bytes read, max error {max_err:.5}, prefix of p_max codes: {nested}", qt.bytes_at(p));
    }

    let model = serde_json::json!({ "note": "single tensor demo" });
    let bytes = serialize_model(&[("w".to_string(), qt.clone())], &model)?;
    let back = parse_model(&bytes)?;
    println!("file of {} bytes starts with {:?}", bytes.len(), std::str::from_utf8(&bytes[..4])?);
    assert_eq!(back.tensor("w"), Some(&qt));
    Ok(())
}
