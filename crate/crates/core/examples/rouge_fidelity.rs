//! Rouge-L over token sequences.

use pmpd::metrics::rouge_l;
use pmpd::tinylm::Tokenizer;

fn main() -> anyhow::Result<()> {
    let tok = Tokenizer::Bytes;
    let reference = tok.encode("the cat sat on the mat")?;
    for candidate in ["the cat sat on the mat", "the cat lay on a mat", "a dog ran", ""] {
        let s = rouge_l(&tok.encode(candidate)?, &reference);
        println!("{candidate:>24?}: P={:.3} R={:.3} F1={:.3}", s.precision, s.recall, s.f1);
    }
    let words = |t: &str| t.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    let s = rouge_l(&words("the cat lay on a mat"), &words("the cat sat on the mat"));
    println!("word level: F1={:.3}", s.f1);
    Ok(())
}
