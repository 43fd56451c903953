//! Greedy generation on the toy model under a fixed and a switching schedule.

use pmpd::metrics::rouge_l;
use pmpd::schedule::PrecisionSchedule;
use pmpd::tinylm::{generate, ModelConfig, ModelVariants, SamplerConfig, Tokenizer, EOS_TOKEN};

fn main() -> anyhow::Result<()> {
    let model = ModelVariants::random(ModelConfig::toy(), 7, 4, 64)?;
    let tok = Tokenizer::Bytes;
    let prompt = tok.encode("The lighthouse keeper climbed the stairs")?;
    let steps = 24;

    let reference = PrecisionSchedule::uniform(16, 16, steps)?;
    let switching = PrecisionSchedule::two_level(4, 3, 12, 4, steps)?;
    let fixed = PrecisionSchedule::uniform(3, 4, steps)?;

    let r = generate(&model, &prompt, &reference, SamplerConfig::greedy(), Some(EOS_TOKEN), steps)?;
    for (name, s) in [("4 then 3", &switching), ("all 3", &fixed)] {
        let t = generate(&model, &prompt, s, SamplerConfig::greedy(), Some(EOS_TOKEN), steps)?;
        let f1 = rouge_l(t.text_tokens(), r.text_tokens()).f1;
        println!("{name:>8}: decode bits {:?}", t.decode_precisions());
        println!("{:>8}  Rouge-L F1 vs full precision {f1:.3}, output {:?}", "", tok.decode(t.text_tokens()));
    }
    Ok(())
}
