//! Labels a handful of prompts, trains the switch-point classifier and uses
//! it to plan a generation.

use pmpd::learnsched::{
    generate_labels, train, FeatureSource, LabelConfig, NetPrecisions, NetShape, SchedulerNet, TrainConfig,
};
use pmpd::schedule::SwitchGrid;
use pmpd::tinylm::{generate, ModelConfig, ModelVariants, SamplerConfig, Tokenizer, EOS_TOKEN};

fn main() -> anyhow::Result<()> {
    let model = ModelVariants::random(ModelConfig::toy(), 3, 4, 64)?;
    let tok = Tokenizer::Bytes;
    let prompts = [
        "A small boat drifted past the harbor wall at dawn",
        "The orchard smelled of apples and wet leaves",
        "Every evening the old clock struck a little late",
        "The map showed a road that nobody could find",
        "Snow covered the station before the last train left",
        "She wrote the answer on the back of a napkin",
    ]
    .iter()
    .map(|p| tok.encode(p))
    .collect::<Result<Vec<_>, _>>()?;

    let grid = SwitchGrid::new(5, 16)?;
    let precisions = NetPrecisions { high: 4, low: 2, prefill: 4 };
    let cfg = LabelConfig {
        high: 4,
        low: 2,
        prefill: 4,
        seed: 5,
        feature: FeatureSource::LastBlock,
        sampler: SamplerConfig::greedy(),
        eos: Some(EOS_TOKEN),
    };
    let (data, skipped) = generate_labels(&model, &prompts, &grid, &cfg)?;
    println!("{} examples, {skipped} skipped, labels {:?}", data.len(), data.iter().map(|e| e.label).collect::<Vec<_>>());

    let d = model.config().d_model;
    let mut net = SchedulerNet::new(NetShape { d_k: d, d_v: d, hidden: 32 }, grid, precisions, FeatureSource::LastBlock, 9)?;
    let report = train(&mut net, &data, &TrainConfig { epochs: 60, batch: 4, ..TrainConfig::default() })?;
    println!("loss {:.3} -> {:.3}, accuracy {:.2}", report.losses[0], report.final_loss, report.accuracy);

    let trace = generate(&model, &prompts[0], &net, SamplerConfig::greedy(), Some(EOS_TOKEN), 16)?;
    println!("planned st={:?}, decode bits {:?}", trace.schedule.switch_points(), trace.decode_precisions());
    Ok(())
}
