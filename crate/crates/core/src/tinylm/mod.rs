//! Toy decoder-only transformer whose weights are read at any stored
//! precision, with a KV cache and the progressive mixed-precision decode loop.

mod config;
mod forward;
mod generate;
mod sampler;
mod tokenizer;
mod variants;

pub use config::{ModelConfig, BYTE_VOCAB_SIZE, EOS_TOKEN};
pub use forward::{decode_step, forward_sequence, prefill, KvCache, PrefillOutput};
pub use generate::{generate, GenerationTrace, PrecisionScheduler, Termination};
pub use sampler::{argmax, sample, Sampler, SamplerConfig, SamplingMode};
pub use tokenizer::{Tokenizer, VocabFile};
pub use variants::{
    random_weights, ModelSource, ModelVariants, NormGains, TensorError, DEFAULT_DEQUANT_BUDGET,
};

pub(crate) use forward::softmax_in_place;
