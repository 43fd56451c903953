//! Learned switch-point scheduler: attention pooling over prefill keys and
//! values feeding a small classifier over the switch grid.

mod dataset;
mod features;
mod labels;
mod net;
mod train;

pub use dataset::{read_jsonl, write_jsonl, LabeledExample};
pub use features::{FeatureSource, Features};
pub use labels::{generate_labels, minimal_label, truncate_prompts, LabelConfig, LABEL_TOLERANCE};
pub use net::{NetForward, NetPrecisions, NetShape, Params, SchedulerNet, DEFAULT_HIDDEN, NET_FORMAT_TAG};
pub use train::{evaluate, train, TrainConfig, TrainReport};
