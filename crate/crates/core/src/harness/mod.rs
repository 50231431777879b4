//! Synthetic sequences, training pairs, the toy training loop and
//! closed-loop tracking.

pub mod crop;
pub mod export;
pub mod synth;
pub mod track;
pub mod train;

pub use crop::{crop, make_pair, Crop, Pair};
pub use export::{export_sequence, gt_entries, GtEntry};
pub use synth::{gen_sequence, Motion, SequenceConfig, ShapeKind, SyntheticSequence};
pub use track::{track_sequence, FrameResult, TrackResult};
pub use train::{
    pair_loss, read_trace, train_toy, write_trace, LossBreakdown, Sgd, TrainConfig, TrainOutcome,
    TrainRecord,
};
