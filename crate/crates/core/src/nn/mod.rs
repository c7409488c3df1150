//! Feature extractor, optimizer, learning-rate schedule and training loop.

mod mlp;
mod optim;
mod schedule;
mod train;

pub use mlp::{mlp_forward, BoundMlp, Linear, Mlp};
pub use optim::{Adam, AdamConfig, ParamSlot};
pub use schedule::LrSchedule;
pub use train::{train, write_history_csv, EpochRecord, TrainConfig, TrainOutcome};
pub(crate) use train::csv_err;
pub use train::argmax_rows;
