//! Synthetic data, batch/config/report I/O, the toy trainer and the run
//! drivers behind the CLI.

pub mod batch_io;
pub mod config;
pub mod prng;
pub mod report;
pub mod runs;
pub mod synth;
pub mod train;

pub use config::{RouterKind, RunConfig};
pub use prng::Prng;
pub use synth::{gen_batch, SyntheticSource, SyntheticSpec, ToyTask};
pub use train::{train_toy, TrainData};
