//! Speed comparison between the convolutional branch and a recurrent baseline.

mod lstm;
mod macs;
mod report;

pub use lstm::{LstmBaseline, LstmCell, LstmConfig};
pub use macs::{conv_macs, count_macs, lstm_macs, tcn_macs, MacCount, ModelSpec};
pub use report::{bench_run, hardware_note, time_op, BenchModel, BenchReport, LstmBench, ModelBench, TcnBench, Timing};
