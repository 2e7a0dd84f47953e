//! Anticipation windows, feature files, synthetic data and metrics.

mod dataset;
pub mod fseq;
pub mod metrics;
pub mod synth;
mod window;

pub use dataset::{ClassCounts, Dataset, FeatureSequence, Modality, Sample};
pub use fseq::{read_dataset, read_fseq, write_dataset, write_fseq, INDEX_FILE};
pub use metrics::{class_mean_recall, class_mean_top5_recall, top_k_accuracy, HeadMetrics, MetricsReport};
pub use synth::{generate_synthetic, Preset, SynthData, SynthSpec, SynthWorld};
pub use window::AnticipationWindow;
