pub mod config;
pub mod data;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod heads;
pub mod importance;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synth;
pub mod train;

#[cfg(test)]
pub(crate) mod testing;

pub use config::{Branch, ImportanceConfig, LossWeights, ModelConfig, Precision};
pub use data::{Carrier, Dataset, FeatureBundle, LoadOptions, MomentAnnotation, Split};
pub use error::{ImgError, Result};
pub use eval::{NoiseSweep, SweepRow};
pub use metrics::EvalReport;
pub use model::{FusionWeight, ImgModel};
pub use synth::{generate_synthetic_dataset, SyntheticCorpus, SyntheticSpec};
pub use train::{TrainOptions, Trainer};
