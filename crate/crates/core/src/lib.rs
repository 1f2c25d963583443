pub mod aggregate;
pub mod cost;
pub mod data;
pub mod error;
pub mod federated;
pub mod importance;
pub mod lora;
pub mod model;
pub mod selection;
pub mod tensor;

pub use aggregate::{AggregationMode, GlobalState};
pub use data::{Dataset, SyntheticTask};
pub use error::{Error, Result};
pub use federated::{run_experiment, ExperimentConfig, ExperimentResult, RoundMetrics, Simulation};
pub use importance::{ImportanceMatrix, ScoreKind};
pub use lora::wire::ClientUpdate;
pub use lora::{LoraAdapter, PruneMask};
pub use model::{Batch, Evaluation, Model, ModelConfig};
pub use selection::SelectionMode;
pub use tensor::Tensor;
