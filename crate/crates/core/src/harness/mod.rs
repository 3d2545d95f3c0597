//! Desk-scale domain-shift experiment: synthetic data, corruption suite,
//! tiny CNN, training and evaluation.

pub mod corrupt;
pub mod data;
pub mod eval;
pub mod io;
pub mod model;
pub mod run;
pub mod train;

pub use corrupt::{corrupt, CorruptionKind};
pub use data::{generate_dataset, SyntheticDataset};
pub use eval::{evaluate, DomainSuite, ResultTable};
pub use model::{ModelSpec, TinyCnn};
pub use run::RunConfig;
pub use train::{train, TrainConfig};
