//! Run configuration and the train-then-evaluate pipeline.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::harness::data::{generate_dataset, generate_range, SyntheticDataset};
use crate::harness::eval::{evaluate, DomainSet, DomainSuite, ResultTable};
use crate::harness::train::{train, TrainConfig, TrainOutcome};
use crate::tensor::Scalar;

pub const METRICS_HEADER: &str = "seed,epoch,loss,train_accuracy";
pub const PRECISION_VAR: &str = "PATCHNORM_PRECISION";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub suite: DomainSuite,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { train: TrainConfig::default(), suite: DomainSuite::default(), output_dir: PathBuf::from("runs") }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.suite.validate()
    }

    pub fn train_set(&self) -> Result<SyntheticDataset> {
        generate_dataset(self.train.data_seed, self.train.train_size)
    }

    /// Held-out samples that follow the training indices of the same stream.
    pub fn test_set(&self) -> Result<SyntheticDataset> {
        generate_range(self.train.data_seed, self.train.train_size, self.suite.test_size)
    }
}

/// Scalar type for training and evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => config_err(format!("{PRECISION_VAR}: expected f32 or f64, got `{other}`")),
        }
    }

    /// Reads the precision variable; unset means f32.
    pub fn from_env() -> Result<Self> {
        match std::env::var(PRECISION_VAR) {
            Ok(v) => Self::parse(&v),
            Err(std::env::VarError::NotPresent) => Ok(Precision::F32),
            Err(e) => config_err(format!("{PRECISION_VAR}: {e}")),
        }
    }
}

pub fn checkpoint_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("checkpoint_seed{seed}.pnrc"))
}

pub fn metrics_csv<T>(outcomes: &[TrainOutcome<T>]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for o in outcomes {
        for e in &o.history {
            s += &format!("{},{},{},{}\n", o.seed, e.epoch, e.loss, e.accuracy);
        }
    }
    s
}

/// Trains one model per configured seed, in seed-list order.
pub fn train_all<T: Scalar>(cfg: &RunConfig) -> Result<Vec<TrainOutcome<T>>> {
    cfg.validate()?;
    let data = cfg.train_set()?;
    cfg.train.seeds.iter().map(|&seed| train::<T>(&cfg.train, seed, &data)).collect()
}

/// Evaluates trained models on the configured suite.
pub fn evaluate_all<T: Scalar>(cfg: &RunConfig, outcomes: &[TrainOutcome<T>]) -> Result<ResultTable> {
    let set: DomainSet = cfg.suite.build(&cfg.test_set()?)?;
    let label = cfg.train.label();
    let mut table = ResultTable::default();
    for o in outcomes {
        table.rows.extend(evaluate(&o.model, &set, o.seed, &label)?);
    }
    table.sort();
    Ok(table)
}
