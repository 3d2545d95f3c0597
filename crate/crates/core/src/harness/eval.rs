//! Clean and corrupted accuracy, collected into result tables.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::harness::corrupt::{corrupt, CorruptionKind, SEVERITIES};
use crate::harness::data::SyntheticDataset;
use crate::harness::model::TinyCnn;
use crate::harness::train::argmax;
use crate::norm::Mode;
use crate::tensor::{Scalar, Tensor};

pub const CLEAN: &str = "clean";
pub const AVERAGE: &str = "avg";
pub const RESULTS_HEADER: &str = "seed,norm,kind,severity,accuracy";
pub const AGGREGATE_HEADER: &str = "norm,kind,severity,mean,std,seeds";

const EVAL_BATCH: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainSuite {
    pub kinds: Vec<CorruptionKind>,
    pub severities: Vec<u8>,
    pub rng_seed: u64,
    pub test_size: usize,
}

impl Default for DomainSuite {
    fn default() -> Self {
        DomainSuite { kinds: CorruptionKind::ALL.to_vec(), severities: SEVERITIES.to_vec(), rng_seed: 0, test_size: 512 }
    }
}

impl DomainSuite {
    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() || self.severities.is_empty() {
            return config_err("suite: kinds and severities must not be empty");
        }
        if let Some(s) = self.severities.iter().find(|s| !(1..=5).contains(*s)) {
            return config_err(format!("suite.severities: {s} is outside 1..=5"));
        }
        let mut k = self.kinds.clone();
        k.sort_unstable();
        k.dedup();
        let mut s = self.severities.clone();
        s.sort_unstable();
        s.dedup();
        if k.len() != self.kinds.len() || s.len() != self.severities.len() {
            return config_err("suite: duplicate kinds or severities");
        }
        if self.test_size < crate::harness::data::CLASSES {
            return config_err(format!("suite.test_size: {} is below the class count", self.test_size));
        }
        Ok(())
    }

    /// Corrupts `test` once per (kind, severity). Every cell has its own
    /// random stream derived from `rng_seed`.
    pub fn build(&self, test: &SyntheticDataset) -> Result<DomainSet> {
        self.validate()?;
        let mut domains = Vec::with_capacity(self.kinds.len() * self.severities.len());
        for &kind in &self.kinds {
            let k = CorruptionKind::ALL.iter().position(|&x| x == kind).expect("kind listed in ALL") as u64;
            for &severity in &self.severities {
                let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
                rng.set_stream(k * 8 + severity as u64);
                domains.push((kind, severity, corrupt(&test.images, kind, severity, &mut rng)?));
            }
        }
        Ok(DomainSet { clean: test.clone(), domains })
    }
}

/// Clean test set plus its corrupted copies.
pub struct DomainSet {
    pub clean: SyntheticDataset,
    pub domains: Vec<(CorruptionKind, u8, Tensor<f64>)>,
}

/// Eval-mode accuracy of `model` on `images`.
pub fn accuracy<T: Scalar>(model: &TinyCnn<T>, images: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    let n = images.shape().n;
    if n == 0 || labels.len() != n {
        return Err(Error::Dimension(format!("{n} images with {} labels", labels.len())));
    }
    let mut model = model.clone();
    model.set_mode(Mode::Eval);
    let mut hits = 0;
    for start in (0..n).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(n);
        let logits = model.predict(images.slice_batch(start, end)?.cast::<T>())?;
        let k = logits.shape().c;
        hits += (start..end).filter(|&i| argmax(&logits.data()[(i - start) * k..(i - start + 1) * k]) == labels[i]).count();
    }
    Ok(hits as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub seed: u64,
    pub norm: String,
    /// A corruption label or [`CLEAN`].
    pub kind: String,
    /// 0 for the clean set.
    pub severity: u8,
    pub accuracy: f64,
}

/// Clean accuracy followed by one row per (kind, severity), in suite order.
pub fn evaluate<T: Scalar>(model: &TinyCnn<T>, set: &DomainSet, seed: u64, norm: &str) -> Result<Vec<ResultRow>> {
    let labels = &set.clean.labels;
    let row = |kind: &str, severity: u8, accuracy: f64| ResultRow {
        seed,
        norm: norm.to_string(),
        kind: kind.to_string(),
        severity,
        accuracy,
    };
    let mut rows = vec![row(CLEAN, 0, accuracy(model, &set.clean.images, labels)?)];
    for (kind, severity, images) in &set.domains {
        rows.push(row(kind.label(), *severity, accuracy(model, images, labels)?));
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub norm: String,
    pub kind: String,
    pub severity: u8,
    pub mean: f64,
    /// Sample standard deviation over seeds; 0 for a single seed.
    pub std: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl ResultTable {
    /// Orders rows by (norm, seed), keeping the per-run order of domains.
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| (&a.norm, a.seed).cmp(&(&b.norm, b.seed)));
    }

    /// Mean corruption accuracy of every (norm, seed), clean rows excluded.
    pub fn corruption_average(&self) -> BTreeMap<(String, u64), f64> {
        let mut acc: BTreeMap<(String, u64), Vec<f64>> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.kind != CLEAN) {
            acc.entry((r.norm.clone(), r.seed)).or_default().push(r.accuracy);
        }
        acc.into_iter().map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64)).collect()
    }

    /// Mean and spread over seeds per (norm, domain), then the [`AVERAGE`]
    /// row per norm computed from the per-seed corruption averages.
    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let mut order: Vec<(String, String, u8)> = Vec::new();
        let mut cells: BTreeMap<(String, String, u8), Vec<(u64, f64)>> = BTreeMap::new();
        for r in &self.rows {
            let key = (r.norm.clone(), r.kind.clone(), r.severity);
            if !cells.contains_key(&key) {
                order.push(key.clone());
            }
            cells.entry(key).or_default().push((r.seed, r.accuracy));
        }
        let mut norms: Vec<String> = order.iter().map(|k| k.0.clone()).collect();
        norms.sort();
        norms.dedup();
        let averages = self.corruption_average();
        let mut out = Vec::new();
        for norm in norms {
            for key in order.iter().filter(|k| k.0 == norm) {
                let mut v = cells[key].clone();
                v.sort_by_key(|&(s, _)| s);
                let xs: Vec<f64> = v.iter().map(|&(_, a)| a).collect();
                let (mean, std) = mean_std(&xs);
                out.push(AggregateRow { norm: norm.clone(), kind: key.1.clone(), severity: key.2, mean, std, seeds: xs.len() });
            }
            let xs: Vec<f64> = averages.iter().filter(|(k, _)| k.0 == norm).map(|(_, &a)| a).collect();
            if !xs.is_empty() {
                let (mean, std) = mean_std(&xs);
                out.push(AggregateRow { norm: norm.clone(), kind: AVERAGE.into(), severity: 0, mean, std, seeds: xs.len() });
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{RESULTS_HEADER}\n");
        for r in &self.rows {
            s += &format!("{},{},{},{},{}\n", r.seed, r.norm, r.kind, r.severity, r.accuracy);
        }
        s
    }

    pub fn aggregate_csv(&self) -> String {
        let mut s = format!("{AGGREGATE_HEADER}\n");
        for r in self.aggregate() {
            s += &format!("{},{},{},{},{},{}\n", r.norm, r.kind, r.severity, r.mean, r.std, r.seeds);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, why: &str| Error::Format { path: "<results csv>".into(), reason: format!("line {line}: {why}") };
        let mut lines = text.lines();
        if lines.next() != Some(RESULTS_HEADER) {
            return Err(bad(1, "unexpected header"));
        }
        let rows = lines
            .enumerate()
            .map(|(i, l)| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 5 {
                    return Err(bad(i + 2, "expected 5 fields"));
                }
                Ok(ResultRow {
                    seed: f[0].parse().map_err(|_| bad(i + 2, "seed"))?,
                    norm: f[1].to_string(),
                    kind: f[2].to_string(),
                    severity: f[3].parse().map_err(|_| bad(i + 2, "severity"))?,
                    accuracy: f[4].parse().map_err(|_| bad(i + 2, "accuracy"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ResultTable { rows })
    }
}
