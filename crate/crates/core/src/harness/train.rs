//! Mini-batch SGD with momentum and weight decay on cross-entropy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::harness::data::SyntheticDataset;
use crate::harness::model::{ModelSpec, TinyCnn, BLOCKS};
use crate::norm::{Mode, NormKind};
use crate::scheme::SchemeConfig;
use crate::tensor::{Scalar, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub norm: NormKind,
    /// Value of the `norm` column in result tables; defaults to the kind.
    pub label: Option<String>,
    pub scheme: SchemeConfig,
    pub epochs: usize,
    /// Leading epochs (within `epochs`) trained with plain BN before a
    /// pbn or pixel_bn model switches to its own kind; they provide the
    /// pre-trained weights and accumulated statistics the blend starts from.
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Cosine decay of the learning rate to zero over the epochs.
    pub cosine: bool,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seeds: Vec<u64>,
    pub width: usize,
    pub norm_sites: usize,
    pub gn_groups: usize,
    pub train_size: usize,
    pub data_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            norm: NormKind::Pbn,
            label: None,
            scheme: SchemeConfig::default(),
            epochs: 12,
            pretrain_epochs: 4,
            batch_size: 32,
            learning_rate: 0.05,
            cosine: true,
            momentum: 0.9,
            weight_decay: 5e-4,
            seeds: vec![0, 1, 2, 3, 4],
            width: 16,
            norm_sites: BLOCKS,
            gn_groups: 4,
            train_size: 1024,
            data_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.norm.label().to_string())
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            width: self.width,
            norm: self.norm,
            norm_sites: self.norm_sites,
            gn_groups: self.gn_groups,
            scheme: self.scheme.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let batch_layers = (0..BLOCKS).any(|b| self.model_spec().site_kind(b).uses_batch_statistics());
        if self.batch_size == 0 || (batch_layers && self.batch_size < 2) {
            return config_err(format!("train.batch_size: {} is too small for batch statistics", self.batch_size));
        }
        if self.batch_size > self.train_size {
            return config_err(format!(
                "train.batch_size: {} exceeds train_size {}",
                self.batch_size, self.train_size
            ));
        }
        if self.epochs == 0 {
            return config_err("train.epochs: must be at least 1");
        }
        if self.pretrain_epochs >= self.epochs {
            return config_err(format!(
                "train.pretrain_epochs: {} must be below epochs {}",
                self.pretrain_epochs, self.epochs
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return config_err(format!("train.learning_rate: {} must be finite and nonnegative", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return config_err(format!("train.momentum: {} is outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return config_err(format!("train.weight_decay: {} must be finite and nonnegative", self.weight_decay));
        }
        if self.seeds.is_empty() {
            return config_err("train.seeds: must not be empty");
        }
        if matches!(&self.label, Some(l) if l.is_empty() || l.contains([',', '\n', '"'])) {
            return config_err("train.label: must be nonempty and free of commas, quotes and newlines");
        }
        self.model_spec().validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("train.{m}")),
            other => other,
        })
    }
}

/// Velocity buffers of SGD with momentum.
pub struct Sgd<T> {
    pub learning_rate: T,
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            learning_rate: T::of(learning_rate),
            momentum: T::of(momentum),
            weight_decay: T::of(weight_decay),
            velocity: Vec::new(),
        }
    }

    /// `v = momentum * v + g + wd * p`, `p -= lr * v`.
    pub fn update(&mut self, params: Vec<&mut [T]>, grads: &[Vec<T>]) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *v = self.momentum * *v + g + self.weight_decay * *p;
                *p = *p - self.learning_rate * *v;
            }
        }
    }
}

fn correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.shape().c;
    labels
        .iter()
        .enumerate()
        .filter(|&(n, &y)| {
            let row = &logits.data()[n * k..(n + 1) * k];
            argmax(row) == y
        })
        .count()
}

/// Index of the first maximum.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// One optimization step on a batch. Returns the batch loss and the number
/// of correctly classified samples.
pub fn train_step<T: Scalar>(
    model: &mut TinyCnn<T>,
    opt: &mut Sgd<T>,
    images: Tensor<T>,
    labels: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize)> {
    model.set_mode(Mode::Train);
    let mut tape = Tape::new();
    let f = model.forward(&mut tape, images, true, rng)?;
    let hits = correct(tape.value(f.logits), labels);
    let loss = tape.softmax_cross_entropy(f.logits, labels)?;
    let value = tape.value(loss).data()[0].f64();
    if !value.is_finite() {
        return Err(Error::Diverged(format!("training loss became {value}")));
    }
    tape.backward(loss)?;
    let grads: Vec<Vec<T>> =
        f.params.iter().map(|&p| tape.grad(p).map(<[T]>::to_vec).unwrap_or_default()).collect();
    opt.update(model.params_mut(), &grads);
    Ok((value, hits))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

pub struct TrainOutcome<T> {
    pub seed: u64,
    pub model: TinyCnn<T>,
    pub history: Vec<EpochStats>,
}

/// Random streams of one training run: weight init, batch order, layer draws.
pub fn run_rngs(seed: u64, scheme_seed: u64) -> [ChaCha8Rng; 3] {
    let stream = |s: u64, i: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        r.set_stream(i);
        r
    };
    [stream(seed, 0), stream(seed, 1), stream(seed ^ scheme_seed.rotate_left(17), 2)]
}

/// Trains one model from scratch. Incomplete trailing batches are dropped.
pub fn train<T: Scalar>(cfg: &TrainConfig, seed: u64, data: &SyntheticDataset) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.len() < cfg.batch_size {
        return config_err(format!("dataset of {} samples is smaller than one batch", data.len()));
    }
    let [mut init_rng, mut order_rng, mut layer_rng] = run_rngs(seed, cfg.scheme.rng_seed);
    let mut model = TinyCnn::new(cfg.model_spec(), &mut init_rng)?;
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batches = data.len() / cfg.batch_size;
    let mut history = Vec::with_capacity(cfg.epochs);
    let pretrain = if matches!(cfg.norm, NormKind::Pbn | NormKind::PixelBn) { cfg.pretrain_epochs } else { 0 };
    for epoch in 0..cfg.epochs {
        model.relabel(if epoch < pretrain { NormKind::Bn } else { cfg.norm });
        let scale = if cfg.cosine {
            0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.epochs as f64).cos())
        } else {
            1.0
        };
        opt.learning_rate = T::of(cfg.learning_rate * scale);
        order.shuffle(&mut order_rng);
        let (mut loss, mut hits) = (0.0, 0);
        for b in 0..batches {
            let idx = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let images = data.images.select_batch(idx)?.cast::<T>();
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let (l, h) = train_step(&mut model, &mut opt, images, &labels, &mut layer_rng)
                .map_err(|e| match e {
                    Error::Diverged(m) => Error::Diverged(format!("seed {seed}, epoch {epoch}, batch {b}: {m}")),
                    other => other,
                })?;
            loss += l;
            hits += h;
        }
        history.push(EpochStats {
            epoch,
            loss: loss / batches as f64,
            accuracy: hits as f64 / (batches * cfg.batch_size) as f64,
        });
    }
    model.set_mode(Mode::Eval);
    Ok(TrainOutcome { seed, model, history })
}
