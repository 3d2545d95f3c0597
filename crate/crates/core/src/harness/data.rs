//! Procedural 8-class shape images on textured backgrounds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Result};
use crate::tensor::{Shape, Tensor};

pub const CLASSES: usize = 8;
pub const CHANNELS: usize = 3;
pub const SIDE: usize = 16;

pub const CLASS_NAMES: [&str; CLASSES] =
    ["circle", "square", "triangle", "cross", "ring", "diamond", "bar", "saltire"];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    /// `N x 3 x 16 x 16`, values in `[0, 1]`.
    pub images: Tensor<f64>,
    pub labels: Vec<usize>,
    pub seed: u64,
    /// Index of the first sample; sample `i` has label `(start + i) % 8`.
    pub start: usize,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn histogram(&self) -> [usize; CLASSES] {
        let mut h = [0; CLASSES];
        self.labels.iter().for_each(|&y| h[y] += 1);
        h
    }
}

fn inside(class: usize, dx: f64, dy: f64, r: f64) -> bool {
    let d = (dx * dx + dy * dy).sqrt();
    let (ax, ay) = (dx.abs(), dy.abs());
    match class {
        0 => d <= r,
        1 => ax.max(ay) <= 0.8 * r,
        2 => {
            let t = (dy + r) / (1.8 * r);
            (0.0..=1.0).contains(&t) && ax <= t * r
        }
        3 => (ax <= 0.3 * r && ay <= r) || (ay <= 0.3 * r && ax <= r),
        4 => d <= r && d >= 0.55 * r,
        5 => ax + ay <= r,
        6 => ay <= 0.35 * r && ax <= r,
        _ => (ax - ay).abs() <= 0.3 * r && ax.max(ay) <= 0.85 * r,
    }
}

/// Writes sample `index` of stream `seed` into `out` (`3 x 16 x 16`).
fn draw_sample(seed: u64, index: usize, out: &mut [f64]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let class = index % CLASSES;
    let base: [f64; CHANNELS] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
    let fg: [f64; CHANNELS] = std::array::from_fn(|c| {
        let delta = rng.random_range(0.25..0.45);
        if base[c] + delta <= 1.0 && (base[c] - delta < 0.0 || rng.random_bool(0.5)) {
            base[c] + delta
        } else {
            base[c] - delta
        }
    });
    let amp = rng.random_range(0.04..0.12);
    let freq = rng.random_range(0.3..1.2);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let cx = 7.5 + rng.random_range(-2.0..2.0);
    let cy = 7.5 + rng.random_range(-2.0..2.0);
    let r = rng.random_range(3.5..6.0);
    let plane = SIDE * SIDE;
    for h in 0..SIDE {
        for w in 0..SIDE {
            let (x, y) = (w as f64, h as f64);
            let stripe = amp * (freq * (x * angle.cos() + y * angle.sin()) + phase).sin();
            let shape = inside(class, x - cx, y - cy, r);
            for c in 0..CHANNELS {
                let grain = rng.random_range(-0.03..0.03);
                let v = if shape { fg[c] } else { base[c] + stripe } + grain;
                out[c * plane + h * SIDE + w] = v.clamp(0.0, 1.0);
            }
        }
    }
}

/// Samples `start..start + n` of the stream `seed`.
pub fn generate_range(seed: u64, start: usize, n: usize) -> Result<SyntheticDataset> {
    if n < CLASSES {
        return config_err(format!("dataset needs at least {CLASSES} samples, got {n}"));
    }
    let shape = Shape::new(n, CHANNELS, SIDE, SIDE);
    let mut data = vec![0.0; shape.numel()];
    let per = CHANNELS * SIDE * SIDE;
    for (i, chunk) in data.chunks_mut(per).enumerate() {
        draw_sample(seed, start + i, chunk);
    }
    let labels = (start..start + n).map(|i| i % CLASSES).collect();
    Ok(SyntheticDataset { images: Tensor::new(shape, data)?, labels, seed, start })
}

pub fn generate_dataset(seed: u64, n: usize) -> Result<SyntheticDataset> {
    generate_range(seed, 0, n)
}
