//! Synthetic corruption suite: five kinds, five severities each.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

pub const SEVERITIES: [u8; 5] = [1, 2, 3, 4, 5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    Blur3x3,
    ContrastScale,
    BrightnessShift,
    PixelDropout,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::Blur3x3,
        CorruptionKind::ContrastScale,
        CorruptionKind::BrightnessShift,
        CorruptionKind::PixelDropout,
    ];

    pub fn label(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::Blur3x3 => "blur3x3",
            CorruptionKind::ContrastScale => "contrast_scale",
            CorruptionKind::BrightnessShift => "brightness_shift",
            CorruptionKind::PixelDropout => "pixel_dropout",
        }
    }

    /// Parameter at severity 0 leaves images unchanged.
    pub fn identity_param(self) -> f64 {
        match self {
            CorruptionKind::ContrastScale => 1.0,
            _ => 0.0,
        }
    }

    /// Noise std, blur blend weight, contrast factor, brightness offset or
    /// drop probability for severities 1..=5.
    pub fn params(self) -> [f64; 5] {
        match self {
            CorruptionKind::GaussianNoise => [0.02, 0.04, 0.06, 0.08, 0.1],
            CorruptionKind::Blur3x3 => [0.2, 0.35, 0.5, 0.7, 1.0],
            CorruptionKind::ContrastScale => [0.8, 0.65, 0.5, 0.4, 0.3],
            CorruptionKind::BrightnessShift => [0.05, 0.1, 0.2, 0.3, 0.4],
            CorruptionKind::PixelDropout => [0.01, 0.02, 0.04, 0.07, 0.1],
        }
    }

    pub fn severity_param(self, severity: u8) -> Result<f64> {
        match severity {
            0 => Ok(self.identity_param()),
            1..=5 => Ok(self.params()[severity as usize - 1]),
            s => config_err(format!("severity must be in 1..=5, got {s}")),
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption kind `{s}`")))
    }
}

/// `(1 - weight) * x + weight * box3x3(x)`; the box average shrinks at the
/// border to the pixels inside the plane.
fn box_blur(plane: &mut [f64], h: usize, w: usize, weight: f64) {
    let src = plane.to_vec();
    for r in 0..h {
        for c in 0..w {
            let (mut sum, mut n) = (0.0, 0.0);
            for rr in r.saturating_sub(1)..(r + 2).min(h) {
                for cc in c.saturating_sub(1)..(c + 2).min(w) {
                    sum += src[rr * w + cc];
                    n += 1.0;
                }
            }
            plane[r * w + c] = (1.0 - weight) * src[r * w + c] + weight * sum / n;
        }
    }
}

/// Applies `kind` with a raw parameter value. The identity parameter
/// returns the input unchanged; everything else is clipped to `[0, 1]`.
pub fn apply<R: Rng + ?Sized>(images: &Tensor<f64>, kind: CorruptionKind, param: f64, rng: &mut R) -> Tensor<f64> {
    let mut out = images.clone();
    if param == kind.identity_param() {
        return out;
    }
    let s = images.shape();
    let plane = s.plane();
    let data = out.data_mut();
    match kind {
        CorruptionKind::GaussianNoise => {
            for v in data.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += param * z;
            }
        }
        CorruptionKind::Blur3x3 => {
            for p in data.chunks_mut(plane) {
                box_blur(p, s.h, s.w, param);
            }
        }
        CorruptionKind::ContrastScale => {
            for p in data.chunks_mut(plane) {
                let mean = p.iter().sum::<f64>() / plane as f64;
                p.iter_mut().for_each(|v| *v = mean + param * (*v - mean));
            }
        }
        CorruptionKind::BrightnessShift => data.iter_mut().for_each(|v| *v += param),
        CorruptionKind::PixelDropout => {
            for n in 0..s.n {
                for i in 0..plane {
                    if rng.random_bool(param.clamp(0.0, 1.0)) {
                        for c in 0..s.c {
                            data[(n * s.c + c) * plane + i] = 0.0;
                        }
                    }
                }
            }
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}

/// Corrupts `images` at `severity` in `1..=5`.
pub fn corrupt<R: Rng + ?Sized>(
    images: &Tensor<f64>,
    kind: CorruptionKind,
    severity: u8,
    rng: &mut R,
) -> Result<Tensor<f64>> {
    if !(1..=5).contains(&severity) {
        return config_err(format!("severity must be in 1..=5, got {severity}"));
    }
    Ok(apply(images, kind, kind.severity_param(severity)?, rng))
}

/// Mean absolute difference between two equally shaped tensors.
pub fn mean_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let n = a.numel().max(1) as f64;
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n
}
