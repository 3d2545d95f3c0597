//! Dense rank-4 tensors in `N, C, H, W` order and the reverse-mode tape.
//!
//! Rank-2 data (for example logits) is stored as `N x C x 1 x 1`.

mod ops;
mod tape;

pub use ops::{conv3x3_shape, ConvWeights};
pub use tape::{Backward, Tape, Var};

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{config_err, dim_err, Result};

/// Floating point element type. Implemented for `f32` (training) and `f64`
/// (oracles and gradient checks).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + std::iter::Sum + Default + Debug + Display + Send + Sync + 'static
{
    const DTYPE: &'static str;

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub const fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub fn to_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// A dense tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return dim_err(format!(
                "buffer of length {} does not match shape {shape}",
                data.len()
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![T::zero(); shape.numel()], requires_grad: false, grad: None }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor { shape, data: vec![value; shape.numel()], requires_grad: false, grad: None }
    }

    pub fn from_f64(shape: Shape, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    /// Marks the tensor as a differentiable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub(crate) fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<T>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.index(n, c, h, w)]
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.numel() {
            return dim_err(format!("cannot reshape {} into {shape}", self.shape));
        }
        Ok(Tensor { shape, data: self.data.clone(), requires_grad: false, grad: None })
    }

    /// Samples `start..end` along the batch axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.shape.n {
            return dim_err(format!("batch range {start}..{end} outside {}", self.shape));
        }
        let per = self.shape.c * self.shape.plane();
        let shape = Shape { n: end - start, ..self.shape };
        Tensor::new(shape, self.data[start * per..end * per].to_vec())
    }

    /// Gathers samples by index along the batch axis.
    pub fn select_batch(&self, indices: &[usize]) -> Result<Self> {
        let per = self.shape.c * self.shape.plane();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.shape.n {
                return dim_err(format!("sample {i} outside {}", self.shape));
            }
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        Tensor::new(Shape { n: indices.len(), ..self.shape }, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|x| U::of(x.f64())).collect(),
            requires_grad: false,
            grad: None,
        }
    }
}

/// Per-channel mean over all `N*H*W` scalars of each channel.
pub fn channel_mean<T: Scalar>(f: &Tensor<T>) -> Result<Vec<T>> {
    let s = f.shape();
    if s.numel() == 0 {
        return dim_err(format!("channel mean of empty tensor {s}"));
    }
    let count = T::of((s.n * s.plane()) as f64);
    let plane = s.plane();
    let mut out = Vec::with_capacity(s.c);
    for c in 0..s.c {
        let mut acc = T::zero();
        for n in 0..s.n {
            let base = s.index(n, c, 0, 0);
            for &x in &f.data()[base..base + plane] {
                acc = acc + x;
            }
        }
        out.push(acc / count);
    }
    Ok(out)
}

/// Per-channel `sqrt(biased variance + eps)`.
pub fn channel_std<T: Scalar>(f: &Tensor<T>, mean: &[T], eps: T) -> Result<Vec<T>> {
    let s = f.shape();
    if !(eps > T::zero()) {
        return config_err(format!("eps must be positive, got {eps}"));
    }
    if mean.len() != s.c {
        return dim_err(format!("mean has length {} but tensor has {} channels", mean.len(), s.c));
    }
    if s.numel() == 0 {
        return dim_err(format!("channel std of empty tensor {s}"));
    }
    Ok(channel_std_raw(f, mean, eps))
}

/// `channel_std` without the eps check, for statistics that allow `eps = 0`.
pub(crate) fn channel_std_raw<T: Scalar>(f: &Tensor<T>, mean: &[T], eps: T) -> Vec<T> {
    let s = f.shape();
    let count = T::of((s.n * s.plane()) as f64);
    let plane = s.plane();
    (0..s.c)
        .map(|c| {
            let mut acc = T::zero();
            for n in 0..s.n {
                let base = s.index(n, c, 0, 0);
                for &x in &f.data()[base..base + plane] {
                    let d = x - mean[c];
                    acc = acc + d * d;
                }
            }
            (acc / count + eps).sqrt()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_mean(f: &Tensor<f64>, c: usize) -> f64 {
        let s = f.shape();
        let mut vals = Vec::new();
        for n in 0..s.n {
            for h in 0..s.h {
                for w in 0..s.w {
                    vals.push(f.at(n, c, h, w));
                }
            }
        }
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    #[test]
    fn channel_mean_examples() {
        let ones = Tensor::<f64>::from_f64(Shape::new(1, 1, 2, 2), &[1.0; 4]).unwrap();
        assert_eq!(channel_mean(&ones).unwrap(), vec![1.0]);
        let cols = Tensor::<f64>::from_f64(Shape::new(1, 1, 2, 2), &[1.0, 3.0, 1.0, 3.0]).unwrap();
        let m = channel_mean(&cols).unwrap();
        assert_eq!(m, vec![(1.0 + 3.0 + 1.0 + 3.0) / 4.0]);
        // layout n0:[c0, c1], n1:[c0, c1]
        let two = Tensor::<f64>::from_f64(Shape::new(2, 2, 1, 1), &[0.0, 2.0, 4.0, 2.0]).unwrap();
        assert_eq!(channel_mean(&two).unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn channel_mean_empty_is_dimension_error() {
        let empty = Tensor::<f64>::zeros(Shape::new(0, 1, 2, 2));
        assert!(matches!(channel_mean(&empty), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn channel_std_examples() {
        let c = Tensor::<f64>::full(Shape::new(1, 1, 2, 2), 7.0);
        let s = channel_std(&c, &[7.0], 1e-5).unwrap();
        assert!((s[0] - 1e-5f64.sqrt()).abs() < 1e-15);
        assert!((s[0] - 3.1623e-3).abs() < 1e-7);

        let cols = Tensor::<f64>::from_f64(Shape::new(1, 1, 2, 2), &[1.0, 3.0, 1.0, 3.0]).unwrap();
        let m = channel_mean(&cols).unwrap();
        // variance oracle: squared deviations are all 1, so biased variance is 1
        let s = channel_std(&cols, &m, 1e-300).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12);
        let s = channel_std(&cols, &m, 1e-5).unwrap();
        assert!((s[0] - 1.00001f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn channel_std_rejects_nonpositive_eps() {
        let c = Tensor::<f64>::full(Shape::new(1, 1, 2, 2), 7.0);
        assert!(matches!(channel_std(&c, &[7.0], 0.0), Err(crate::Error::Config(_))));
        assert!(matches!(channel_std(&c, &[7.0, 1.0], 1e-5), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn reductions_match_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let shape = Shape::new(rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..7), rng.random_range(1..7));
            let f = Tensor::<f64>::from_fn(shape, |_, _, _, _| rng.random_range(-3.0..3.0));
            let m = channel_mean(&f).unwrap();
            let s = channel_std(&f, &m, 1e-5).unwrap();
            for c in 0..shape.c {
                let om = naive_mean(&f, c);
                let mut var = 0.0;
                let mut k = 0.0;
                for n in 0..shape.n {
                    for h in 0..shape.h {
                        for w in 0..shape.w {
                            var += (f.at(n, c, h, w) - om).powi(2);
                            k += 1.0;
                        }
                    }
                }
                let os = (var / k + 1e-5).sqrt();
                assert!((m[c] - om).abs() <= 1e-10 * om.abs().max(1.0));
                assert!((s[c] - os).abs() <= 1e-10 * os);
            }
        }
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::<f32>::new(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
    }
}
