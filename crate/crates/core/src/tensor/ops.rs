//! Differentiable building blocks recorded on a [`Tape`].

use super::{Backward, Scalar, Shape, Tape, Tensor, Var};
use crate::error::{dim_err, Result};

/// Output shape of a same-padded 3x3 convolution.
pub fn conv3x3_shape(input: Shape, weight: Shape) -> Result<Shape> {
    if weight.h != 3 || weight.w != 3 {
        return dim_err(format!("conv weight must be Cout x Cin x 3 x 3, got {weight}"));
    }
    if weight.c != input.c {
        return dim_err(format!("conv weight expects {} input channels, input has {}", weight.c, input.c));
    }
    Ok(Shape::new(input.n, weight.n, input.h, input.w))
}

/// Weight and bias shapes for a convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvWeights {
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvWeights {
    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels, 3, 3)
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(1, self.out_channels, 1, 1)
    }
}

/// Row range `h` such that `h + k - 1` stays inside `0..len`.
#[inline]
fn valid(k: usize, len: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if k == 2 { len.saturating_sub(1) } else { len };
    (lo.min(hi), hi)
}

struct AddOp;
impl<T: Scalar> Backward<T> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, g: &[T], _: &[&Tensor<T>], _: &Tensor<T>) -> Vec<Option<Vec<T>>> {
        vec![Some(g.to_vec()), Some(g.to_vec())]
    }
}

struct MulOp;
impl<T: Scalar> Backward<T> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, g: &[T], inputs: &[&Tensor<T>], _: &Tensor<T>) -> Vec<Option<Vec<T>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let ga = g.iter().zip(b).map(|(&g, &b)| g * b).collect();
        let gb = g.iter().zip(a).map(|(&g, &a)| g * a).collect();
        vec![Some(ga), Some(gb)]
    }
}

struct SumOp;
impl<T: Scalar> Backward<T> for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, g: &[T], inputs: &[&Tensor<T>], _: &Tensor<T>) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![g[0]; inputs[0].numel()])]
    }
}

struct WeightedSumOp<T> {
    weights: Vec<T>,
}
impl<T: Scalar> Backward<T> for WeightedSumOp<T> {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }
    fn backward(&self, g: &[T], _: &[&Tensor<T>], _: &Tensor<T>) -> Vec<Option<Vec<T>>> {
        vec![Some(self.weights.iter().map(|&w| w * g[0]).collect())]
    }
}

struct ReluOp;
impl<T: Scalar> Backward<T> for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, g: &[T], inputs: &[&Tensor<T>], _: &Tensor<T>) -> Vec<Option<Vec<T>>> {
        let gx = g
            .iter()
            .zip(inputs[0].data())
            .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
            .collect();
        vec![Some(gx)]
    }
}

struct MaxPoolOp {
    argmax: Vec<usize>,
}
impl<T: Scalar> Backward<T> for MaxPoolOp {
    fn name(&self) -> &'static str {
        "maxpool2x2"
    }
    fn backward(&self, g: &[T], inputs: &[&Tensor<T>], _: &Tensor<T>) -> Vec<Option<Vec<T>>> {
        let mut gx = vec![T::zero(); inputs[0].numel()];
        for (&src, &g) in self.argmax.iter().zip(g) {
            gx[src] = gx[src] + g;
        }
        vec![Some(gx)]
    }
}

struct Conv3x3Op;
impl<T: Scalar> Backward<T> for Conv3x3Op {
    fn name(&self) -> &'static str {
        "conv3x3"
    }
    fn backward(&self, g: &[T], inputs: &[&Tensor<T>], _: &Tensor<T>) -> Vec<Option<Vec<T>>> {
        let (x, wt) = (inputs[0], inputs[1]);
        let s = x.shape();
        let ws = wt.shape();
        let (hh, ww) = (s.h, s.w);
        let plane = s.plane();
        let mut gx = vec![T::zero(); x.numel()];
        let mut gw = vec![T::zero(); wt.numel()];
        let mut gb = vec![T::zero(); ws.n];
        for n in 0..s.n {
            for co in 0..ws.n {
                let gbase = (n * ws.n + co) * plane;
                let gplane = &g[gbase..gbase + plane];
                gb[co] = gplane.iter().fold(gb[co], |a, &v| a + v);
                for ci in 0..s.c {
                    let xbase = (n * s.c + ci) * plane;
                    let xplane = &x.data()[xbase..xbase + plane];
                    for kh in 0..3 {
                        let (h0, h1) = valid(kh, hh);
                        for kw in 0..3 {
                            let (w0, w1) = valid(kw, ww);
                            let widx = ((co * ws.c + ci) * 3 + kh) * 3 + kw;
                            let k = wt.data()[widx];
                            let mut acc = T::zero();
                            for h in h0..h1 {
                                let src = (h + kh - 1) * ww;
                                let grow = &gplane[h * ww + w0..h * ww + w1];
                                let xrow = &xplane[src + w0 + kw - 1..src + w1 + kw - 1];
                                let gxrow = &mut gx[xbase + src + w0 + kw - 1..xbase + src + w1 + kw - 1];
                                for ((gxv, &gv), &xv) in gxrow.iter_mut().zip(grow).zip(xrow) {
                                    acc = acc + gv * xv;
                                    *gxv = *gxv + gv * k;
                                }
                            }
                            gw[widx] = gw[widx] + acc;
                        }
                    }
                }
            }
        }
        vec![Some(gx), Some(gw), Some(gb)]
    }
}

struct DenseOp;
impl<T: Scalar> Backward<T> for DenseOp {
    fn name(&self) -> &'static str {
        "dense"
    }
    fn backward(&self, g: &[T], inputs: &[&Tensor<T>], _: &Tensor<T>) -> Vec<Option<Vec<T>>> {
        let (x, wt) = (inputs[0], inputs[1]);
        let batch = x.shape().n;
        let fan_in = wt.shape().c;
        let fan_out = wt.shape().n;
        let mut gx = vec![T::zero(); x.numel()];
        let mut gw = vec![T::zero(); wt.numel()];
        let mut gb = vec![T::zero(); fan_out];
        for n in 0..batch {
            let xrow = &x.data()[n * fan_in..(n + 1) * fan_in];
            let gxrow = &mut gx[n * fan_in..(n + 1) * fan_in];
            for o in 0..fan_out {
                let go = g[n * fan_out + o];
                gb[o] = gb[o] + go;
                let wrow = &wt.data()[o * fan_in..(o + 1) * fan_in];
                let gwrow = &mut gw[o * fan_in..(o + 1) * fan_in];
                for i in 0..fan_in {
                    gwrow[i] = gwrow[i] + go * xrow[i];
                    gxrow[i] = gxrow[i] + go * wrow[i];
                }
            }
        }
        vec![Some(gx), Some(gw), Some(gb)]
    }
}

struct SoftmaxXentOp<T> {
    probs: Vec<T>,
    labels: Vec<usize>,
}
impl<T: Scalar> Backward<T> for SoftmaxXentOp<T> {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }
    fn backward(&self, g: &[T], inputs: &[&Tensor<T>], _: &Tensor<T>) -> Vec<Option<Vec<T>>> {
        let s = inputs[0].shape();
        let k = s.c;
        let scale = g[0] / T::of(s.n as f64);
        let mut gx = self.probs.clone();
        for (n, &y) in self.labels.iter().enumerate() {
            gx[n * k + y] = gx[n * k + y] - T::one();
        }
        gx.iter_mut().for_each(|v| *v = *v * scale);
        vec![Some(gx)]
    }
}

impl<T: Scalar> Tape<T> {
    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return dim_err(format!("{op}: shapes {sa} and {sb} differ"));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.record(&[a, b], out, AddOp))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.record(&[a, b], out, MulOp))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let total = self.value(a).data().iter().fold(T::zero(), |acc, &v| acc + v);
        Ok(self.record(&[a], Tensor::full(Shape::scalar(), total), SumOp))
    }

    /// `sum_i weights[i] * a[i]` with constant weights.
    pub fn weighted_sum(&mut self, a: Var, weights: &[T]) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        if weights.len() != x.numel() {
            return dim_err(format!("weighted_sum: {} weights for {} values", weights.len(), x.numel()));
        }
        let total = x.data().iter().zip(weights).fold(T::zero(), |acc, (&v, &w)| acc + v * w);
        let op = WeightedSumOp { weights: weights.to_vec() };
        Ok(self.record(&[a], Tensor::full(Shape::scalar(), total), op))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.record(&[a], out, ReluOp))
    }

    /// 2x2 max pooling with stride 2. A trailing odd row or column is dropped.
    pub fn maxpool2x2(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        let s = x.shape();
        if s.h < 2 || s.w < 2 {
            return dim_err(format!("maxpool2x2 needs spatial extent >= 2, got {s}"));
        }
        let os = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
        let mut data = Vec::with_capacity(os.numel());
        let mut argmax = Vec::with_capacity(os.numel());
        for n in 0..s.n {
            for c in 0..s.c {
                for h in 0..os.h {
                    for w in 0..os.w {
                        let mut best = s.index(n, c, 2 * h, 2 * w);
                        for (dh, dw) in [(0, 1), (1, 0), (1, 1)] {
                            let i = s.index(n, c, 2 * h + dh, 2 * w + dw);
                            if x.data()[i] > x.data()[best] {
                                best = i;
                            }
                        }
                        data.push(x.data()[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        let out = Tensor::new(os, data)?;
        Ok(self.record(&[a], out, MaxPoolOp { argmax }))
    }

    /// Same-padded 3x3 convolution, stride 1. `weight` is `Cout x Cin x 3 x 3`,
    /// `bias` is `1 x Cout x 1 x 1`.
    pub fn conv3x3(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        self.check(input)?;
        self.check(weight)?;
        self.check(bias)?;
        let (x, wt, b) = (self.value(input), self.value(weight), self.value(bias));
        let os = conv3x3_shape(x.shape(), wt.shape())?;
        if b.shape() != Shape::new(1, os.c, 1, 1) {
            return dim_err(format!("conv bias must be 1x{}x1x1, got {}", os.c, b.shape()));
        }
        let s = x.shape();
        let (hh, ww) = (s.h, s.w);
        let plane = s.plane();
        let mut data = vec![T::zero(); os.numel()];
        for n in 0..s.n {
            for co in 0..os.c {
                let obase = (n * os.c + co) * plane;
                let oplane = &mut data[obase..obase + plane];
                oplane.iter_mut().for_each(|v| *v = b.data()[co]);
                for ci in 0..s.c {
                    let xbase = (n * s.c + ci) * plane;
                    let xplane = &x.data()[xbase..xbase + plane];
                    for kh in 0..3 {
                        let (h0, h1) = valid(kh, hh);
                        for kw in 0..3 {
                            let (w0, w1) = valid(kw, ww);
                            let k = wt.data()[((co * s.c + ci) * 3 + kh) * 3 + kw];
                            for h in h0..h1 {
                                let src = (h + kh - 1) * ww;
                                let orow = &mut oplane[h * ww + w0..h * ww + w1];
                                let xrow = &xplane[src + w0 + kw - 1..src + w1 + kw - 1];
                                for (o, &xv) in orow.iter_mut().zip(xrow) {
                                    *o = *o + k * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(os, data)?;
        Ok(self.record(&[input, weight, bias], out, Conv3x3Op))
    }

    /// Fully connected layer over the flattened `C*H*W` features of each sample.
    /// `weight` is `Out x In x 1 x 1`, `bias` is `1 x Out x 1 x 1`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        self.check(input)?;
        self.check(weight)?;
        self.check(bias)?;
        let (x, wt, b) = (self.value(input), self.value(weight), self.value(bias));
        let s = x.shape();
        let fan_in = s.c * s.plane();
        let ws = wt.shape();
        if ws.c != fan_in || ws.h != 1 || ws.w != 1 {
            return dim_err(format!("dense weight must be Outx{fan_in}x1x1, got {ws}"));
        }
        if b.shape() != Shape::new(1, ws.n, 1, 1) {
            return dim_err(format!("dense bias must be 1x{}x1x1, got {}", ws.n, b.shape()));
        }
        let mut data = Vec::with_capacity(s.n * ws.n);
        for n in 0..s.n {
            let xrow = &x.data()[n * fan_in..(n + 1) * fan_in];
            for o in 0..ws.n {
                let wrow = &wt.data()[o * fan_in..(o + 1) * fan_in];
                let dot = xrow.iter().zip(wrow).fold(T::zero(), |acc, (&a, &w)| acc + a * w);
                data.push(dot + b.data()[o]);
            }
        }
        let out = Tensor::new(Shape::new(s.n, ws.n, 1, 1), data)?;
        Ok(self.record(&[input, weight, bias], out, DenseOp))
    }

    /// Mean softmax cross-entropy of `N x K x 1 x 1` logits against labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let x = self.value(logits);
        let s = x.shape();
        if s.h != 1 || s.w != 1 || labels.len() != s.n {
            return dim_err(format!("cross entropy expects Nx K x1x1 logits with N labels, got {s} and {}", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= s.c) {
            return dim_err(format!("label {bad} outside {} classes", s.c));
        }
        let k = s.c;
        let mut probs = Vec::with_capacity(x.numel());
        let mut loss = T::zero();
        for (n, &y) in labels.iter().enumerate() {
            let row = &x.data()[n * k..(n + 1) * k];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
            let z = exps.iter().fold(T::zero(), |a, &v| a + v);
            loss = loss + z.ln() - (row[y] - max);
            probs.extend(exps.iter().map(|&e| e / z));
        }
        loss = loss / T::of(s.n as f64);
        let op = SoftmaxXentOp { probs, labels: labels.to_vec() };
        Ok(self.record(&[logits], Tensor::full(Shape::scalar(), loss), op))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    fn t(shape: Shape, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(Shape::new(1, 2, 1, 1), &[-1.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn identity_kernel_preserves_map() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(Shape::new(1, 1, 3, 4), &(0..12).map(|v| v as f64).collect::<Vec<_>>()));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = tape.leaf(t(Shape::new(1, 1, 3, 3), &k));
        let b = tape.leaf(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let y = tape.conv3x3(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());

        let one = tape.leaf(t(Shape::new(1, 1, 1, 1), &[5.0]));
        let y = tape.conv3x3(one, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
    }

    #[test]
    fn conv_zero_padding_sums_neighbourhood() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(Shape::new(1, 1, 3, 3), 1.0));
        let w = tape.leaf(Tensor::full(Shape::new(1, 1, 3, 3), 1.0));
        let b = tape.leaf(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        let y = tape.conv3x3(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn dense_zero_weights_returns_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(Shape::new(2, 3, 1, 1), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let w = tape.leaf(Tensor::zeros(Shape::new(2, 3, 1, 1)));
        let b = tape.leaf(t(Shape::new(1, 2, 1, 1), &[0.5, -1.5]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        let b = tape.leaf(Tensor::zeros(Shape::new(1, 2, 2, 2)));
        assert!(matches!(tape.add(a, b), Err(Error::Dimension(_))));
        let w = tape.leaf(Tensor::zeros(Shape::new(1, 3, 3, 3)));
        assert!(matches!(tape.conv3x3(a, w, a), Err(Error::Dimension(_))));
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut tape = Tape::new();
        let x = tape.param(t(Shape::new(1, 1, 2, 2), &[1.0, 4.0, 3.0, 2.0]));
        let y = tape.maxpool2x2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(t(Shape::new(2, 3, 2, 1), &[0.3; 12]));
        let l = tape.sum(x).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 12]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.param(t(Shape::new(1, 2, 1, 1), &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(t(Shape::new(1, 2, 1, 1), &[1.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Usage(_))));
        assert!(matches!(tape.backward(Var(99)), Err(Error::Usage(_))));
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(Shape::new(2, 4, 1, 1)));
        let l = tape.softmax_cross_entropy(x, &[0, 3]).unwrap();
        assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);
        tape.backward(l).unwrap();
        let g = tape.grad(x).unwrap();
        assert!((g[0] - (0.25 - 1.0) / 2.0).abs() < 1e-12);
        assert!((g[1] - 0.125).abs() < 1e-12);
    }

    #[test]
    fn constant_inputs_record_no_nodes() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        let y = tape.relu(x).unwrap();
        let _ = tape.sum(y).unwrap();
        assert_eq!(tape.node_count(), 0);
    }
}
