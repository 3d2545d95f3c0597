//! The tiny CNN: three `conv3x3 -> norm -> relu -> maxpool` blocks and a
//! dense classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::harness::data::{CHANNELS, CLASSES, SIDE};
use crate::norm::{Mode, NormKind, NormLayer, NormState};
use crate::record::{self, Record};
use crate::scheme::SchemeConfig;
use crate::tensor::{ConvWeights, Scalar, Shape, Tape, Tensor, Var};

pub const BLOCKS: usize = 3;

/// Architecture and normalization choice of a [`TinyCnn`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub width: usize,
    pub norm: NormKind,
    /// Blocks (from the input side) that use `norm`; later blocks use BN.
    pub norm_sites: usize,
    pub gn_groups: usize,
    pub scheme: SchemeConfig,
}

impl ModelSpec {
    pub fn new(norm: NormKind, width: usize, scheme: SchemeConfig) -> Self {
        ModelSpec { width, norm, norm_sites: BLOCKS, gn_groups: 4, scheme }
    }

    pub fn block_widths(&self) -> [usize; BLOCKS] {
        [self.width, 2 * self.width, 4 * self.width]
    }

    pub fn site_kind(&self, block: usize) -> NormKind {
        if block < self.norm_sites {
            self.norm
        } else {
            NormKind::Bn
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return config_err("width: must be at least 1");
        }
        if self.norm_sites > BLOCKS {
            return config_err(format!("norm_sites: must be at most {BLOCKS}, got {}", self.norm_sites));
        }
        if (0..BLOCKS).any(|b| self.site_kind(b) == NormKind::Gn)
            && (self.gn_groups == 0 || self.width % self.gn_groups != 0)
        {
            return config_err(format!("gn_groups: {} must divide the width {}", self.gn_groups, self.width));
        }
        self.scheme.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyCnn<T> {
    pub spec: ModelSpec,
    pub convs: Vec<Affine<T>>,
    pub norms: Vec<NormLayer<T>>,
    pub head: Affine<T>,
}

/// Tape handles of one forward pass, parameters in [`TinyCnn::params_mut`]
/// order.
pub struct Forward {
    pub logits: Var,
    pub params: Vec<Var>,
}

fn he_normal<T: Scalar, R: Rng + ?Sized>(shape: Shape, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let data = (0..shape.numel()).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

impl<T: Scalar> TinyCnn<T> {
    pub fn new<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut convs = Vec::with_capacity(BLOCKS);
        let mut norms = Vec::with_capacity(BLOCKS);
        let mut cin = CHANNELS;
        for (b, &cout) in spec.block_widths().iter().enumerate() {
            let cw = ConvWeights { in_channels: cin, out_channels: cout };
            convs.push(Affine { weight: he_normal(cw.weight_shape(), 9 * cin, rng), bias: Tensor::zeros(cw.bias_shape()) });
            norms.push(NormLayer::new(spec.site_kind(b), cout, spec.scheme.clone(), spec.gn_groups));
            cin = cout;
        }
        let features = Self::features(&spec);
        let head = Affine {
            weight: he_normal(Shape::new(CLASSES, features, 1, 1), features, rng),
            bias: Tensor::zeros(Shape::new(1, CLASSES, 1, 1)),
        };
        Ok(TinyCnn { spec, convs, norms, head })
    }

    fn features(spec: &ModelSpec) -> usize {
        let side = SIDE >> BLOCKS;
        spec.block_widths()[BLOCKS - 1] * side * side
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.norms.iter_mut().for_each(|n| n.state.mode = mode);
    }

    /// Replaces the label of every norm site without touching its state.
    pub fn relabel(&mut self, norm: NormKind) {
        self.spec.norm = norm;
        for (b, layer) in self.norms.iter_mut().enumerate() {
            layer.kind = self.spec.site_kind(b);
        }
    }

    /// Records the forward pass of `images` on `tape`. With `train` the
    /// weights become differentiable parameters.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape<T>,
        images: Tensor<T>,
        train: bool,
        rng: &mut R,
    ) -> Result<Forward> {
        let push = |tape: &mut Tape<T>, t: &Tensor<T>| if train { tape.param(t.clone()) } else { tape.leaf(t.clone()) };
        let mut params = Vec::new();
        let mut h = tape.leaf(images);
        for (conv, norm) in self.convs.iter().zip(self.norms.iter_mut()) {
            let w = push(tape, &conv.weight);
            let b = push(tape, &conv.bias);
            h = tape.conv3x3(h, w, b)?;
            let nv = norm.forward(tape, h, rng)?;
            h = tape.relu(nv.out)?;
            h = tape.maxpool2x2(h)?;
            params.extend([w, b, nv.gamma, nv.beta]);
        }
        let w = push(tape, &self.head.weight);
        let b = push(tape, &self.head.bias);
        let logits = tape.dense(h, w, b)?;
        params.extend([w, b]);
        Ok(Forward { logits, params })
    }

    /// Eval-mode class scores, `N x 8 x 1 x 1`.
    pub fn predict(&mut self, images: Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = self.forward(&mut tape, images, false, &mut rng)?;
        Ok(tape.take(f.logits))
    }

    /// Every learnable buffer, in the order of [`Forward::params`].
    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for (conv, norm) in self.convs.iter_mut().zip(self.norms.iter_mut()) {
            out.push(conv.weight.data_mut());
            out.push(conv.bias.data_mut());
            out.push(&mut norm.state.gamma);
            out.push(&mut norm.state.beta);
        }
        out.push(self.head.weight.data_mut());
        out.push(self.head.bias.data_mut());
        out
    }

    pub fn to_record(&self) -> Record {
        let v = |t: &Tensor<T>| t.data().iter().map(|x| x.f64()).collect::<Vec<_>>();
        let mut rec = Record::new();
        for (b, (conv, norm)) in self.convs.iter().zip(&self.norms).enumerate() {
            rec.insert(format!("conv{b}.weight"), v(&conv.weight));
            rec.insert(format!("conv{b}.bias"), v(&conv.bias));
            norm.state.to_record(&format!("norm{b}"), &mut rec);
        }
        rec.insert("head.weight".into(), v(&self.head.weight));
        rec.insert("head.bias".into(), v(&self.head.bias));
        rec
    }

    /// Rebuilds a model of `spec` from checkpoint entries. Missing or
    /// misshapen entries are [`Error::Mismatch`].
    pub fn from_record(spec: ModelSpec, rec: &Record) -> Result<Self> {
        spec.validate().map_err(|e| Error::Mismatch(format!("checkpoint spec: {e}")))?;
        let tensor = |key: &str, shape: Shape| -> Result<Tensor<T>> {
            let vals = record::get(rec, key, Some(shape.numel()))?;
            Tensor::new(shape, vals.iter().map(|&x| T::of(x)).collect())
        };
        let mut convs = Vec::with_capacity(BLOCKS);
        let mut norms = Vec::with_capacity(BLOCKS);
        let mut cin = CHANNELS;
        for (b, &cout) in spec.block_widths().iter().enumerate() {
            let cw = ConvWeights { in_channels: cin, out_channels: cout };
            convs.push(Affine {
                weight: tensor(&format!("conv{b}.weight"), cw.weight_shape())?,
                bias: tensor(&format!("conv{b}.bias"), cw.bias_shape())?,
            });
            let mut layer = NormLayer::new(spec.site_kind(b), cout, spec.scheme.clone(), spec.gn_groups);
            layer.state = NormState::from_record(&format!("norm{b}"), rec, cout)?;
            norms.push(layer);
            cin = cout;
        }
        let features = Self::features(&spec);
        let head = Affine {
            weight: tensor("head.weight", Shape::new(CLASSES, features, 1, 1))?,
            bias: tensor("head.bias", Shape::new(1, CLASSES, 1, 1))?,
        };
        let expected = 6 * BLOCKS + 2 + 3 * BLOCKS;
        if rec.len() != expected {
            return Err(Error::Mismatch(format!("checkpoint has {} entries, model expects {expected}", rec.len())));
        }
        Ok(TinyCnn { spec, convs, norms, head })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(norm: NormKind) -> TinyCnn<f64> {
        TinyCnn::new(ModelSpec::new(norm, 4, SchemeConfig::default()), &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn forward_shapes_and_param_order() {
        let mut m = model(NormKind::Pbn);
        let mut tape = Tape::new();
        let x = Tensor::full(Shape::new(2, 3, 16, 16), 0.5);
        let f = m.forward(&mut tape, x, true, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(tape.value(f.logits).shape(), Shape::new(2, 8, 1, 1));
        let lens: Vec<usize> = f.params.iter().map(|&p| tape.value(p).numel()).collect();
        let expect: Vec<usize> = m.params_mut().iter().map(|p| p.len()).collect();
        assert_eq!(lens, expect);
    }

    #[test]
    fn record_round_trip() {
        let m = model(NormKind::Gn);
        let back = TinyCnn::<f64>::from_record(m.spec.clone(), &m.to_record()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn record_mismatch() {
        let m = model(NormKind::Bn);
        let mut wide = m.spec.clone();
        wide.width = 8;
        assert!(matches!(TinyCnn::<f64>::from_record(wide, &m.to_record()), Err(Error::Mismatch(_))));
        let mut rec = m.to_record();
        rec.insert("extra".into(), vec![1.0]);
        assert!(matches!(TinyCnn::<f64>::from_record(m.spec.clone(), &rec), Err(Error::Mismatch(_))));
    }

    #[test]
    fn spec_validation() {
        let mut s = ModelSpec::new(NormKind::Gn, 6, SchemeConfig::default());
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        s.gn_groups = 3;
        s.validate().unwrap();
        s.norm_sites = 4;
        assert!(s.validate().is_err());
    }

    #[test]
    fn partial_sites_fall_back_to_bn() {
        let mut s = ModelSpec::new(NormKind::Pbn, 4, SchemeConfig::default());
        s.norm_sites = 1;
        let m = TinyCnn::<f64>::new(s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let kinds: Vec<NormKind> = m.norms.iter().map(|n| n.kind).collect();
        assert_eq!(kinds, vec![NormKind::Pbn, NormKind::Bn, NormKind::Bn]);
    }
}
