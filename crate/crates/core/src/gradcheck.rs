//! Central finite-difference checks of the recorded backward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Result};
use crate::norm::{
    bn_forward, gn_forward, in_forward, ln_forward, pbn_forward_planned, pbn_normalize_planned, pixel_bn_forward_planned,
    pixel_bn_normalize_planned, NormState, NormVars, PatchPlan, PixelPlan,
};
use crate::scheme::{SchemeConfig, SplitMode};
use crate::tensor::{Backward, Shape, Tape, Tensor, Var};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
pub const MAX_SHAPE: Shape = Shape::new(2, 4, 6, 6);

/// Rebuilds the graph from the current input values and returns the tape,
/// the scalar loss and the tape variable of every input.
pub type Build = dyn Fn(&[Tensor<f64>]) -> Result<(Tape<f64>, Var, Vec<Var>)> + Send + Sync;

pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Box<Build>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: String,
    /// Largest `|analytic - numeric| / max(1, |numeric|)`.
    pub max_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub results: Vec<CaseResult>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.max_error < self.tolerance)
    }

    pub fn worst(&self) -> Option<&CaseResult> {
        self.results.iter().max_by(|a, b| a.max_error.total_cmp(&b.max_error))
    }
}

fn loss_value(tape: &Tape<f64>, loss: Var) -> f64 {
    tape.value(loss).data()[0]
}

pub fn check_case(case: &GradCase, step: f64) -> Result<CaseResult> {
    let (mut tape, loss, vars) = (case.build)(&case.inputs)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]))
        .collect();
    let mut result = CaseResult { name: case.name.clone(), max_error: 0.0, worst_input: 0, worst_index: 0 };
    let mut inputs = case.inputs.clone();
    for (k, grads) in analytic.iter().enumerate() {
        for i in 0..grads.len() {
            let orig = inputs[k].data()[i];
            inputs[k].data_mut()[i] = orig + step;
            let (t, l, _) = (case.build)(&inputs)?;
            let plus = loss_value(&t, l);
            inputs[k].data_mut()[i] = orig - step;
            let (t, l, _) = (case.build)(&inputs)?;
            let minus = loss_value(&t, l);
            inputs[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = (grads[i] - numeric).abs() / numeric.abs().max(1.0);
            if err > result.max_error || err.is_nan() {
                result = CaseResult { name: case.name.clone(), max_error: err, worst_input: k, worst_index: i };
            }
        }
    }
    Ok(result)
}

pub fn run_suite(cases: &[GradCase]) -> Result<GradReport> {
    let results = cases.iter().map(|c| check_case(c, STEP)).collect::<Result<_>>()?;
    Ok(GradReport { results, tolerance: TOLERANCE })
}

/// Identity whose backward scales the gradient; used to make sure a broken
/// backward is caught.
struct Corrupt(f64);

impl Backward<f64> for Corrupt {
    fn name(&self) -> &'static str {
        "corrupt"
    }
    fn backward(&self, g: &[f64], _: &[&Tensor<f64>], _: &Tensor<f64>) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().map(|v| v * self.0).collect())]
    }
}

fn finish(tape: &mut Tape<f64>, out: Var, weights: &[f64], fault: bool) -> Result<Var> {
    let out = if fault {
        let v = tape.value(out).clone();
        tape.record(&[out], v, Corrupt(1.5))
    } else {
        out
    };
    tape.weighted_sum(out, weights)
}

fn random(shape: Shape, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
}

#[derive(Clone, Copy, Debug)]
enum Layer {
    Bn,
    In,
    Ln,
    Gn(usize),
}

fn random_state(c: usize, rng: &mut ChaCha8Rng) -> NormState<f64> {
    let mut st = NormState::new(c);
    st.running_mean = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
    st.running_std = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
    st
}

fn affine_inputs(x: Tensor<f64>, c: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    vec![x, random(Shape::new(1, c, 1, 1), rng, 0.5, 1.5), random(Shape::new(1, c, 1, 1), rng, -0.5, 0.5)]
}

/// Applies the affine inputs to a copy of `base` and returns the tape
/// variables `[x, gamma, beta]`.
fn with_affine(
    inputs: &[Tensor<f64>],
    base: &NormState<f64>,
    f: impl FnOnce(&mut Tape<f64>, Var, &mut NormState<f64>) -> Result<NormVars>,
    weights: &[f64],
    fault: bool,
) -> Result<(Tape<f64>, Var, Vec<Var>)> {
    let mut st = base.clone();
    st.gamma = inputs[1].data().to_vec();
    st.beta = inputs[2].data().to_vec();
    let mut tape = Tape::new();
    let x = tape.param(inputs[0].clone());
    let vars = f(&mut tape, x, &mut st)?;
    let loss = finish(&mut tape, vars.out, weights, fault)?;
    Ok((tape, loss, vec![x, vars.gamma, vars.beta]))
}

fn norm_case(name: String, shape: Shape, layer: Layer, rng: &mut ChaCha8Rng, fault: bool) -> GradCase {
    let x = random(shape, rng, -2.0, 2.0);
    let inputs = affine_inputs(x, shape.c, rng);
    let weights: Vec<f64> = (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let base = random_state(shape.c, rng);
    let build = move |inp: &[Tensor<f64>]| {
        with_affine(
            inp,
            &base,
            |t, x, st| match layer {
                Layer::Bn => bn_forward(t, x, st),
                Layer::In => in_forward(t, x, st),
                Layer::Ln => ln_forward(t, x, st),
                Layer::Gn(g) => gn_forward(t, x, st, g),
            },
            &weights,
            fault,
        )
    };
    GradCase { name, inputs, build: Box::new(build) }
}

/// The state after one training forward on `x`. Accumulated statistics are
/// stop-gradient constants, so the finite-difference side holds them at
/// these values.
fn updated_state(
    x: &Tensor<f64>,
    mut state: NormState<f64>,
    forward: impl FnOnce(&mut Tape<f64>, Var, &mut NormState<f64>) -> Result<NormVars>,
) -> Result<NormState<f64>> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    forward(&mut tape, xv, &mut state)?;
    Ok(state)
}

fn pbn_case(shape: Shape, patches: usize, lambda: f64, rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let cfg = SchemeConfig::fixed(patches, SplitMode::Random).with_lambda(lambda);
    let plan = PatchPlan::draw(shape, &cfg, rng)?;
    let x = random(shape, rng, -2.0, 2.0);
    let inputs = affine_inputs(x, shape.c, rng);
    let weights: Vec<f64> = (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let base = updated_state(&inputs[0], random_state(shape.c, rng), |t, x, st| {
        pbn_forward_planned(t, x, st, &cfg, &plan)
    })?;
    let build = move |inp: &[Tensor<f64>]| {
        with_affine(inp, &base, |t, x, st| pbn_normalize_planned(t, x, st, &cfg, &plan), &weights, false)
    };
    Ok(GradCase { name: format!("pbn[P={patches},lambda={lambda}]"), inputs, build: Box::new(build) })
}

fn pixel_case(shape: Shape, rng: &mut ChaCha8Rng) -> Result<GradCase> {
    let cfg = SchemeConfig { candidate_set: vec![1, 2, 4], subset_size: 3, ..SchemeConfig::default() };
    let plan = PixelPlan::draw(shape, &cfg, rng)?;
    let x = random(shape, rng, -2.0, 2.0);
    let inputs = affine_inputs(x, shape.c, rng);
    let weights: Vec<f64> = (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let base = updated_state(&inputs[0], random_state(shape.c, rng), |t, x, st| {
        pixel_bn_forward_planned(t, x, st, &cfg, &plan)
    })?;
    let build = move |inp: &[Tensor<f64>]| {
        with_affine(inp, &base, |t, x, st| pixel_bn_normalize_planned(t, x, st, &cfg, &plan), &weights, false)
    };
    Ok(GradCase { name: "pixel_bn[lambda=0.5]".into(), inputs, build: Box::new(build) })
}

/// conv3x3 -> bn -> relu -> maxpool -> dense -> softmax cross-entropy.
fn cnn_case(shape: Shape, rng: &mut ChaCha8Rng) -> GradCase {
    let hidden = 3;
    let classes = 3;
    let pooled = if shape.h >= 2 && shape.w >= 2 { (shape.h / 2) * (shape.w / 2) } else { shape.plane() };
    let inputs = vec![
        random(shape, rng, -1.0, 1.0),
        random(Shape::new(hidden, shape.c, 3, 3), rng, -0.5, 0.5),
        random(Shape::new(1, hidden, 1, 1), rng, -0.1, 0.1),
        random(Shape::new(classes, hidden * pooled, 1, 1), rng, -0.5, 0.5),
        random(Shape::new(1, classes, 1, 1), rng, -0.1, 0.1),
    ];
    let labels: Vec<usize> = (0..shape.n).map(|_| rng.random_range(0..classes)).collect();
    let build = move |inp: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inp.iter().map(|t| tape.param(t.clone())).collect();
        let h = tape.conv3x3(vars[0], vars[1], vars[2])?;
        let mut st = NormState::new(hidden);
        let h = bn_forward(&mut tape, h, &mut st)?.out;
        let h = tape.relu(h)?;
        let h = if shape.h >= 2 && shape.w >= 2 { tape.maxpool2x2(h)? } else { h };
        let logits = tape.dense(h, vars[3], vars[4])?;
        let loss = tape.softmax_cross_entropy(logits, &labels)?;
        Ok((tape, loss, vars))
    };
    GradCase { name: "cnn_stub".into(), inputs, build: Box::new(build) }
}

/// Every layer the crate differentiates, on inputs of `shape`. With `fault`
/// the BN case gets a corrupted backward.
pub fn standard_suite(shape: Shape, seed: u64, fault: bool) -> Result<Vec<GradCase>> {
    if shape.numel() == 0 {
        return dim_err("gradcheck shape must be nonempty");
    }
    if shape.n > MAX_SHAPE.n || shape.c > MAX_SHAPE.c || shape.h > MAX_SHAPE.h || shape.w > MAX_SHAPE.w {
        return dim_err(format!("gradcheck shape {shape} exceeds {MAX_SHAPE}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = vec![norm_case("bn".into(), shape, Layer::Bn, &mut rng, fault)];
    for lambda in [0.0, 0.5, 1.0] {
        for patches in [1, 2, 4, 9] {
            cases.push(pbn_case(shape, patches, lambda, &mut rng)?);
        }
    }
    cases.push(pixel_case(shape, &mut rng)?);
    cases.push(norm_case("in".into(), shape, Layer::In, &mut rng, false));
    cases.push(norm_case("ln".into(), shape, Layer::Ln, &mut rng, false));
    let groups = if shape.c % 2 == 0 { 2 } else { 1 };
    cases.push(norm_case(format!("gn[groups={groups}]"), shape, Layer::Gn(groups), &mut rng, false));
    cases.push(cnn_case(shape, &mut rng));
    Ok(cases)
}
