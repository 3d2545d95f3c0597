//! Normalization layers.
//!
//! Every layer here is an instance of one kernel: each element of the input
//! belongs to a statistics *cell* (a channel for BN, a sample-channel pair for
//! IN, a channel-patch pair for PBN, ...). A cell's raw mean and standard
//! deviation are blended with a fixed anchor,
//!
//! ```text
//! mean' = lambda * mean + (1 - lambda) * anchor_mean
//! std'  = lambda * std  + (1 - lambda) * anchor_std
//! ```
//!
//! and the element is mapped to `gamma[c] * (x - mean') / std' + beta[c]`.
//! BN, IN, LN and GN use `lambda = 1`; evaluation with accumulated statistics
//! uses `lambda = 0`; the patch-aware layer blends each patch against the
//! accumulated statistics of its channel. Anchors are constants for the
//! backward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};
use crate::record::{self, Record};
use crate::scheme::{
    assign_channels, draw_subset, generate_grid, generate_pixel_groups, ChannelGrouping, PatchGrid, PixelGrouping,
    SchemeConfig,
};
use crate::tensor::{channel_mean, channel_std, Backward, Scalar, Shape, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Bn,
    #[default]
    Pbn,
    PixelBn,
    In,
    Ln,
    Gn,
}

impl NormKind {
    pub const ALL: [NormKind; 6] = [NormKind::Bn, NormKind::Pbn, NormKind::PixelBn, NormKind::In, NormKind::Ln, NormKind::Gn];

    pub fn label(self) -> &'static str {
        match self {
            NormKind::Bn => "bn",
            NormKind::Pbn => "pbn",
            NormKind::PixelBn => "pixel_bn",
            NormKind::In => "in",
            NormKind::Ln => "ln",
            NormKind::Gn => "gn",
        }
    }

    /// Kinds that normalize with batch statistics and keep accumulated ones.
    pub fn uses_batch_statistics(self) -> bool {
        matches!(self, NormKind::Bn | NormKind::Pbn | NormKind::PixelBn)
    }
}

impl std::str::FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NormKind::ALL
            .into_iter()
            .find(|k| k.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown norm kind `{s}` (expected bn, pbn, pixel_bn, in, ln, gn)")))
    }
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Affine parameters and accumulated statistics of one normalization site.
#[derive(Clone, Debug, PartialEq)]
pub struct NormState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_std: Vec<T>,
    pub momentum: T,
    pub eps: T,
    pub mode: Mode,
}

impl<T: Scalar> NormState<T> {
    /// `gamma = 1`, `beta = 0`, `running_mean = 0`, `running_std = 1`.
    pub fn new(channels: usize) -> Self {
        NormState {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_std: vec![T::one(); channels],
            momentum: T::of(0.1),
            eps: T::of(1e-5),
            mode: Mode::Train,
        }
    }

    pub fn with_hyper(mut self, momentum: f64, eps: f64) -> Self {
        self.momentum = T::of(momentum);
        self.eps = T::of(eps);
        self
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn train(&mut self) {
        self.mode = Mode::Train;
    }

    pub fn eval(&mut self) {
        self.mode = Mode::Eval;
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_std.len() != c {
            return dim_err("norm state vectors have unequal lengths");
        }
        if !(self.eps > T::zero()) {
            return config_err(format!("eps must be positive, got {}", self.eps));
        }
        if self.running_std.iter().any(|&s| !(s > T::zero())) {
            return config_err("running std must be strictly positive");
        }
        Ok(())
    }

    fn check_input(&self, shape: Shape) -> Result<()> {
        if shape.c != self.channels() {
            return dim_err(format!("norm state has {} channels, input {shape}", self.channels()));
        }
        if shape.numel() == 0 {
            return dim_err(format!("cannot normalize empty tensor {shape}"));
        }
        Ok(())
    }

    /// Moves the accumulated statistics toward the global batch statistics:
    /// `hat = (1 - m) * hat + m * batch`.
    pub fn update_running(&mut self, mean: &[T], std: &[T]) {
        let m = self.momentum;
        let keep = T::one() - m;
        for (r, &b) in self.running_mean.iter_mut().zip(mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_std.iter_mut().zip(std) {
            *r = keep * *r + m * b;
        }
    }

    /// Flat checkpoint entries under `prefix.` with field names `gamma`,
    /// `beta`, `running_mean`, `running_std`, `momentum`, `eps` and `mode`
    /// (0 = train, 1 = eval).
    pub fn to_record(&self, prefix: &str, record: &mut Record) {
        let v = |xs: &[T]| xs.iter().map(|x| x.f64()).collect::<Vec<_>>();
        record.insert(format!("{prefix}.gamma"), v(&self.gamma));
        record.insert(format!("{prefix}.beta"), v(&self.beta));
        record.insert(format!("{prefix}.running_mean"), v(&self.running_mean));
        record.insert(format!("{prefix}.running_std"), v(&self.running_std));
        record.insert(format!("{prefix}.momentum"), vec![self.momentum.f64()]);
        record.insert(format!("{prefix}.eps"), vec![self.eps.f64()]);
        let mode = match self.mode {
            Mode::Train => 0.0,
            Mode::Eval => 1.0,
        };
        record.insert(format!("{prefix}.mode"), vec![mode]);
    }

    pub fn from_record(prefix: &str, record: &Record, channels: usize) -> Result<Self> {
        let vec = |field: &str| -> Result<Vec<T>> {
            Ok(record::get(record, &format!("{prefix}.{field}"), Some(channels))?.iter().map(|&x| T::of(x)).collect())
        };
        let one = |field: &str| -> Result<f64> { Ok(record::get(record, &format!("{prefix}.{field}"), Some(1))?[0]) };
        let mode = match one("mode")? {
            m if m == 0.0 => Mode::Train,
            m if m == 1.0 => Mode::Eval,
            m => return Err(Error::Mismatch(format!("entry `{prefix}.mode` has invalid value {m}"))),
        };
        let state = NormState {
            gamma: vec("gamma")?,
            beta: vec("beta")?,
            running_mean: vec("running_mean")?,
            running_std: vec("running_std")?,
            momentum: T::of(one("momentum")?),
            eps: T::of(one("eps")?),
            mode,
        };
        state.validate().map_err(|e| Error::Mismatch(format!("{prefix}: {e}")))?;
        Ok(state)
    }
}

/// Tape handles produced by a normalization layer.
#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub out: Var,
    pub gamma: Var,
    pub beta: Var,
}

/// Per-cell anchor statistics and blend weight.
#[derive(Clone, Copy, Debug)]
struct Anchor<T> {
    lambda: T,
    mean: T,
    std: T,
}

/// Cell membership of every element plus the cell anchors.
struct CellLayout<T> {
    cell_of: Vec<u32>,
    anchors: Vec<Anchor<T>>,
}

struct CellNormOp<T> {
    cell_of: Vec<u32>,
    anchors: Vec<Anchor<T>>,
    counts: Vec<T>,
    raw_mean: Vec<T>,
    raw_std: Vec<T>,
    mean: Vec<T>,
    std: Vec<T>,
    gamma: Vec<T>,
    shape: Shape,
}

impl<T: Scalar> Backward<T> for CellNormOp<T> {
    fn name(&self) -> &'static str {
        "cell_norm"
    }

    fn backward(&self, g: &[T], inputs: &[&Tensor<T>], _: &Tensor<T>) -> Vec<Option<Vec<T>>> {
        let x = inputs[0].data();
        let s = self.shape;
        let plane = s.plane();
        let cells = self.anchors.len();
        let channel_of = |i: usize| (i / plane) % s.c;

        let mut gamma_grad = vec![T::zero(); s.c];
        let mut beta_grad = vec![T::zero(); s.c];
        let mut sum_u = vec![T::zero(); cells];
        let mut sum_ux = vec![T::zero(); cells];
        for i in 0..x.len() {
            let c = channel_of(i);
            let k = self.cell_of[i] as usize;
            let centered = x[i] - self.mean[k];
            gamma_grad[c] = gamma_grad[c] + g[i] * centered / self.std[k];
            beta_grad[c] = beta_grad[c] + g[i];
            let u = g[i] * self.gamma[c];
            sum_u[k] = sum_u[k] + u;
            sum_ux[k] = sum_ux[k] + u * centered;
        }
        let mut gx = vec![T::zero(); x.len()];
        for i in 0..x.len() {
            let c = channel_of(i);
            let k = self.cell_of[i] as usize;
            let lambda = self.anchors[k].lambda;
            let sb = self.std[k];
            let u = g[i] * self.gamma[c];
            let mut d = u / sb;
            if lambda != T::zero() {
                let n = self.counts[k];
                d = d
                    - lambda * sum_u[k] / (n * sb)
                    - lambda * (x[i] - self.raw_mean[k]) * sum_ux[k] / (n * self.raw_std[k] * sb * sb);
            }
            gx[i] = d;
        }
        vec![Some(gx), Some(gamma_grad), Some(beta_grad)]
    }
}

fn affine_shape(c: usize) -> Shape {
    Shape::new(1, c, 1, 1)
}

/// Runs the cell kernel on `x` and records it with the affine parameters of
/// `state` as differentiable leaves.
fn cell_norm<T: Scalar>(tape: &mut Tape<T>, x: Var, state: &NormState<T>, layout: CellLayout<T>) -> Result<NormVars> {
    let s = tape.value(x).shape();
    let c = s.c;
    let gamma = tape.param(Tensor::new(affine_shape(c), state.gamma.clone())?);
    let beta = tape.param(Tensor::new(affine_shape(c), state.beta.clone())?);
    let xd = tape.value(x).data();
    let cells = layout.anchors.len();
    let eps = state.eps;

    let mut counts = vec![T::zero(); cells];
    let mut sums = vec![T::zero(); cells];
    for (&v, &k) in xd.iter().zip(&layout.cell_of) {
        counts[k as usize] = counts[k as usize] + T::one();
        sums[k as usize] = sums[k as usize] + v;
    }
    let raw_mean: Vec<T> = sums.iter().zip(&counts).map(|(&s, &n)| s / n).collect();
    let mut sq = vec![T::zero(); cells];
    for (&v, &k) in xd.iter().zip(&layout.cell_of) {
        let d = v - raw_mean[k as usize];
        sq[k as usize] = sq[k as usize] + d * d;
    }
    let raw_std: Vec<T> = sq.iter().zip(&counts).map(|(&q, &n)| (q / n + eps).sqrt()).collect();

    let blend = |lambda: T, raw: T, anchor: T| {
        if lambda == T::one() {
            raw
        } else if lambda == T::zero() {
            anchor
        } else {
            lambda * raw + (T::one() - lambda) * anchor
        }
    };
    let mean: Vec<T> = (0..cells).map(|k| blend(layout.anchors[k].lambda, raw_mean[k], layout.anchors[k].mean)).collect();
    let std: Vec<T> = (0..cells).map(|k| blend(layout.anchors[k].lambda, raw_std[k], layout.anchors[k].std)).collect();

    let plane = s.plane();
    let out: Vec<T> = xd
        .iter()
        .zip(&layout.cell_of)
        .enumerate()
        .map(|(i, (&v, &k))| {
            let ch = (i / plane) % c;
            let k = k as usize;
            state.gamma[ch] * ((v - mean[k]) / std[k]) + state.beta[ch]
        })
        .collect();
    let out = Tensor::new(s, out)?;
    let op = CellNormOp {
        cell_of: layout.cell_of,
        anchors: layout.anchors,
        counts,
        raw_mean,
        raw_std,
        mean,
        std,
        gamma: state.gamma.clone(),
        shape: s,
    };
    let out = tape.record(&[x, gamma, beta], out, op);
    Ok(NormVars { out, gamma, beta })
}

fn pure<T: Scalar>() -> Anchor<T> {
    Anchor { lambda: T::one(), mean: T::zero(), std: T::one() }
}

/// Cells indexed by `cell(n, c)`, constant over the plane.
fn layout_by<T: Scalar>(s: Shape, cells: usize, anchors: Option<Vec<Anchor<T>>>, cell: impl Fn(usize, usize) -> usize) -> CellLayout<T> {
    let mut cell_of = Vec::with_capacity(s.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let k = cell(n, c) as u32;
            cell_of.extend(std::iter::repeat_n(k, s.plane()));
        }
    }
    CellLayout { cell_of, anchors: anchors.unwrap_or_else(|| vec![pure(); cells]) }
}

/// Global statistics, then the accumulated-statistics update.
fn update_from_batch<T: Scalar>(tape: &Tape<T>, x: Var, state: &mut NormState<T>) -> Result<()> {
    let f = tape.value(x);
    let mean = channel_mean(f)?;
    let std = channel_std(f, &mean, state.eps)?;
    state.update_running(&mean, &std);
    Ok(())
}

/// Normalization with the accumulated statistics only.
fn eval_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, state: &NormState<T>) -> Result<NormVars> {
    let s = tape.value(x).shape();
    let anchors = (0..s.c)
        .map(|c| Anchor { lambda: T::zero(), mean: state.running_mean[c], std: state.running_std[c] })
        .collect();
    let layout = layout_by(s, s.c, Some(anchors), |_, c| c);
    cell_norm(tape, x, state, layout)
}

/// Batch normalization. In train mode the batch statistics normalize the
/// input and update the accumulated statistics; in eval mode the accumulated
/// statistics are used.
pub fn bn_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, state: &mut NormState<T>) -> Result<NormVars> {
    tape.check(x)?;
    state.validate()?;
    let s = tape.value(x).shape();
    state.check_input(s)?;
    match state.mode {
        Mode::Eval => eval_forward(tape, x, state),
        Mode::Train => {
            update_from_batch(tape, x, state)?;
            cell_norm(tape, x, state, layout_by(s, s.c, None, |_, c| c))
        }
    }
}

/// Instance normalization: statistics per sample and channel.
pub fn in_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, state: &NormState<T>) -> Result<NormVars> {
    tape.check(x)?;
    let s = tape.value(x).shape();
    state.check_input(s)?;
    cell_norm(tape, x, state, layout_by(s, s.n * s.c, None, |n, c| n * s.c + c))
}

/// Layer normalization: statistics per sample over all channels and pixels,
/// with a per-channel affine.
pub fn ln_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, state: &NormState<T>) -> Result<NormVars> {
    tape.check(x)?;
    let s = tape.value(x).shape();
    state.check_input(s)?;
    cell_norm(tape, x, state, layout_by(s, s.n, None, |n, _| n))
}

/// Group normalization over `groups` contiguous channel groups per sample.
pub fn gn_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, state: &NormState<T>, groups: usize) -> Result<NormVars> {
    tape.check(x)?;
    let s = tape.value(x).shape();
    state.check_input(s)?;
    if groups == 0 || s.c % groups != 0 {
        return config_err(format!("group count {groups} does not divide {} channels", s.c));
    }
    let per = s.c / groups;
    cell_norm(tape, x, state, layout_by(s, s.n * groups, None, |n, c| n * groups + c / per))
}

/// One draw of the patch layout: per-channel patch counts grouped by value,
/// and one grid per group.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPlan {
    pub grouping: ChannelGrouping,
    pub grids: Vec<PatchGrid>,
}

impl PatchPlan {
    /// Draws the patch-count subset, the per-channel counts and one grid per
    /// channel group.
    pub fn draw<R: Rng + ?Sized>(shape: Shape, cfg: &SchemeConfig, rng: &mut R) -> Result<Self> {
        let subset = draw_subset(cfg, rng)?;
        let grouping = assign_channels(shape.c, &subset, rng)?;
        let grids = grouping
            .groups
            .iter()
            .map(|g| generate_grid(shape.h, shape.w, g.patches, cfg.split_mode, cfg.orientation, rng))
            .collect::<Result<_>>()?;
        Ok(PatchPlan { grouping, grids })
    }

    /// The same grid for every channel.
    pub fn uniform(channels: usize, grid: PatchGrid) -> Self {
        let draws = vec![grid.requested; channels];
        PatchPlan { grouping: ChannelGrouping::from_draws(&draws), grids: vec![grid] }
    }

    fn group_maps(&self, shape: Shape) -> Result<Vec<(Vec<usize>, usize)>> {
        if self.grids.len() != self.grouping.groups.len() {
            return dim_err("patch plan needs one grid per channel group");
        }
        self.grids
            .iter()
            .map(|g| {
                if g.height != shape.h || g.width != shape.w || !g.is_exact_partition() {
                    return dim_err(format!("grid {}x{} does not partition input {shape}", g.height, g.width));
                }
                Ok((g.pixel_map(), g.patch_count()))
            })
            .collect()
    }
}

/// Cells for a per-group pixel-to-part map: one cell per (channel, part).
fn grouped_layout<T: Scalar>(
    s: Shape,
    grouping: &ChannelGrouping,
    maps: &[(Vec<usize>, usize)],
    state: &NormState<T>,
    lambda: T,
) -> Result<CellLayout<T>> {
    let mut owner = vec![usize::MAX; s.c];
    for (gi, g) in grouping.groups.iter().enumerate() {
        for &c in &g.channels {
            if c >= s.c || owner[c] != usize::MAX {
                return dim_err(format!("channel {c} is out of range or grouped twice"));
            }
            owner[c] = gi;
        }
    }
    if owner.iter().any(|&o| o == usize::MAX) {
        return dim_err("channel grouping does not cover every channel");
    }
    let mut base = vec![0usize; s.c];
    let mut anchors = Vec::new();
    for c in 0..s.c {
        base[c] = anchors.len();
        let parts = maps[owner[c]].1;
        let a = Anchor { lambda, mean: state.running_mean[c], std: state.running_std[c] };
        anchors.extend(std::iter::repeat_n(a, parts));
    }
    let mut cell_of = Vec::with_capacity(s.numel());
    for _ in 0..s.n {
        for c in 0..s.c {
            let map = &maps[owner[c]].0;
            cell_of.extend(map.iter().map(|&p| (base[c] + p) as u32));
        }
    }
    Ok(CellLayout { cell_of, anchors })
}

fn check_blend(cfg: &SchemeConfig) -> Result<()> {
    cfg.validate()
}

/// Patch-aware batch normalization with an explicit patch plan.
///
/// Train mode: global statistics update the accumulated statistics first;
/// each (channel, patch) cell is then normalized with its own statistics
/// blended against the just-updated accumulated ones. Eval mode is plain BN
/// evaluation.
pub fn pbn_forward_planned<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    state: &mut NormState<T>,
    cfg: &SchemeConfig,
    plan: &PatchPlan,
) -> Result<NormVars> {
    tape.check(x)?;
    check_blend(cfg)?;
    state.validate()?;
    let s = tape.value(x).shape();
    state.check_input(s)?;
    if state.mode == Mode::Eval {
        return eval_forward(tape, x, state);
    }
    update_from_batch(tape, x, state)?;
    pbn_normalize_planned(tape, x, state, cfg, plan)
}

/// The normalization steps of the patch-aware layer alone: every
/// (channel, patch) cell is blended against the current accumulated
/// statistics of `state`, which are left untouched. This is the function
/// whose gradient the recorded backward computes.
pub fn pbn_normalize_planned<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    state: &NormState<T>,
    cfg: &SchemeConfig,
    plan: &PatchPlan,
) -> Result<NormVars> {
    tape.check(x)?;
    check_blend(cfg)?;
    state.validate()?;
    let s = tape.value(x).shape();
    state.check_input(s)?;
    let maps = plan.group_maps(s)?;
    let layout = grouped_layout(s, &plan.grouping, &maps, state, T::of(cfg.lambda))?;
    cell_norm(tape, x, state, layout)
}

/// Patch-aware batch normalization, drawing a fresh patch plan from `rng`.
pub fn pbn_forward<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    x: Var,
    state: &mut NormState<T>,
    cfg: &SchemeConfig,
    rng: &mut R,
) -> Result<NormVars> {
    tape.check(x)?;
    check_blend(cfg)?;
    state.validate()?;
    let s = tape.value(x).shape();
    state.check_input(s)?;
    if state.mode == Mode::Eval {
        return eval_forward(tape, x, state);
    }
    update_from_batch(tape, x, state)?;
    let plan = PatchPlan::draw(s, cfg, rng)?;
    let maps = plan.group_maps(s)?;
    let layout = grouped_layout(s, &plan.grouping, &maps, state, T::of(cfg.lambda))?;
    cell_norm(tape, x, state, layout)
}

/// One draw of the pixel-group ablation: channel grouping as for PBN, then a
/// spatially unstructured pixel grouping per channel group.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelPlan {
    pub grouping: ChannelGrouping,
    pub pixels: Vec<PixelGrouping>,
}

impl PixelPlan {
    pub fn draw<R: Rng + ?Sized>(shape: Shape, cfg: &SchemeConfig, rng: &mut R) -> Result<Self> {
        let subset = draw_subset(cfg, rng)?;
        let grouping = assign_channels(shape.c, &subset, rng)?;
        let pixels = grouping
            .groups
            .iter()
            .map(|g| generate_pixel_groups(shape.h, shape.w, g.patches, rng))
            .collect::<Result<_>>()?;
        Ok(PixelPlan { grouping, pixels })
    }

    fn group_maps(&self, shape: Shape) -> Result<Vec<(Vec<usize>, usize)>> {
        if self.pixels.len() != self.grouping.groups.len() {
            return dim_err("pixel plan needs one pixel grouping per channel group");
        }
        self.pixels
            .iter()
            .map(|p| {
                if p.assignment.len() != shape.plane() {
                    return dim_err(format!("pixel grouping of {} pixels does not fit {shape}", p.assignment.len()));
                }
                Ok((p.assignment.clone(), p.group_count))
            })
            .collect()
    }
}

pub fn pixel_bn_forward_planned<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    state: &mut NormState<T>,
    cfg: &SchemeConfig,
    plan: &PixelPlan,
) -> Result<NormVars> {
    tape.check(x)?;
    check_blend(cfg)?;
    state.validate()?;
    let s = tape.value(x).shape();
    state.check_input(s)?;
    if state.mode == Mode::Eval {
        return eval_forward(tape, x, state);
    }
    update_from_batch(tape, x, state)?;
    pixel_bn_normalize_planned(tape, x, state, cfg, plan)
}

/// Normalization steps of the pixel-group ablation with fixed accumulated
/// statistics, see [`pbn_normalize_planned`].
pub fn pixel_bn_normalize_planned<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    state: &NormState<T>,
    cfg: &SchemeConfig,
    plan: &PixelPlan,
) -> Result<NormVars> {
    tape.check(x)?;
    check_blend(cfg)?;
    state.validate()?;
    let s = tape.value(x).shape();
    state.check_input(s)?;
    let maps = plan.group_maps(s)?;
    let layout = grouped_layout(s, &plan.grouping, &maps, state, T::of(cfg.lambda))?;
    cell_norm(tape, x, state, layout)
}

/// The pixel-group ablation of [`pbn_forward`]: same statistics and blending,
/// pixels grouped without spatial structure.
pub fn pixel_bn_forward<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    x: Var,
    state: &mut NormState<T>,
    cfg: &SchemeConfig,
    rng: &mut R,
) -> Result<NormVars> {
    tape.check(x)?;
    check_blend(cfg)?;
    state.validate()?;
    let s = tape.value(x).shape();
    state.check_input(s)?;
    if state.mode == Mode::Eval {
        return eval_forward(tape, x, state);
    }
    update_from_batch(tape, x, state)?;
    let plan = PixelPlan::draw(s, cfg, rng)?;
    let maps = plan.group_maps(s)?;
    let layout = grouped_layout(s, &plan.grouping, &maps, state, T::of(cfg.lambda))?;
    cell_norm(tape, x, state, layout)
}

/// A normalization site: kind, state and the hyper-parameters it needs.
#[derive(Clone, Debug, PartialEq)]
pub struct NormLayer<T> {
    pub kind: NormKind,
    pub state: NormState<T>,
    pub scheme: SchemeConfig,
    pub gn_groups: usize,
}

impl<T: Scalar> NormLayer<T> {
    pub fn new(kind: NormKind, channels: usize, scheme: SchemeConfig, gn_groups: usize) -> Self {
        let state = NormState::new(channels).with_hyper(scheme.momentum, scheme.eps);
        NormLayer { kind, state, scheme, gn_groups }
    }

    pub fn forward<R: Rng + ?Sized>(&mut self, tape: &mut Tape<T>, x: Var, rng: &mut R) -> Result<NormVars> {
        match self.kind {
            NormKind::Bn => bn_forward(tape, x, &mut self.state),
            NormKind::Pbn => pbn_forward(tape, x, &mut self.state, &self.scheme, rng),
            NormKind::PixelBn => pixel_bn_forward(tape, x, &mut self.state, &self.scheme, rng),
            NormKind::In => in_forward(tape, x, &self.state),
            NormKind::Ln => ln_forward(tape, x, &self.state),
            NormKind::Gn => gn_forward(tape, x, &self.state, self.gn_groups),
        }
    }
}

/// Convenience wrapper: forward-only normalization of a tensor.
pub fn normalize<T: Scalar, R: Rng + ?Sized>(layer: &mut NormLayer<T>, x: &Tensor<T>, rng: &mut R) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = layer.forward(&mut tape, xv, rng)?;
    Ok(tape.take(out.out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheme::{Orientation, Rect, SplitMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut r = rng(seed);
        Tensor::from_fn(shape, |_, c, _, _| r.random_range(-2.0..2.0) * (1.0 + c as f64) + c as f64)
    }

    fn run(x: &Tensor<f64>, f: impl FnOnce(&mut Tape<f64>, Var) -> Result<NormVars>) -> (Tensor<f64>, Tape<f64>, NormVars) {
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let vars = f(&mut tape, xv).unwrap();
        (tape.value(vars.out).clone(), tape, vars)
    }

    #[test]
    fn bn_constant_input_is_zero() {
        let x = Tensor::<f64>::full(Shape::new(2, 3, 2, 2), 4.0);
        let mut st = NormState::new(3);
        let (y, _, _) = run(&x, |t, v| bn_forward(t, v, &mut st));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bn_two_column_example() {
        let x = Tensor::<f64>::from_f64(Shape::new(1, 1, 2, 2), &[1.0, 3.0, 1.0, 3.0]).unwrap();
        let mut st = NormState::new(1).with_hyper(0.1, 1e-300);
        let (y, _, _) = run(&x, |t, v| bn_forward(t, v, &mut st));
        for (a, b) in y.data().iter().zip([-1.0, 1.0, -1.0, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bn_momentum_update() {
        let x = Tensor::<f64>::full(Shape::new(2, 1, 2, 2), 1.0);
        let mut st = NormState::new(1);
        let _ = run(&x, |t, v| bn_forward(t, v, &mut st));
        assert!((st.running_mean[0] - 0.1).abs() < 1e-15);
        // batch std of a constant is sqrt(eps)
        assert!((st.running_std[0] - (0.9 + 0.1 * 1e-5f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn bn_channel_mismatch() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 2, 2, 2));
        let mut st = NormState::new(3);
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        assert!(matches!(bn_forward(&mut tape, v, &mut st), Err(Error::Dimension(_))));
    }

    #[test]
    fn bn_eval_uses_running_statistics() {
        let x = random_tensor(Shape::new(2, 2, 3, 3), 1);
        let mut st = NormState::new(2);
        st.running_mean = vec![0.5, -1.0];
        st.running_std = vec![2.0, 0.25];
        st.gamma = vec![1.5, -0.5];
        st.beta = vec![0.1, 0.2];
        st.eval();
        let before = st.clone();
        let (y, _, _) = run(&x, |t, v| bn_forward(t, v, &mut st));
        assert_eq!(st, before);
        let s = x.shape();
        for n in 0..s.n {
            for c in 0..s.c {
                for h in 0..s.h {
                    for w in 0..s.w {
                        let e = st.gamma[c] * (x.at(n, c, h, w) - st.running_mean[c]) / st.running_std[c] + st.beta[c];
                        assert!((y.at(n, c, h, w) - e).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn pbn_single_patch_full_lambda_is_bn() {
        let x = random_tensor(Shape::new(3, 4, 5, 6), 2);
        let cfg = SchemeConfig::fixed(1, SplitMode::Random).with_lambda(1.0);
        let mut a = NormState::new(4);
        let mut b = NormState::new(4);
        let (ya, _, _) = run(&x, |t, v| bn_forward(t, v, &mut a));
        let (yb, _, _) = run(&x, |t, v| pbn_forward(t, v, &mut b, &cfg, &mut rng(0)));
        for (p, q) in ya.data().iter().zip(yb.data()) {
            assert!((p - q).abs() <= 1e-6 * p.abs().max(1e-12));
        }
        assert_eq!(a, b);
    }

    #[test]
    fn pbn_zero_lambda_uses_accumulated_statistics() {
        // batch with mean 0 and sqrt(var + eps) = 1 leaves the statistics at 0 and 1
        let eps = 1e-5;
        let a = (1.0f64 - eps).sqrt();
        let vals: Vec<f64> = (0..8).map(|i| if i % 2 == 0 { a } else { -a }).collect();
        let x = Tensor::<f64>::from_f64(Shape::new(2, 1, 2, 2), &vals).unwrap();
        let cfg = SchemeConfig::fixed(4, SplitMode::Random).with_lambda(0.0);
        let mut st = NormState::new(1);
        let (y, _, _) = run(&x, |t, v| pbn_forward(t, v, &mut st, &cfg, &mut rng(3)));
        for (p, q) in y.data().iter().zip(x.data()) {
            assert!((p - q).abs() < 1e-12);
        }

        // generic batch: the output is the accumulated-statistics normalization
        let x = random_tensor(Shape::new(2, 3, 4, 4), 9);
        let mut st = NormState::new(3);
        let (y, _, _) = run(&x, |t, v| pbn_forward(t, v, &mut st, &cfg, &mut rng(3)));
        let s = x.shape();
        for n in 0..s.n {
            for c in 0..s.c {
                for h in 0..s.h {
                    for w in 0..s.w {
                        let e = (x.at(n, c, h, w) - st.running_mean[c]) / st.running_std[c];
                        assert!((y.at(n, c, h, w) - e).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn pbn_constant_quadrants_are_zero() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 1, 4, 4), |_, _, h, w| (2 * (h / 2) + w / 2) as f64 * 3.0);
        let cfg = SchemeConfig::fixed(4, SplitMode::Equal).with_lambda(1.0);
        let mut st = NormState::new(1);
        let (y, _, _) = run(&x, |t, v| pbn_forward(t, v, &mut st, &cfg, &mut rng(0)));
        assert!(y.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn pbn_rejects_bad_config() {
        let x = random_tensor(Shape::new(2, 1, 4, 4), 0);
        let mut st = NormState::new(1);
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let cfg = SchemeConfig::default().with_lambda(-0.1);
        assert!(matches!(pbn_forward(&mut tape, v, &mut st, &cfg, &mut rng(0)), Err(Error::Config(_))));
        let cfg = SchemeConfig { eps: 0.0, ..SchemeConfig::default() };
        assert!(matches!(pbn_forward(&mut tape, v, &mut st, &cfg, &mut rng(0)), Err(Error::Config(_))));
    }

    #[test]
    fn pbn_tiny_extent_falls_back() {
        let x = random_tensor(Shape::new(4, 2, 1, 1), 0);
        let cfg = SchemeConfig { candidate_set: vec![4, 9], ..SchemeConfig::default() };
        let mut st = NormState::new(2);
        let (y, _, _) = run(&x, |t, v| pbn_forward(t, v, &mut st, &cfg, &mut rng(0)));
        assert!(y.is_finite());
    }

    #[test]
    fn pbn_zero_lambda_gradient_is_gamma_over_std() {
        let x = random_tensor(Shape::new(2, 2, 4, 4), 4);
        let cfg = SchemeConfig::fixed(4, SplitMode::Random).with_lambda(0.0);
        let mut st = NormState::new(2);
        st.gamma = vec![2.0, -0.5];
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let vars = pbn_forward(&mut tape, xv, &mut st, &cfg, &mut rng(1)).unwrap();
        let up: Vec<f64> = (0..x.numel()).map(|i| (i as f64 * 0.37).sin()).collect();
        let l = tape.weighted_sum(vars.out, &up).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(xv).unwrap();
        let plane = 16;
        for (i, &gi) in g.iter().enumerate() {
            let c = (i / plane) % 2;
            assert!((gi - up[i] * st.gamma[c] / st.running_std[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn pbn_single_patch_gradients_match_bn() {
        let x = random_tensor(Shape::new(2, 3, 4, 5), 8);
        let up: Vec<f64> = (0..x.numel()).map(|i| (i as f64 * 0.11).cos()).collect();
        let grads = |use_pbn: bool| {
            let mut st = NormState::new(3);
            st.gamma = vec![0.7, 1.3, -0.4];
            let mut tape = Tape::new();
            let xv = tape.param(x.clone());
            let cfg = SchemeConfig::fixed(1, SplitMode::Random).with_lambda(1.0);
            let vars = if use_pbn {
                pbn_forward(&mut tape, xv, &mut st, &cfg, &mut rng(0)).unwrap()
            } else {
                bn_forward(&mut tape, xv, &mut st).unwrap()
            };
            let l = tape.weighted_sum(vars.out, &up).unwrap();
            tape.backward(l).unwrap();
            [xv, vars.gamma, vars.beta].map(|v| tape.grad(v).unwrap().to_vec())
        };
        let (a, b) = (grads(false), grads(true));
        for (ga, gb) in a.iter().zip(&b) {
            for (p, q) in ga.iter().zip(gb) {
                assert!((p - q).abs() <= 1e-6 * p.abs().max(1.0));
            }
        }
    }

    #[test]
    fn pixel_bn_single_group_is_bn() {
        let x = random_tensor(Shape::new(2, 3, 4, 4), 5);
        let cfg = SchemeConfig::fixed(1, SplitMode::Random).with_lambda(1.0);
        let mut a = NormState::new(3);
        let mut b = NormState::new(3);
        let (ya, _, _) = run(&x, |t, v| bn_forward(t, v, &mut a));
        let (yb, _, _) = run(&x, |t, v| pixel_bn_forward(t, v, &mut b, &cfg, &mut rng(0)));
        for (p, q) in ya.data().iter().zip(yb.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn pixel_bn_constant_input_gives_beta() {
        let x = Tensor::<f64>::full(Shape::new(2, 2, 4, 4), -3.0);
        let cfg = SchemeConfig::fixed(4, SplitMode::Random).with_lambda(1.0);
        let mut st = NormState::new(2);
        st.beta = vec![0.25, -0.75];
        let (y, _, _) = run(&x, |t, v| pixel_bn_forward(t, v, &mut st, &cfg, &mut rng(2)));
        for (i, &v) in y.data().iter().enumerate() {
            assert!((v - st.beta[(i / 16) % 2]).abs() < 1e-12);
        }
    }

    #[test]
    fn pixel_bn_group_means_match_loop_oracle() {
        let s = Shape::new(3, 2, 5, 5);
        let x = random_tensor(s, 6);
        let cfg = SchemeConfig::fixed(4, SplitMode::Random).with_lambda(1.0);
        let plan = PixelPlan::draw(s, &cfg, &mut rng(12)).unwrap();
        let mut st = NormState::new(2);
        let (y, _, _) = run(&x, |t, v| pixel_bn_forward_planned(t, v, &mut st, &cfg, &plan));
        let px = &plan.pixels[0];
        for c in 0..s.c {
            for g in 0..px.group_count {
                let (mut sum, mut sq, mut n) = (0.0, 0.0, 0.0);
                let mut ys = Vec::new();
                for b in 0..s.n {
                    for pix in 0..s.plane() {
                        if px.assignment[pix] == g {
                            let v = x.at(b, c, pix / s.w, pix % s.w);
                            sum += v;
                            n += 1.0;
                            ys.push((v, y.at(b, c, pix / s.w, pix % s.w)));
                        }
                    }
                }
                let mean = sum / n;
                for &(v, _) in &ys {
                    sq += (v - mean) * (v - mean);
                }
                let std = (sq / n + 1e-5).sqrt();
                for &(v, out) in &ys {
                    assert!((out - (v - mean) / std).abs() < 1e-10);
                }
            }
        }
    }

    fn loop_normalize(x: &Tensor<f64>, member: impl Fn(usize, usize) -> usize, cells: usize) -> Vec<f64> {
        let s = x.shape();
        let mut sum = vec![0.0; cells];
        let mut cnt = vec![0.0; cells];
        for n in 0..s.n {
            for c in 0..s.c {
                for h in 0..s.h {
                    for w in 0..s.w {
                        sum[member(n, c)] += x.at(n, c, h, w);
                        cnt[member(n, c)] += 1.0;
                    }
                }
            }
        }
        let mean: Vec<f64> = sum.iter().zip(&cnt).map(|(s, n)| s / n).collect();
        let mut sq = vec![0.0; cells];
        for n in 0..s.n {
            for c in 0..s.c {
                for h in 0..s.h {
                    for w in 0..s.w {
                        sq[member(n, c)] += (x.at(n, c, h, w) - mean[member(n, c)]).powi(2);
                    }
                }
            }
        }
        let mut out = Vec::new();
        for n in 0..s.n {
            for c in 0..s.c {
                for h in 0..s.h {
                    for w in 0..s.w {
                        let k = member(n, c);
                        out.push((x.at(n, c, h, w) - mean[k]) / (sq[k] / cnt[k] + 1e-5).sqrt());
                    }
                }
            }
        }
        out
    }

    #[test]
    fn baselines_match_loop_oracle() {
        let s = Shape::new(3, 4, 3, 5);
        let x = random_tensor(s, 10);
        let st = NormState::new(4);
        let check = |y: &Tensor<f64>, e: Vec<f64>| {
            for (p, q) in y.data().iter().zip(e) {
                assert!((p - q).abs() < 1e-10);
            }
        };
        let (y, _, _) = run(&x, |t, v| in_forward(t, v, &st));
        check(&y, loop_normalize(&x, |n, c| n * 4 + c, 12));
        let (y, _, _) = run(&x, |t, v| ln_forward(t, v, &st));
        check(&y, loop_normalize(&x, |n, _| n, 3));
        let (y, _, _) = run(&x, |t, v| gn_forward(t, v, &st, 2));
        check(&y, loop_normalize(&x, |n, c| n * 2 + c / 2, 6));
    }

    #[test]
    fn baselines_collapse_on_single_sample_single_channel() {
        let x = random_tensor(Shape::new(1, 1, 4, 3), 11);
        let st = NormState::new(1);
        let mut bn = NormState::new(1);
        let (a, _, _) = run(&x, |t, v| in_forward(t, v, &st));
        let (b, _, _) = run(&x, |t, v| ln_forward(t, v, &st));
        let (c, _, _) = run(&x, |t, v| gn_forward(t, v, &st, 1));
        let (d, _, _) = run(&x, |t, v| bn_forward(t, v, &mut bn));
        assert_eq!(a, b);
        assert_eq!(b, c);
        assert_eq!(c, d);
    }

    #[test]
    fn baselines_constant_input_is_zero() {
        let x = Tensor::<f64>::full(Shape::new(2, 4, 3, 3), 1.5);
        let st = NormState::new(4);
        for f in [in_forward::<f64>, ln_forward::<f64>] {
            let (y, _, _) = run(&x, |t, v| f(t, v, &st));
            assert!(y.data().iter().all(|&v| v == 0.0));
        }
        let (y, _, _) = run(&x, |t, v| gn_forward(t, v, &st, 2));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gn_group_mismatch() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 4, 2, 2));
        let st = NormState::new(4);
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        assert!(matches!(gn_forward(&mut tape, v, &st, 3), Err(Error::Config(_))));
        assert!(matches!(gn_forward(&mut tape, v, &st, 0), Err(Error::Config(_))));
    }

    #[test]
    fn uniform_plan_uses_given_grid() {
        let s = Shape::new(2, 2, 4, 4);
        let x = random_tensor(s, 13);
        let grid = PatchGrid::from_cuts(4, 4, &[1], &[3]);
        let plan = PatchPlan::uniform(2, grid.clone());
        let cfg = SchemeConfig::default().with_lambda(1.0);
        let mut st = NormState::new(2);
        let (y, _, _) = run(&x, |t, v| pbn_forward_planned(t, v, &mut st, &cfg, &plan));
        let r: Rect = grid.rects[3];
        assert_eq!(r, Rect::new(1, 4, 3, 4));
        // the patch has zero mean after normalization
        for c in 0..2 {
            let mut sum = 0.0;
            for n in 0..2 {
                for h in r.row_start..r.row_end {
                    sum += y.at(n, c, h, 3);
                }
            }
            assert!(sum.abs() < 1e-10);
        }
    }

    #[test]
    fn state_record_round_trip() {
        let mut st = NormState::<f64>::new(3);
        st.gamma = vec![0.5, 1.5, 2.5];
        st.running_std = vec![0.1, 0.2, 0.3];
        st.eval();
        let mut rec = Record::new();
        st.to_record("norm0", &mut rec);
        let back = NormState::<f64>::from_record("norm0", &rec, 3).unwrap();
        assert_eq!(back, st);
        assert!(matches!(NormState::<f64>::from_record("norm0", &rec, 4), Err(Error::Mismatch(_))));
        assert!(matches!(NormState::<f64>::from_record("norm1", &rec, 3), Err(Error::Mismatch(_))));
    }

    #[test]
    fn norm_kind_parses_labels() {
        for k in NormKind::ALL {
            assert_eq!(k.label().parse::<NormKind>().unwrap(), k);
        }
        assert!("batch".parse::<NormKind>().is_err());
    }

    #[test]
    fn layer_orientation_default_is_any() {
        assert_eq!(SchemeConfig::default().orientation, Orientation::Any);
    }
}
