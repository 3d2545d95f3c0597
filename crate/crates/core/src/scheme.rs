//! Spatial partitions for patch-wise normalization.
//!
//! A [`PatchGrid`] is an exact partition of the `H x W` plane into
//! axis-aligned rectangles. Random cuts for two and four patches fall in
//! `[ceil(D/3), floor(2D/3)]`; for nine patches the two cuts fall in
//! `[ceil(D/5), floor(2D/5)]` and `[ceil(3D/5), floor(4D/5)]`. When an
//! interval is empty the axis is left uncut, so the grid degrades to fewer
//! patches instead of failing.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

pub const ADMISSIBLE_PATCH_COUNTS: [usize; 4] = [1, 2, 4, 9];

/// Half-open rectangle `rows row_start..row_end`, `cols col_start..col_end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub row_start: usize,
    pub row_end: usize,
    pub col_start: usize,
    pub col_end: usize,
}

impl Rect {
    pub fn new(row_start: usize, row_end: usize, col_start: usize, col_end: usize) -> Self {
        Rect { row_start, row_end, col_start, col_end }
    }

    pub fn area(&self) -> usize {
        (self.row_end - self.row_start) * (self.col_end - self.col_start)
    }

    pub fn contains(&self, h: usize, w: usize) -> bool {
        (self.row_start..self.row_end).contains(&h) && (self.col_start..self.col_end).contains(&w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    Equal,
    #[default]
    Random,
}

/// Direction of the single cut for two patches. `Any` draws the direction
/// per grid in random mode and means left-right in equal mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    #[default]
    Any,
    /// Left and right halves, one cut along the width.
    LeftRight,
    /// Upper and lower halves, one cut along the height.
    UpDown,
}

/// Which cuts a grid draw actually used, for auditing cut ranges.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Cuts {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub rects: Vec<Rect>,
    pub height: usize,
    pub width: usize,
    /// Patch count that was asked for; `rects.len()` is the effective count.
    pub requested: usize,
    pub cuts: Cuts,
}

impl PatchGrid {
    pub fn single(height: usize, width: usize) -> Self {
        PatchGrid {
            rects: vec![Rect::new(0, height, 0, width)],
            height,
            width,
            requested: 1,
            cuts: Cuts::default(),
        }
    }

    /// Builds the grid spanned by sorted interior cut positions.
    pub fn from_cuts(height: usize, width: usize, rows: &[usize], cols: &[usize]) -> Self {
        let row_edges: Vec<usize> = std::iter::once(0).chain(rows.iter().copied()).chain([height]).collect();
        let col_edges: Vec<usize> = std::iter::once(0).chain(cols.iter().copied()).chain([width]).collect();
        let mut rects = Vec::new();
        for r in row_edges.windows(2) {
            for c in col_edges.windows(2) {
                rects.push(Rect::new(r[0], r[1], c[0], c[1]));
            }
        }
        let requested = rects.len();
        PatchGrid { rects, height, width, requested, cuts: Cuts { rows: rows.to_vec(), cols: cols.to_vec() } }
    }

    pub fn patch_count(&self) -> usize {
        self.rects.len()
    }

    /// Patch id of every pixel in row-major order.
    pub fn pixel_map(&self) -> Vec<usize> {
        let mut map = vec![usize::MAX; self.height * self.width];
        for (p, r) in self.rects.iter().enumerate() {
            for h in r.row_start..r.row_end {
                map[h * self.width + r.col_start..h * self.width + r.col_end].fill(p);
            }
        }
        map
    }

    /// Checks the exact-partition invariant: nonempty rects inside the plane
    /// covering every coordinate once.
    pub fn is_exact_partition(&self) -> bool {
        let mut count = vec![0u32; self.height * self.width];
        for r in &self.rects {
            if r.row_start >= r.row_end || r.col_start >= r.col_end || r.row_end > self.height || r.col_end > self.width {
                return false;
            }
            for h in r.row_start..r.row_end {
                for w in r.col_start..r.col_end {
                    count[h * self.width + w] += 1;
                }
            }
        }
        count.iter().all(|&c| c == 1)
    }
}

/// Hyper-parameters of the patch-aware layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemeConfig {
    pub candidate_set: Vec<usize>,
    pub subset_size: usize,
    pub split_mode: SplitMode,
    pub orientation: Orientation,
    pub lambda: f64,
    pub eps: f64,
    pub momentum: f64,
    pub rng_seed: u64,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        SchemeConfig {
            candidate_set: vec![1, 2, 4],
            subset_size: 2,
            split_mode: SplitMode::Random,
            orientation: Orientation::Any,
            lambda: 0.5,
            eps: 1e-5,
            momentum: 0.1,
            rng_seed: 0,
        }
    }
}

impl SchemeConfig {
    /// One fixed patch count for every channel.
    pub fn fixed(patches: usize, split_mode: SplitMode) -> Self {
        SchemeConfig { candidate_set: vec![patches], subset_size: 1, split_mode, ..Self::default() }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.candidate_set.is_empty() {
            return config_err("scheme.candidate_set: must not be empty");
        }
        if let Some(p) = self.candidate_set.iter().find(|p| !ADMISSIBLE_PATCH_COUNTS.contains(p)) {
            return config_err(format!("scheme.candidate_set: patch count {p} is not one of 1, 2, 4, 9"));
        }
        let mut sorted = self.candidate_set.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.candidate_set.len() {
            return config_err("scheme.candidate_set: duplicate patch counts");
        }
        if self.subset_size == 0 || self.subset_size > self.candidate_set.len() {
            return config_err(format!(
                "scheme.subset_size: {} must be between 1 and {}",
                self.subset_size,
                self.candidate_set.len()
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return config_err(format!("scheme.lambda: {} is outside [0, 1]", self.lambda));
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return config_err(format!("scheme.eps: {} must be positive", self.eps));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return config_err(format!("scheme.momentum: {} is outside (0, 1)", self.momentum));
        }
        Ok(())
    }
}

/// Uniform sample of `subset_size` patch counts without replacement,
/// returned in ascending order.
pub fn draw_subset<R: Rng + ?Sized>(cfg: &SchemeConfig, rng: &mut R) -> Result<Vec<usize>> {
    let k = cfg.subset_size;
    let set = &cfg.candidate_set;
    if k > set.len() {
        return config_err(format!("subset size {k} exceeds candidate set of {}", set.len()));
    }
    if k == 0 {
        return config_err("subset size must be at least 1");
    }
    let mut out: Vec<usize> = if k == set.len() {
        set.clone()
    } else {
        index::sample(rng, set.len(), k).into_iter().map(|i| set[i]).collect()
    };
    out.sort_unstable();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelGroup {
    pub patches: usize,
    pub channels: Vec<usize>,
}

/// Channels partitioned by their drawn patch count, in ascending patch order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelGrouping {
    pub groups: Vec<ChannelGroup>,
}

impl ChannelGrouping {
    /// Groups channels whose entries in `draws` are equal.
    pub fn from_draws(draws: &[usize]) -> Self {
        let mut by_p: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (c, &p) in draws.iter().enumerate() {
            by_p.entry(p).or_default().push(c);
        }
        ChannelGrouping {
            groups: by_p.into_iter().map(|(patches, channels)| ChannelGroup { patches, channels }).collect(),
        }
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }
}

/// Draws a patch count for every channel independently and uniformly from
/// `subset`.
pub fn assign_channels<R: Rng + ?Sized>(channels: usize, subset: &[usize], rng: &mut R) -> Result<ChannelGrouping> {
    if channels == 0 {
        return config_err("channel count must be at least 1");
    }
    if subset.is_empty() {
        return config_err("patch-count subset is empty");
    }
    let draws: Vec<usize> = (0..channels).map(|_| subset[rng.random_range(0..subset.len())]).collect();
    Ok(ChannelGrouping::from_draws(&draws))
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Inclusive bounds `[ceil(lo_num*D/den), floor(hi_num*D/den)]`.
pub fn cut_interval(dim: usize, lo_num: usize, hi_num: usize, den: usize) -> (usize, usize) {
    (ceil_div(lo_num * dim, den), hi_num * dim / den)
}

fn draw_in<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (usize, usize)) -> Option<usize> {
    (lo <= hi).then(|| rng.random_range(lo..=hi))
}

/// Valid cut: strictly inside the axis so both sides are nonempty.
fn inside(c: usize, dim: usize) -> bool {
    c > 0 && c < dim
}

/// One interior cut for an axis of length `dim`.
fn one_cut<R: Rng + ?Sized>(dim: usize, mode: SplitMode, rng: &mut R) -> Vec<usize> {
    let cut = match mode {
        SplitMode::Equal => Some(dim / 2),
        SplitMode::Random => draw_in(rng, cut_interval(dim, 1, 2, 3)),
    };
    cut.filter(|&c| inside(c, dim)).into_iter().collect()
}

/// Two interior cuts for a three-way split of an axis.
fn two_cuts<R: Rng + ?Sized>(dim: usize, mode: SplitMode, rng: &mut R) -> Vec<usize> {
    let cuts = match mode {
        SplitMode::Equal => Some((dim / 3, 2 * dim / 3)),
        SplitMode::Random => {
            let a = cut_interval(dim, 1, 2, 5);
            let b = cut_interval(dim, 3, 4, 5);
            (a.0 <= a.1 && b.0 <= b.1).then(|| (rng.random_range(a.0..=a.1), rng.random_range(b.0..=b.1)))
        }
    };
    match cuts {
        Some((a, b)) if inside(a, dim) && a < b && inside(b, dim) => vec![a, b],
        _ => Vec::new(),
    }
}

/// Draws one partition of an `height x width` plane into `patches` cells.
pub fn generate_grid<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    patches: usize,
    mode: SplitMode,
    orientation: Orientation,
    rng: &mut R,
) -> Result<PatchGrid> {
    if height == 0 || width == 0 {
        return config_err(format!("grid extent must be at least 1x1, got {height}x{width}"));
    }
    let (rows, cols) = match patches {
        1 => (Vec::new(), Vec::new()),
        2 => {
            let up_down = match (orientation, mode) {
                (Orientation::UpDown, _) => true,
                (Orientation::LeftRight, _) | (Orientation::Any, SplitMode::Equal) => false,
                (Orientation::Any, SplitMode::Random) => rng.random_bool(0.5),
            };
            if up_down {
                (one_cut(height, mode, rng), Vec::new())
            } else {
                (Vec::new(), one_cut(width, mode, rng))
            }
        }
        4 => {
            let rows = one_cut(height, mode, rng);
            (rows, one_cut(width, mode, rng))
        }
        9 => {
            let rows = two_cuts(height, mode, rng);
            (rows, two_cuts(width, mode, rng))
        }
        other => return config_err(format!("unsupported patch count {other}")),
    };
    let mut grid = PatchGrid::from_cuts(height, width, &rows, &cols);
    grid.requested = patches;
    Ok(grid)
}

/// Pixel-to-group assignment without spatial structure.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelGrouping {
    /// Group id of every `(h, w)` in row-major order.
    pub assignment: Vec<usize>,
    pub group_count: usize,
}

impl PixelGrouping {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.group_count];
        for &g in &self.assignment {
            sizes[g] += 1;
        }
        sizes
    }
}

/// Draws group sizes from a random grid of `patches` cells, then scatters
/// pixels over the groups by a uniform random permutation.
pub fn generate_pixel_groups<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    patches: usize,
    rng: &mut R,
) -> Result<PixelGrouping> {
    let grid = generate_grid(height, width, patches, SplitMode::Random, Orientation::Any, rng)?;
    let mut order: Vec<usize> = (0..height * width).collect();
    order.shuffle(rng);
    let mut assignment = vec![0; height * width];
    let mut next = 0;
    for (g, r) in grid.rects.iter().enumerate() {
        for &pix in &order[next..next + r.area()] {
            assignment[pix] = g;
        }
        next += r.area();
    }
    Ok(PixelGrouping { assignment, group_count: grid.patch_count() })
}
