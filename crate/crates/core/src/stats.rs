//! Per-patch mean and standard deviation of images or feature maps.
//!
//! Statistics are raw data measurements: biased variance, no epsilon. Each
//! sample of the input tensor is one source.

use std::io::Write;

use crate::error::{dim_err, Error, Result};
use crate::scheme::{PatchGrid, Rect};
use crate::tensor::{Scalar, Tensor};

pub const CSV_HEADER: &str = "source,channel,patch,row0,row1,col0,col1,mean,std";

#[derive(Clone, Debug, PartialEq)]
pub struct PatchStatRow {
    pub source: usize,
    pub channel: usize,
    /// `None` marks the global row of a (source, channel).
    pub patch: Option<usize>,
    pub rect: Rect,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct PatchStatReport {
    pub rows: Vec<PatchStatRow>,
}

impl PatchStatReport {
    pub fn patch_rows(&self) -> impl Iterator<Item = &PatchStatRow> {
        self.rows.iter().filter(|r| r.patch.is_some())
    }

    pub fn global_rows(&self) -> impl Iterator<Item = &PatchStatRow> {
        self.rows.iter().filter(|r| r.patch.is_none())
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for r in &self.rows {
            let patch = r.patch.map_or_else(|| "global".to_string(), |p| p.to_string());
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.source, r.channel, patch, r.rect.row_start, r.rect.row_end, r.rect.col_start, r.rect.col_end, r.mean, r.std
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is ascii")
    }
}

fn region_stats<T: Scalar>(plane: &[T], width: usize, r: &Rect) -> (f64, f64) {
    let n = r.area() as f64;
    let mut sum = 0.0;
    for h in r.row_start..r.row_end {
        for &v in &plane[h * width + r.col_start..h * width + r.col_end] {
            sum += v.f64();
        }
    }
    let mean = sum / n;
    let mut sq = 0.0;
    for h in r.row_start..r.row_end {
        for &v in &plane[h * width + r.col_start..h * width + r.col_end] {
            let d = v.f64() - mean;
            sq += d * d;
        }
    }
    (mean, (sq / n).sqrt())
}

/// One row per (source, channel, patch), followed by one global row per
/// (source, channel).
pub fn analyze_patches<T: Scalar>(f: &Tensor<T>, grid: &PatchGrid) -> Result<PatchStatReport> {
    let s = f.shape();
    if grid.height != s.h || grid.width != s.w {
        return dim_err(format!("grid {}x{} does not match tensor {s}", grid.height, grid.width));
    }
    if !grid.is_exact_partition() {
        return dim_err("grid is not an exact partition of the plane");
    }
    if s.numel() == 0 {
        return dim_err("cannot analyze an empty tensor");
    }
    let full = Rect::new(0, s.h, 0, s.w);
    let mut rows = Vec::new();
    let mut globals = Vec::new();
    for n in 0..s.n {
        for c in 0..s.c {
            let base = s.index(n, c, 0, 0);
            let plane = &f.data()[base..base + s.plane()];
            for (p, r) in grid.rects.iter().enumerate() {
                let (mean, std) = region_stats(plane, s.w, r);
                rows.push(PatchStatRow { source: n, channel: c, patch: Some(p), rect: *r, mean, std });
            }
            let (mean, std) = region_stats(plane, s.w, &full);
            globals.push(PatchStatRow { source: n, channel: c, patch: None, rect: full, mean, std });
        }
    }
    rows.extend(globals);
    Ok(PatchStatReport { rows })
}

/// Largest pairwise gap between patch statistics of one (source, channel).
#[derive(Clone, Debug, PartialEq)]
pub struct Discrepancy {
    pub source: usize,
    pub channel: usize,
    pub mean_gap: f64,
    pub std_gap: f64,
}

/// `max |a - b|` over patch pairs, separately for means and stds. Every
/// (source, channel) must have at least two patches.
pub fn discrepancy_score(report: &PatchStatReport) -> Result<Vec<Discrepancy>> {
    let mut keys: Vec<(usize, usize)> = report.patch_rows().map(|r| (r.source, r.channel)).collect();
    keys.sort_unstable();
    keys.dedup();
    if keys.is_empty() {
        return Err(Error::Undefined("report has no patch rows".into()));
    }
    keys.into_iter()
        .map(|(source, channel)| {
            let rows: Vec<&PatchStatRow> =
                report.patch_rows().filter(|r| r.source == source && r.channel == channel).collect();
            if rows.len() < 2 {
                return Err(Error::Undefined(format!(
                    "source {source} channel {channel} has a single patch; discrepancy needs two"
                )));
            }
            let gap = |f: fn(&PatchStatRow) -> f64| {
                let (lo, hi) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                    (lo.min(f(r)), hi.max(f(r)))
                });
                hi - lo
            };
            Ok(Discrepancy { source, channel, mean_gap: gap(|r| r.mean), std_gap: gap(|r| r.std) })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn two_tone() -> Tensor<f64> {
        Tensor::from_fn(Shape::new(1, 1, 4, 4), |_, _, h, _| if h < 2 { 0.0 } else { 1.0 })
    }

    fn p4_equal() -> PatchGrid {
        PatchGrid::from_cuts(4, 4, &[2], &[2])
    }

    #[test]
    fn constant_image_has_no_discrepancy() {
        let f = Tensor::<f64>::full(Shape::new(2, 3, 4, 4), 0.3);
        let rep = analyze_patches(&f, &p4_equal()).unwrap();
        assert_eq!(rep.rows.len(), 2 * 3 * 5);
        assert!(rep.rows.iter().all(|r| r.std < 1e-15 && (r.mean - 0.3).abs() < 1e-15));
        assert!(discrepancy_score(&rep).unwrap().iter().all(|d| d.mean_gap < 1e-15 && d.std_gap < 1e-15));
    }

    #[test]
    fn two_tone_quadrants() {
        let rep = analyze_patches(&two_tone(), &p4_equal()).unwrap();
        let means: Vec<f64> = rep.patch_rows().map(|r| r.mean).collect();
        assert_eq!(means, vec![0.0, 0.0, 1.0, 1.0]);
        let g: Vec<&PatchStatRow> = rep.global_rows().collect();
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].mean, 0.5);
        assert_eq!(g[0].std, 0.5);
        let d = discrepancy_score(&rep).unwrap();
        assert_eq!(d[0].mean_gap, 1.0);
        assert_eq!(d[0].std_gap, 0.0);
    }

    #[test]
    fn single_patch_discrepancy_is_undefined() {
        let rep = analyze_patches(&two_tone(), &PatchGrid::single(4, 4)).unwrap();
        assert!(matches!(discrepancy_score(&rep), Err(Error::Undefined(_))));
        assert!(matches!(discrepancy_score(&PatchStatReport::default()), Err(Error::Undefined(_))));
    }

    #[test]
    fn mirrored_patches_have_zero_gap() {
        let f = Tensor::<f64>::from_fn(Shape::new(1, 1, 4, 4), |_, _, h, w| ((h % 2) * 3 + w % 2) as f64);
        let rep = analyze_patches(&f, &p4_equal()).unwrap();
        let d = discrepancy_score(&rep).unwrap();
        assert_eq!((d[0].mean_gap, d[0].std_gap), (0.0, 0.0));
    }

    #[test]
    fn grid_mismatch_is_dimension_error() {
        let f = Tensor::<f64>::zeros(Shape::new(1, 1, 4, 5));
        assert!(matches!(analyze_patches(&f, &p4_equal()), Err(Error::Dimension(_))));
    }

    #[test]
    fn csv_layout() {
        let rep = analyze_patches(&two_tone(), &PatchGrid::from_cuts(4, 4, &[2], &[])).unwrap();
        let csv = rep.to_csv_string();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "0,0,0,0,2,0,4,0,0");
        assert_eq!(lines[2], "0,0,1,2,4,0,4,1,0");
        assert_eq!(lines[3], "0,0,global,0,4,0,4,0.5,0.5");
    }
}
