use alloc::vec::Vec;

use crate::depth::GridSpec;
use crate::error::{bail, Result};
use crate::math;
use crate::tape::RowEntry;
use crate::tensor::Tensor;

use super::{BevFeatureMap, Box3D, Rect};

/// Output bins of a BEV crop.
pub const CROP_BINS: (usize, usize) = (3, 3);
/// Bilinear samples per bin along each axis.
pub const ROI_SAMPLES: usize = 2;

/// Sparse form of RoI align over a `rows×cols` map: `dst` is the output bin
/// (`i·out_cols + j`), `src` the input pixel (`row·cols + col`). Pixel
/// `(row, col)` covers `[col, col+1) × [row, row+1)`; samples outside the map
/// are clamped to the border.
pub fn roi_align_entries(
    rows: usize,
    cols: usize,
    rect: &Rect,
    out: (usize, usize),
    samples: usize,
) -> Result<Vec<RowEntry>> {
    if rows == 0 || cols == 0 {
        bail!(Dimension, "roi_align: empty {rows}x{cols} map");
    }
    if [rect.x0, rect.y0, rect.x1, rect.y1].iter().any(|v| !v.is_finite())
        || !(rect.width() > 0.0)
        || !(rect.height() > 0.0)
    {
        bail!(Validation, "roi_align: degenerate rect {:?}", rect);
    }
    if samples == 0 || out.0 == 0 || out.1 == 0 {
        bail!(Validation, "roi_align: need at least one bin and one sample, got {:?} / {samples}", out);
    }
    let bin_h = rect.height() / out.0 as f64;
    let bin_w = rect.width() / out.1 as f64;
    let w_sample = 1.0 / (samples * samples) as f64;
    let mut entries = Vec::with_capacity(out.0 * out.1 * samples * samples * 4);
    for i in 0..out.0 {
        for j in 0..out.1 {
            let dst = i * out.1 + j;
            for si in 0..samples {
                let y = rect.y0 + (i as f64 + (si as f64 + 0.5) / samples as f64) * bin_h;
                let (r0, r1, fy) = axis_weights(y, rows);
                for sj in 0..samples {
                    let x = rect.x0 + (j as f64 + (sj as f64 + 0.5) / samples as f64) * bin_w;
                    let (c0, c1, fx) = axis_weights(x, cols);
                    for (r, wy) in [(r0, 1.0 - fy), (r1, fy)] {
                        for (c, wx) in [(c0, 1.0 - fx), (c1, fx)] {
                            let w = w_sample * wy * wx;
                            if w != 0.0 {
                                entries.push(RowEntry::new(dst, r * cols + c, w));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(entries)
}

/// Neighbouring pixel indices and the fraction toward the second, with pixel
/// centres at `k + 0.5`.
fn axis_weights(coord: f64, n: usize) -> (usize, usize, f64) {
    let u = (coord - 0.5).clamp(0.0, (n - 1) as f64);
    let k0 = math::floor(u) as usize;
    let k1 = (k0 + 1).min(n - 1);
    (k0, k1, u - k0 as f64)
}

/// RoI align of a `[rows, cols, C]` map into `[out.0, out.1, C]`.
pub fn roi_align(feat: &Tensor, rect: &Rect, out: (usize, usize), samples: usize) -> Result<Tensor> {
    let s = feat.shape();
    if s.len() != 3 {
        bail!(Dimension, "roi_align: features must be rank 3, got {:?}", s);
    }
    let (rows, cols, c) = (s[0], s[1], s[2]);
    let entries = roi_align_entries(rows, cols, rect, out, samples)?;
    let mut data = alloc::vec![0.0; out.0 * out.1 * c];
    apply_entries(&entries, feat.data(), c, &mut data);
    Tensor::new(&[out.0, out.1, c], data)
}

fn apply_entries(entries: &[RowEntry], src: &[f64], c: usize, dst: &mut [f64]) {
    for e in entries {
        let (d, s) = (e.dst as usize, e.src as usize);
        for (o, &v) in dst[d * c..(d + 1) * c].iter_mut().zip(&src[s * c..(s + 1) * c]) {
            *o += e.weight * v;
        }
    }
}

/// Grid-coordinate rect bounding the box footprint. BEV maps are treated as
/// images with rows along grid x and columns along grid y.
pub fn crop_rect(grid: &GridSpec, b: &Box3D) -> Result<Rect> {
    let (x0, y0, x1, y1) = b.footprint_aabb();
    let (gx0, gy0) = grid.to_grid(x0, y0);
    let (gx1, gy1) = grid.to_grid(x1, y1);
    if gx1 <= 0.0 || gy1 <= 0.0 || gx0 >= grid.width as f64 || gy0 >= grid.height as f64 {
        bail!(
            Bounds,
            "box footprint around ({:.2}, {:.2}) lies outside the grid",
            b.center[0],
            b.center[1]
        );
    }
    Ok(Rect {
        x0: gy0,
        y0: gx0,
        x1: gy1,
        y1: gx1,
    })
}

/// RoI-align entries from BEV cells (`src` = flat cell) to the [`CROP_BINS`] bins.
pub fn crop_entries(grid: &GridSpec, b: &Box3D) -> Result<Vec<RowEntry>> {
    let rect = crop_rect(grid, b)?;
    roi_align_entries(grid.width, grid.height, &rect, CROP_BINS, ROI_SAMPLES)
}

/// Flattened `3·3·C` crop of the BEV map over the box footprint, bin-major.
pub fn crop_bev_box(bev: &BevFeatureMap, b: &Box3D) -> Result<Vec<f64>> {
    let entries = crop_entries(bev.grid(), b)?;
    let c = bev.channels();
    let mut out = alloc::vec![0.0; CROP_BINS.0 * CROP_BINS.1 * c];
    apply_entries(&entries, bev.features().data(), c, &mut out);
    Ok(out)
}
