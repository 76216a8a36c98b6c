use alloc::vec::Vec;

use crate::depth::GridSpec;
use crate::error::{bail, Result};
use crate::tape::NO_TARGET;
use crate::tensor::Tensor;

use super::{BevFeatureMap, CameraModel};

const NORMALIZATION_TOL: f64 = 1e-6;

/// Camera-depth bin centres in metres.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthBins {
    centers: Vec<f64>,
}

impl DepthBins {
    /// `count` equal-width bins covering `[near, far]`, represented by their midpoints.
    pub fn uniform(count: usize, near: f64, far: f64) -> Result<Self> {
        if count == 0 || !(near > 0.0) || !(far > near) || !far.is_finite() {
            bail!(Config, "depth bins need count > 0 and 0 < near < far, got {count}, [{near}, {far}]");
        }
        let w = (far - near) / count as f64;
        Ok(Self {
            centers: (0..count).map(|i| near + (i as f64 + 0.5) * w).collect(),
        })
    }

    pub fn from_centers(centers: Vec<f64>) -> Result<Self> {
        if centers.is_empty() || centers.iter().any(|&d| !(d > 0.0) || !d.is_finite()) {
            bail!(Config, "depth bin centres must be positive and finite");
        }
        Ok(Self { centers })
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

impl Default for DepthBins {
    /// 40 bins over 1–60 m.
    fn default() -> Self {
        Self::uniform(40, 1.0, 60.0).expect("static bins are valid")
    }
}

/// Target BEV cell for every `(pixel, bin)` of one view whose feature map is
/// `feat_size = (rows, cols)`. Feature pixels are mapped to camera pixels by
/// stretching over the full image. Misses are [`NO_TARGET`].
pub fn splat_targets(cam: &CameraModel, feat_size: (usize, usize), bins: &DepthBins, grid: &GridSpec) -> Vec<u32> {
    let (rows, cols) = feat_size;
    let (img_rows, img_cols) = cam.image_size();
    let sy = img_rows as f64 / rows as f64;
    let sx = img_cols as f64 / cols as f64;
    let mut out = Vec::with_capacity(rows * cols * bins.len());
    for r in 0..rows {
        for c in 0..cols {
            let (u, v) = ((c as f64 + 0.5) * sx, (r as f64 + 0.5) * sy);
            for &d in bins.centers() {
                let p = cam.unproject(u, v, d);
                out.push(match grid.cell_of(p[0], p[1]) {
                    Some((x, y)) => grid.index(x, y) as u32,
                    None => NO_TARGET,
                });
            }
        }
    }
    out
}

/// Splats per-view image features into BEV, weighting each `(pixel, bin)` by
/// its depth probability.
pub fn lift_splat(
    img_feats: &[Tensor],
    depth_dist: &[Tensor],
    cams: &[CameraModel],
    bins: &DepthBins,
    grid: &GridSpec,
) -> Result<BevFeatureMap> {
    if img_feats.len() != cams.len() || depth_dist.len() != cams.len() {
        bail!(
            Dimension,
            "lift_splat: {} feature maps, {} depth maps, {} cameras",
            img_feats.len(),
            depth_dist.len(),
            cams.len()
        );
    }
    let channels = img_feats.first().map_or(0, Tensor::last_dim);
    let nb = bins.len();
    let mut out = alloc::vec![0.0; grid.cells() * channels];
    for (view, cam) in cams.iter().enumerate() {
        let (f, p) = (&img_feats[view], &depth_dist[view]);
        let (fs, ps) = (f.shape(), p.shape());
        if fs.len() != 3 || ps.len() != 3 || fs[..2] != ps[..2] || ps[2] != nb || fs[2] != channels {
            bail!(Dimension, "lift_splat view {view}: features {:?}, depth {:?}, {nb} bins", fs, ps);
        }
        let pixels = fs[0] * fs[1];
        for px in 0..pixels {
            let s: f64 = p.row(px).iter().sum();
            if (s - 1.0).abs() > NORMALIZATION_TOL || p.row(px).iter().any(|&v| v < 0.0) {
                bail!(Validation, "lift_splat view {view}: pixel {px} depth distribution sums to {s}");
            }
        }
        let targets = splat_targets(cam, (fs[0], fs[1]), bins, grid);
        for px in 0..pixels {
            let feat = f.row(px);
            for (b, &w) in p.row(px).iter().enumerate() {
                let t = targets[px * nb + b];
                if t == NO_TARGET {
                    continue;
                }
                let t = t as usize;
                for (o, &v) in out[t * channels..(t + 1) * channels].iter_mut().zip(feat) {
                    *o += w * v;
                }
            }
        }
    }
    BevFeatureMap::new(*grid, Tensor::new(&[grid.width, grid.height, channels], out)?)
}
