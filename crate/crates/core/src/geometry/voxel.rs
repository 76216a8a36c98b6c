use alloc::vec::Vec;

use crate::depth::GridSpec;
use crate::error::{bail, Result};
use crate::math;
use crate::tape::RowEntry;
use crate::tensor::Tensor;

use super::{Box3D, PointCloud};

/// Raw per-voxel features: mean offset from the voxel centre (x, y, z),
/// mean intensity and `ln(1 + count)`.
pub const RAW_VOXEL_FEATURES: usize = 5;

const ALIGN_TOL: f64 = 1e-6;

/// Voxel size and metric range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelConfig {
    pub voxel_size: [f64; 3],
    /// `[(min, max); 3]` in metres.
    pub range: [[f64; 2]; 3],
    dims: [u32; 3],
}

impl VoxelConfig {
    pub fn new(voxel_size: [f64; 3], range: [[f64; 2]; 3]) -> Result<Self> {
        let mut dims = [0u32; 3];
        for a in 0..3 {
            let [lo, hi] = range[a];
            let v = voxel_size[a];
            if !(v > 0.0) || !v.is_finite() || !lo.is_finite() || !hi.is_finite() {
                bail!(Config, "voxel axis {a}: size {v} and range [{lo}, {hi}] must be finite and positive");
            }
            if hi <= lo {
                bail!(Config, "voxel axis {a}: empty range [{lo}, {hi}]");
            }
            let n = math::round((hi - lo) / v);
            if (n * v - (hi - lo)).abs() > ALIGN_TOL * v || n < 1.0 || n > u32::MAX as f64 {
                bail!(Config, "voxel axis {a}: range {} is not a whole number of {v} voxels", hi - lo);
            }
            dims[a] = n as u32;
        }
        Ok(Self {
            voxel_size,
            range,
            dims,
        })
    }

    /// Voxel count along each axis.
    pub fn dims(&self) -> [u32; 3] {
        self.dims
    }

    /// Voxel index containing `p`, if it lies inside the range.
    pub fn index_of(&self, p: [f64; 3]) -> Option<[u32; 3]> {
        let mut idx = [0u32; 3];
        for a in 0..3 {
            let t = math::floor((p[a] - self.range[a][0]) / self.voxel_size[a]);
            if t < 0.0 || t >= self.dims[a] as f64 {
                return None;
            }
            idx[a] = t as u32;
        }
        Some(idx)
    }

    pub fn center(&self, index: [u32; 3]) -> [f64; 3] {
        let mut c = [0.0; 3];
        for a in 0..3 {
            c[a] = self.range[a][0] + (index[a] as f64 + 0.5) * self.voxel_size[a];
        }
        c
    }
}

/// One occupied voxel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Voxel {
    pub index: [u32; 3],
    pub raw: [f64; RAW_VOXEL_FEATURES],
    pub count: u32,
}

/// Sparse occupied voxels, sorted by index (x, then y, then z).
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    config: VoxelConfig,
    voxels: Vec<Voxel>,
}

/// Occupied BEV columns and the voxel → column transfers that sum them.
#[derive(Debug, Clone, PartialEq)]
pub struct BevColumns {
    /// Flat BEV cell of each occupied column, ascending.
    pub cells: Vec<usize>,
    /// `dst` is a position in `cells`, `src` a voxel position.
    pub entries: Vec<RowEntry>,
}

/// Bins points by `floor((p − min) / voxel_size)`. Returns the grid and the
/// number of out-of-range points dropped.
pub fn voxelize(pc: &PointCloud, config: &VoxelConfig) -> (VoxelGrid, usize) {
    let mut binned: Vec<([u32; 3], usize)> = Vec::with_capacity(pc.len());
    let mut dropped = 0;
    for (i, p) in pc.points().iter().enumerate() {
        match config.index_of([p[0], p[1], p[2]]) {
            Some(idx) => binned.push((idx, i)),
            None => dropped += 1,
        }
    }
    binned.sort_unstable();
    let pts = pc.points();
    let mut voxels = Vec::new();
    let mut start = 0;
    while start < binned.len() {
        let idx = binned[start].0;
        let mut end = start;
        let mut acc = [0.0; 4];
        while end < binned.len() && binned[end].0 == idx {
            let p = pts[binned[end].1];
            for a in 0..4 {
                acc[a] += p[a];
            }
            end += 1;
        }
        let n = (end - start) as f64;
        let c = config.center(idx);
        voxels.push(Voxel {
            index: idx,
            raw: [
                acc[0] / n - c[0],
                acc[1] / n - c[1],
                acc[2] / n - c[2],
                acc[3] / n,
                math::ln_1p(n),
            ],
            count: (end - start) as u32,
        });
        start = end;
    }
    (VoxelGrid { config: *config, voxels }, dropped)
}

impl VoxelGrid {
    pub fn empty(config: VoxelConfig) -> Self {
        Self {
            config,
            voxels: Vec::new(),
        }
    }

    pub fn config(&self) -> &VoxelConfig {
        &self.config
    }

    pub fn voxels(&self) -> &[Voxel] {
        &self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    /// Position of an occupied voxel.
    pub fn find(&self, index: [u32; 3]) -> Option<usize> {
        self.voxels.binary_search_by(|v| v.index.cmp(&index)).ok()
    }

    /// `[N, 5]` raw feature rows in voxel order.
    pub fn raw_features(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.voxels.len() * RAW_VOXEL_FEATURES);
        for v in &self.voxels {
            data.extend_from_slice(&v.raw);
        }
        Tensor::from_parts(alloc::vec![self.voxels.len(), RAW_VOXEL_FEATURES], data)
    }

    /// Positions of voxels whose centres lie inside the oriented box, ascending.
    pub fn voxels_in_box(&self, b: &Box3D) -> Vec<usize> {
        let (x0, _, x1, _) = b.footprint_aabb();
        let cfg = &self.config;
        let lo = math::floor((x0 - cfg.range[0][0]) / cfg.voxel_size[0] - 0.5).max(0.0) as u32;
        let hi = math::floor((x1 - cfg.range[0][0]) / cfg.voxel_size[0] + 0.5).max(0.0) as u32;
        let first = self.voxels.partition_point(|v| v.index[0] < lo);
        let mut out = Vec::new();
        for (i, v) in self.voxels.iter().enumerate().skip(first) {
            if v.index[0] > hi {
                break;
            }
            if b.contains(cfg.center(v.index)) {
                out.push(i);
            }
        }
        out
    }

    /// Maps every voxel to the BEV cell holding its column. Voxels outside the
    /// BEV grid are skipped. Voxel x/y extents must tile BEV cells exactly.
    pub fn bev_columns(&self, bev: &GridSpec) -> Result<BevColumns> {
        for a in 0..2 {
            let ratio = bev.cell_size / self.config.voxel_size[a];
            let n = math::round(ratio);
            if n < 1.0 || (ratio - n).abs() > ALIGN_TOL {
                bail!(
                    Config,
                    "voxel size {} does not divide BEV cell size {}",
                    self.config.voxel_size[a],
                    bev.cell_size
                );
            }
            let edge = bev.to_grid(self.config.range[a][0], self.config.range[a][0]);
            let g = if a == 0 { edge.0 } else { edge.1 } * n;
            if (g - math::round(g)).abs() > ALIGN_TOL * n {
                bail!(Config, "voxel range start on axis {a} is not aligned with BEV cell edges");
            }
        }
        let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(self.voxels.len());
        for (i, v) in self.voxels.iter().enumerate() {
            let c = self.config.center(v.index);
            if let Some((x, y)) = bev.cell_of(c[0], c[1]) {
                pairs.push((bev.index(x, y), i));
            }
        }
        pairs.sort_unstable();
        let mut cells = Vec::new();
        let mut entries = Vec::with_capacity(pairs.len());
        for (cell, voxel) in pairs {
            if cells.last() != Some(&cell) {
                cells.push(cell);
            }
            entries.push(RowEntry::new(cells.len() - 1, voxel, 1.0));
        }
        Ok(BevColumns { cells, entries })
    }
}

/// Per-cell sums of voxel feature rows over each z column, as `[W·H, C]`.
pub fn column_sums(features: &Tensor, columns: &BevColumns, bev: &GridSpec) -> Result<Tensor> {
    let c = features.last_dim();
    if features.rank() != 2 {
        bail!(Dimension, "voxel features must be rank 2, got {:?}", features.shape());
    }
    let mut out = alloc::vec![0.0; bev.cells() * c];
    for e in &columns.entries {
        let cell = columns.cells[e.dst as usize];
        let src = features.row(e.src as usize);
        for (o, &v) in out[cell * c..(cell + 1) * c].iter_mut().zip(src) {
            *o += e.weight * v;
        }
    }
    Tensor::new(&[bev.cells(), c], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn cfg() -> VoxelConfig {
        VoxelConfig::new([0.5, 0.5, 1.0], [[-4.0, 4.0], [-4.0, 4.0], [-2.0, 2.0]]).unwrap()
    }

    #[test]
    fn centred_point() {
        let pc = PointCloud::new(vec![[0.25, 0.25, 0.5, 0.8]]).unwrap();
        let (g, dropped) = voxelize(&pc, &cfg());
        assert_eq!(dropped, 0);
        let v = g.voxels()[0];
        assert_eq!(v.count, 1);
        for a in 0..3 {
            assert!(v.raw[a].abs() < 1e-12);
        }
        assert_eq!(v.raw[3], 0.8);
        assert!((v.raw[4] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn duplicates_share_a_voxel() {
        let p = [1.1, -0.3, 0.2, 0.5];
        let pc = PointCloud::new(vec![p, p]).unwrap();
        let (g, _) = voxelize(&pc, &cfg());
        assert_eq!(g.len(), 1);
        assert_eq!(g.voxels()[0].count, 2);
        let c = cfg().center(g.voxels()[0].index);
        assert!((g.voxels()[0].raw[0] - (p[0] - c[0])).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_dropped() {
        let pc = PointCloud::new(vec![[9.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]]).unwrap();
        let (g, dropped) = voxelize(&pc, &cfg());
        assert_eq!((g.len(), dropped), (1, 1));
    }

    #[test]
    fn misaligned_columns_rejected() {
        let g = VoxelGrid::empty(cfg());
        let bev = GridSpec::centered(8, 8, 0.75).unwrap();
        assert_eq!(g.bev_columns(&bev).unwrap_err().kind(), "config");
        // Unit voxels starting at -4 straddle cells whose edges sit at half-integers.
        let unit = [[-4.0, 4.0], [-4.0, 4.0], [-2.0, 2.0]];
        let g = VoxelGrid::empty(VoxelConfig::new([1.0; 3], unit).unwrap());
        let bev = GridSpec::centered(9, 9, 1.0).unwrap();
        assert_eq!(g.bev_columns(&bev).unwrap_err().kind(), "config");
        let shifted = [[-4.5, 4.5], [-4.5, 4.5], [-2.0, 2.0]];
        let g = VoxelGrid::empty(VoxelConfig::new([1.0; 3], shifted).unwrap());
        assert!(g.bev_columns(&bev).is_ok());
    }

    #[test]
    fn invalid_config() {
        assert!(VoxelConfig::new([0.3, 0.5, 1.0], [[-4.0, 4.0], [-4.0, 4.0], [-2.0, 2.0]]).is_err());
        assert!(VoxelConfig::new([0.5, 0.5, 1.0], [[4.0, 4.0], [-4.0, 4.0], [-2.0, 2.0]]).is_err());
    }
}
