//! Geometry kernels linking the LiDAR, camera and BEV views.

mod boxes;
mod camera;
mod lift_splat;
mod roi_align;
mod voxel;

pub use boxes::{Box3D, PointCloud};
pub use camera::{project_box_to_image, CameraModel, Rect};
pub use lift_splat::{lift_splat, splat_targets, DepthBins};
pub use roi_align::{crop_bev_box, crop_entries, crop_rect, roi_align, roi_align_entries, CROP_BINS, ROI_SAMPLES};
pub use voxel::{column_sums, voxelize, BevColumns, Voxel, VoxelConfig, VoxelGrid, RAW_VOXEL_FEATURES};

use crate::depth::GridSpec;
use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// `W×H×C` features on a BEV grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeatureMap {
    grid: GridSpec,
    features: Tensor,
}

impl BevFeatureMap {
    pub fn new(grid: GridSpec, features: Tensor) -> Result<Self> {
        let s = features.shape();
        if s.len() != 3 || s[0] != grid.width || s[1] != grid.height {
            bail!(
                Dimension,
                "BEV features {:?} do not match a {}x{} grid",
                s,
                grid.width,
                grid.height
            );
        }
        features.check_finite()?;
        Ok(Self { grid, features })
    }

    /// Builds from `[W·H, C]` tokens.
    pub fn from_tokens(grid: GridSpec, tokens: &Tensor) -> Result<Self> {
        let c = tokens.last_dim();
        Self::new(grid, tokens.reshape(&[grid.width, grid.height, c])?)
    }

    pub fn zeros(grid: GridSpec, channels: usize) -> Self {
        Self {
            grid,
            features: Tensor::zeros(&[grid.width, grid.height, channels]),
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn channels(&self) -> usize {
        self.features.last_dim()
    }

    /// `[W·H, C]` token view.
    pub fn tokens(&self) -> Tensor {
        self.features
            .reshape(&[self.grid.cells(), self.channels()])
            .expect("cell count matches")
    }

    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        self.features.row(self.grid.index(x, y))
    }
}
