//! BEV grid description, the per-cell depth matrix and its sinusoidal encoding.
//!
//! Cell `(x, y)` has its centre at metric position
//! `((x − ego_x)·cell_size, (y − ego_y)·cell_size)` relative to the ego, so
//! the ego cell sits at depth 0 and cells are indexed `x·height + y`.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::geometry::Box3D;
use crate::math;
use crate::tensor::Tensor;

pub const DEFAULT_FREQUENCY_BASE: f64 = 10_000.0;

/// Size, resolution and ego position of a BEV grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub cell_size: f64,
    pub ego_index: (usize, usize),
}

impl GridSpec {
    pub fn new(width: usize, height: usize, cell_size: f64, ego_index: (usize, usize)) -> Result<Self> {
        if width == 0 || height == 0 {
            bail!(Config, "grid must be non-empty, got {width}x{height}");
        }
        if !(cell_size > 0.0) || !cell_size.is_finite() {
            bail!(Config, "cell size must be positive, got {cell_size}");
        }
        if ego_index.0 >= width || ego_index.1 >= height {
            bail!(Config, "ego index {:?} outside {width}x{height}", ego_index);
        }
        Ok(Self {
            width,
            height,
            cell_size,
            ego_index,
        })
    }

    /// Ego at cell `(width/2, height/2)`.
    pub fn centered(width: usize, height: usize, cell_size: f64) -> Result<Self> {
        Self::new(width, height, cell_size, (width / 2, height / 2))
    }

    /// 180×180 cells of 0.6 m, i.e. a ±54 m square.
    pub fn paper() -> Self {
        Self::centered(180, 180, 0.6).expect("static grid is valid")
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn index(&self, x: usize, y: usize) -> usize {
        x * self.height + y
    }

    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index / self.height, index % self.height)
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    /// Metric centre of a cell relative to the ego.
    pub fn cell_center(&self, x: usize, y: usize) -> (f64, f64) {
        (
            (x as f64 - self.ego_index.0 as f64) * self.cell_size,
            (y as f64 - self.ego_index.1 as f64) * self.cell_size,
        )
    }

    /// Continuous grid coordinates: cell `(x, y)` spans `[x, x+1) × [y, y+1)`.
    pub fn to_grid(&self, px: f64, py: f64) -> (f64, f64) {
        (
            px / self.cell_size + self.ego_index.0 as f64 + 0.5,
            py / self.cell_size + self.ego_index.1 as f64 + 0.5,
        )
    }

    /// Signed cell containing a metric point (may lie outside the grid).
    pub fn cell_of_signed(&self, px: f64, py: f64) -> (i64, i64) {
        let (gx, gy) = self.to_grid(px, py);
        (math::floor(gx) as i64, math::floor(gy) as i64)
    }

    /// Cell containing a metric point, if it lies on the grid.
    pub fn cell_of(&self, px: f64, py: f64) -> Option<(usize, usize)> {
        let (x, y) = self.cell_of_signed(px, py);
        self.contains(x, y).then_some((x as usize, y as usize))
    }
}

/// Depth of every BEV cell, stored as a lookup table indexed by cell.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMatrix {
    grid: GridSpec,
    values: Vec<f64>,
}

impl DepthMatrix {
    /// `d = cell_size · ‖(x, y) − ego_index‖₂` for every cell, computed once.
    pub fn build(grid: &GridSpec) -> Self {
        let mut values = Vec::with_capacity(grid.cells());
        for x in 0..grid.width {
            for y in 0..grid.height {
                values.push(cell_depth(grid, x, y));
            }
        }
        Self { grid: *grid, values }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// Flat values in cell order (`x·height + y`).
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        (x < self.grid.width && y < self.grid.height).then(|| self.values[self.grid.index(x, y)])
    }

    /// Precomputed depths for the given cells.
    pub fn lookup(&self, cells: &[(usize, usize)]) -> Result<Vec<f64>> {
        cells
            .iter()
            .map(|&(x, y)| match self.get(x, y) {
                Some(d) => Ok(d),
                None => bail!(
                    Bounds,
                    "cell ({x}, {y}) outside {}x{} grid",
                    self.grid.width,
                    self.grid.height
                ),
            })
            .collect()
    }

    /// `[W, H]` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(alloc::vec![self.grid.width, self.grid.height], self.values.clone())
    }
}

fn cell_depth(grid: &GridSpec, x: usize, y: usize) -> f64 {
    let dx = x as f64 - grid.ego_index.0 as f64;
    let dy = y as f64 - grid.ego_index.1 as f64;
    grid.cell_size * math::sqrt(dx * dx + dy * dy)
}

/// Depth of the cell holding the box centre.
pub fn instance_depth(matrix: &DepthMatrix, b: &Box3D) -> Result<f64> {
    match matrix.grid.cell_of(b.center[0], b.center[1]) {
        Some(cell) => Ok(matrix.lookup(&[cell])?[0]),
        None => bail!(
            Bounds,
            "box centre ({:.2}, {:.2}) outside the grid",
            b.center[0],
            b.center[1]
        ),
    }
}

/// Sinusoidal encoding of one scalar: channel `2i` is `sin(d / base^(2i/C))`,
/// channel `2i+1` the matching cosine.
pub fn encode_scalar(d: f64, channels: usize, base: f64, out: &mut [f64]) {
    for i in 0..channels / 2 {
        let freq = math::powf(base, -((2 * i) as f64) / channels as f64);
        out[2 * i] = math::sin(d * freq);
        out[2 * i + 1] = math::cos(d * freq);
    }
}

fn check_encoding(channels: usize, base: f64) -> Result<()> {
    if channels == 0 || channels % 2 != 0 {
        bail!(Config, "encoding needs a positive even channel count, got {channels}");
    }
    if !(base > 1.0) || !base.is_finite() {
        bail!(Config, "frequency base must exceed 1, got {base}");
    }
    Ok(())
}

/// `W×H×C` sinusoidal depth encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthEncoding {
    channels: Tensor,
    frequency_base: f64,
}

impl DepthEncoding {
    /// `[W, H, C]` values.
    pub fn channels(&self) -> &Tensor {
        &self.channels
    }

    pub fn frequency_base(&self) -> f64 {
        self.frequency_base
    }

    pub fn channel_count(&self) -> usize {
        self.channels.last_dim()
    }

    /// `[W·H, C]` token view.
    pub fn tokens(&self) -> Tensor {
        let c = self.channel_count();
        Tensor::from_parts(alloc::vec![self.channels.numel() / c, c], self.channels.data().to_vec())
    }
}

pub fn sinusoidal_encode(matrix: &DepthMatrix, channels: usize, base: f64) -> Result<DepthEncoding> {
    check_encoding(channels, base)?;
    let mut data = alloc::vec![0.0; matrix.values.len() * channels];
    for (cell, &d) in matrix.values.iter().enumerate() {
        encode_scalar(d, channels, base, &mut data[cell * channels..(cell + 1) * channels]);
    }
    let shape = alloc::vec![matrix.grid.width, matrix.grid.height, channels];
    Ok(DepthEncoding {
        channels: Tensor::from_parts(shape, data),
        frequency_base: base,
    })
}

/// Encodings of arbitrary depths as a `[len, C]` tensor.
pub fn encode_depths(depths: &[f64], channels: usize, base: f64) -> Result<Tensor> {
    check_encoding(channels, base)?;
    let mut data = alloc::vec![0.0; depths.len() * channels];
    for (i, &d) in depths.iter().enumerate() {
        encode_scalar(d, channels, base, &mut data[i * channels..(i + 1) * channels]);
    }
    Tensor::new(&[depths.len(), channels], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn ego_cell_has_zero_depth() {
        let grid = GridSpec::paper();
        let m = DepthMatrix::build(&grid);
        assert_eq!(m.get(90, 90), Some(0.0));
        assert_eq!(m.lookup(&[(90, 90)]).unwrap(), vec![0.0]);
    }

    #[test]
    fn corner_depth_of_full_size_grid() {
        // 0.6 · sqrt(90² + 90²), evaluated independently.
        let expected = 0.6 * (2.0f64 * 8100.0).sqrt();
        let m = DepthMatrix::build(&GridSpec::paper());
        assert!((m.get(0, 0).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 76.367).abs() < 1e-3);
    }

    #[test]
    fn edge_neighbours_are_one_cell_away() {
        let grid = GridSpec::centered(3, 3, 0.5).unwrap();
        let m = DepthMatrix::build(&grid);
        for (x, y) in [(0, 1), (2, 1), (1, 0), (1, 2)] {
            assert_eq!(m.get(x, y), Some(0.5));
        }
    }

    #[test]
    fn lookup_out_of_grid_is_bounds_error() {
        let m = DepthMatrix::build(&GridSpec::centered(4, 4, 1.0).unwrap());
        assert_eq!(m.lookup(&[(4, 0)]).unwrap_err().kind(), "bounds");
    }

    #[test]
    fn zero_depth_encodes_alternating() {
        let grid = GridSpec::centered(1, 1, 1.0).unwrap();
        let enc = sinusoidal_encode(&DepthMatrix::build(&grid), 8, DEFAULT_FREQUENCY_BASE).unwrap();
        assert_eq!(enc.channels().data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn two_channel_quarter_turn() {
        let mut out = [0.0; 2];
        encode_scalar(core::f64::consts::FRAC_PI_2, 2, DEFAULT_FREQUENCY_BASE, &mut out);
        assert!((out[0] - 1.0).abs() < 1e-15);
        assert!(out[1].abs() < 1e-15);
        assert!((out[1] - 6.123_233_995_736_766e-17).abs() < 1e-30);
    }

    #[test]
    fn odd_channels_rejected() {
        let m = DepthMatrix::build(&GridSpec::centered(2, 2, 1.0).unwrap());
        assert_eq!(sinusoidal_encode(&m, 7, 10_000.0).unwrap_err().kind(), "config");
        assert_eq!(sinusoidal_encode(&m, 8, 1.0).unwrap_err().kind(), "config");
    }

    #[test]
    fn invalid_grids_rejected() {
        assert!(GridSpec::new(0, 4, 1.0, (0, 0)).is_err());
        assert!(GridSpec::new(4, 4, 0.0, (0, 0)).is_err());
        assert!(GridSpec::new(4, 4, 1.0, (4, 0)).is_err());
    }

    #[test]
    fn cell_of_rounds_to_nearest_centre() {
        let grid = GridSpec::paper();
        assert_eq!(grid.cell_of(0.0, 0.0), Some((90, 90)));
        assert_eq!(grid.cell_of(0.29, -0.29), Some((90, 90)));
        assert_eq!(grid.cell_of(30.0, 0.0), Some((140, 90)));
        assert_eq!(grid.cell_of(60.0, 0.0), None);
    }
}
