//! Per-instance local fusion: gather box-local BEV, voxel and image features,
//! fuse them with two depth-modulated cross-attention branches and write the
//! result back into the global map.

use alloc::vec::Vec;

use crate::depth::{encode_depths, instance_depth, DepthMatrix, GridSpec, DEFAULT_FREQUENCY_BASE};
use crate::dgf::{embed_depth, encode_positions, CrossAttention, EmbedMode, Ffn};
use crate::error::{bail, Result};
use crate::geometry::{
    crop_entries, project_box_to_image, roi_align_entries, BevFeatureMap, Box3D, CameraModel, VoxelGrid, CROP_BINS,
    ROI_SAMPLES,
};
use crate::nn::{Bound, Init, Linear, ParamId, ParamStore};
use crate::tape::{AttentionScope, RowEntry, Tape, Var};
use crate::tensor::Tensor;

/// Largest proposal budget.
pub const MAX_INSTANCES: usize = 200;

const CROP_CELLS: usize = CROP_BINS.0 * CROP_BINS.1;

/// The three `[t, c]` local feature blocks plus their boxes and depths.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFeatureSet {
    pub f_local: Tensor,
    pub v_local: Tensor,
    pub i_local: Tensor,
    pub boxes: Vec<Box3D>,
    pub depths: Vec<f64>,
}

impl LocalFeatureSet {
    pub fn new(f_local: Tensor, v_local: Tensor, i_local: Tensor, boxes: Vec<Box3D>, depths: Vec<f64>) -> Result<Self> {
        let t = boxes.len();
        let c = f_local.last_dim();
        for (name, m) in [("f_local", &f_local), ("v_local", &v_local), ("i_local", &i_local)] {
            if m.shape() != [t, c] {
                bail!(Dimension, "{name} is {:?}, expected [{t}, {c}]", m.shape());
            }
        }
        if depths.len() != t || depths.iter().any(|&d| !(d >= 0.0)) {
            bail!(Validation, "need {t} non-negative depths, got {:?}", depths);
        }
        if t > MAX_INSTANCES {
            bail!(Validation, "{t} instances exceed the budget of {MAX_INSTANCES}");
        }
        Ok(Self {
            f_local,
            v_local,
            i_local,
            boxes,
            depths,
        })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.f_local.last_dim()
    }
}

/// Image views as one stacked token matrix: view `k` occupies rows
/// `k·rows·cols ..`, pixels in row-major order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewLayout {
    pub views: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ViewLayout {
    pub fn pixels(&self) -> usize {
        self.views * self.rows * self.cols
    }
}

/// Box-dependent gather structure, computed once per scene and box set.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalPlan {
    pub boxes: Vec<Box3D>,
    pub depths: Vec<f64>,
    /// Continuous grid coordinates of each box centre.
    pub centers: Vec<(f64, f64)>,
    /// BEV cells → `t·9` crop bins.
    pub crop: Vec<RowEntry>,
    /// Voxel positions inside each box.
    pub voxel_groups: Vec<Vec<usize>>,
    /// Stacked image tokens → `t·9` bins of the best view.
    pub image: Vec<RowEntry>,
    /// Best view per box, `None` when no camera sees it.
    pub best_view: Vec<Option<usize>>,
    pub grid: GridSpec,
}

impl LocalPlan {
    pub fn build(
        boxes: &[Box3D],
        depth: &DepthMatrix,
        voxels: &VoxelGrid,
        cams: &[CameraModel],
        layout: ViewLayout,
    ) -> Result<Self> {
        if boxes.is_empty() {
            bail!(Validation, "local selection needs at least one box");
        }
        if boxes.len() > MAX_INSTANCES {
            bail!(Validation, "{} boxes exceed the budget of {MAX_INSTANCES}", boxes.len());
        }
        if cams.len() != layout.views {
            bail!(Dimension, "{} cameras for {} views", cams.len(), layout.views);
        }
        let grid = *depth.grid();
        let mut plan = Self {
            boxes: boxes.to_vec(),
            depths: Vec::with_capacity(boxes.len()),
            centers: Vec::with_capacity(boxes.len()),
            crop: Vec::new(),
            voxel_groups: Vec::with_capacity(boxes.len()),
            image: Vec::new(),
            best_view: Vec::with_capacity(boxes.len()),
            grid,
        };
        let view_px = layout.rows * layout.cols;
        for (bi, b) in boxes.iter().enumerate() {
            // Off-grid boxes degrade to zero crops and the far-corner depth rather than aborting.
            let d = instance_depth(depth, b).unwrap_or_else(|_| depth.values().iter().copied().fold(0.0, f64::max));
            plan.depths.push(d);
            plan.centers.push(instance_center(&grid, b));
            if let Ok(entries) = crop_entries(&grid, b) {
                plan.crop.extend(entries.into_iter().map(|e| offset(e, bi * CROP_CELLS, 0)));
            }
            plan.voxel_groups.push(voxels.voxels_in_box(b));
            let mut best: Option<(usize, f64, crate::geometry::Rect)> = None;
            for (k, cam) in cams.iter().enumerate() {
                if let Some(rect) = project_box_to_image(b, cam) {
                    if best.is_none_or(|(_, a, _)| rect.area() > a) {
                        best = Some((k, rect.area(), rect));
                    }
                }
            }
            plan.best_view.push(best.map(|(k, _, _)| k));
            if let Some((k, _, rect)) = best {
                let (img_rows, img_cols) = cams[k].image_size();
                let sx = layout.cols as f64 / img_cols as f64;
                let sy = layout.rows as f64 / img_rows as f64;
                let feat_rect = crate::geometry::Rect {
                    x0: rect.x0 * sx,
                    y0: rect.y0 * sy,
                    x1: rect.x1 * sx,
                    y1: rect.y1 * sy,
                };
                let entries = roi_align_entries(layout.rows, layout.cols, &feat_rect, CROP_BINS, ROI_SAMPLES)?;
                plan.image
                    .extend(entries.into_iter().map(|e| offset(e, bi * CROP_CELLS, k * view_px)));
            }
        }
        Ok(plan)
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn unseen(&self) -> Vec<bool> {
        self.best_view.iter().map(Option::is_none).collect()
    }

    pub fn voxel_empty(&self) -> Vec<bool> {
        self.voxel_groups.iter().map(Vec::is_empty).collect()
    }
}

/// Box centre in continuous cell-index coordinates (cell centres at integers).
pub fn instance_center(grid: &GridSpec, b: &Box3D) -> (f64, f64) {
    let (gx, gy) = grid.to_grid(b.center[0], b.center[1]);
    (gx - 0.5, gy - 0.5)
}

fn offset(e: RowEntry, dst: usize, src: usize) -> RowEntry {
    RowEntry::new(e.dst as usize + dst, e.src as usize + src, e.weight)
}

/// Learned stubs that turn gathered local features into `c`-channel rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalSelector {
    pub crop: Linear,
    pub voxel_mix: Linear,
    pub voxel_out: Linear,
    pub voxel_empty: ParamId,
    pub image: Linear,
    pub image_empty: ParamId,
    pub local_channels: usize,
}

impl LocalSelector {
    /// `bev_channels` C, `voxel_channels` C_v, `image_channels` of the encoded views, `local` c.
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        bev_channels: usize,
        voxel_channels: usize,
        image_channels: usize,
        local: usize,
    ) -> Self {
        let p = |leaf: &str| alloc::format!("{name}.{leaf}");
        let crop = Linear::new(store, init, &p("crop"), CROP_CELLS * bev_channels, local, true);
        let voxel_mix = Linear::new(store, init, &p("voxel_mix"), voxel_channels, voxel_channels, true);
        let voxel_out = Linear::new(store, init, &p("voxel_out"), voxel_channels, local, true);
        let voxel_empty = store.add(p("voxel_empty"), init.normal(&[local], 1.0));
        let image = Linear::new(store, init, &p("image"), CROP_CELLS * image_channels, local, true);
        let image_empty = store.add(p("image_empty"), init.normal(&[local], 1.0));
        Self {
            crop,
            voxel_mix,
            voxel_out,
            voxel_empty,
            image,
            image_empty,
            local_channels: local,
        }
    }

    /// `fused [cells, C]`, `voxel_feats [N, C_v]`, `images [pixels, C_img]` →
    /// `(f_local, v_local, i_local)`, each `[t, c]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        plan: &LocalPlan,
        fused: Var,
        voxel_feats: Var,
        images: Var,
    ) -> Result<(Var, Var, Var)> {
        let t = plan.len();
        let c_bev = tape.shape(fused)[1];
        let crop = tape.scatter_rows(None, fused, plan.crop.clone(), t * CROP_CELLS)?;
        let crop = tape.reshape(crop, &[t, CROP_CELLS * c_bev])?;
        let f_local = self.crop.forward(tape, bound, crop)?;

        let pooled = tape.segment_max(voxel_feats, &plan.voxel_groups, None)?;
        let mixed = self.voxel_mix.forward(tape, bound, pooled)?;
        let v_local = self.voxel_out.forward(tape, bound, mixed)?;
        let v_local = tape.select_rows(v_local, plan.voxel_empty(), bound.get(self.voxel_empty))?;

        let c_img = tape.shape(images)[1];
        let roi = tape.scatter_rows(None, images, plan.image.clone(), t * CROP_CELLS)?;
        let roi = tape.reshape(roi, &[t, CROP_CELLS * c_img])?;
        let i_local = self.image.forward(tape, bound, roi)?;
        let i_local = tape.select_rows(i_local, plan.unseen(), bound.get(self.image_empty))?;
        Ok((f_local, v_local, i_local))
    }
}

/// Evaluates the selection stubs without gradients.
#[allow(clippy::too_many_arguments)]
pub fn select_locals(
    selector: &LocalSelector,
    store: &ParamStore,
    fused: &BevFeatureMap,
    voxels: &VoxelGrid,
    voxel_feats: &Tensor,
    images: &Tensor,
    layout: ViewLayout,
    cams: &[CameraModel],
    boxes: &[Box3D],
    depth: &DepthMatrix,
) -> Result<LocalFeatureSet> {
    if fused.grid() != depth.grid() {
        bail!(Dimension, "fused map and depth matrix use different grids");
    }
    if voxel_feats.rank() != 2 || voxel_feats.rows() != voxels.len() {
        bail!(Dimension, "voxel features {:?} for {} voxels", voxel_feats.shape(), voxels.len());
    }
    if images.rank() != 2 || images.rows() != layout.pixels() {
        bail!(Dimension, "image tokens {:?} for {} pixels", images.shape(), layout.pixels());
    }
    let plan = LocalPlan::build(boxes, depth, voxels, cams, layout)?;
    let mut tape = Tape::new();
    let bound = store.bind_constants(&mut tape);
    let f = tape.constant(fused.tokens());
    let v = tape.constant(voxel_feats.clone());
    let i = tape.constant(images.clone());
    let (fl, vl, il) = selector.forward(&mut tape, &bound, &plan, f, v, i)?;
    LocalFeatureSet::new(
        tape.value(fl).clone(),
        tape.value(vl).clone(),
        tape.value(il).clone(),
        plan.boxes,
        plan.depths,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DlfConfig {
    pub channels: usize,
    pub heads: usize,
    pub embed: EmbedMode,
    pub ffn_hidden: usize,
    pub scope: AttentionScope,
}

impl DlfConfig {
    /// Per-instance scope, `c_ff = 2c`.
    pub fn new(channels: usize, heads: usize, embed: EmbedMode) -> Self {
        Self {
            channels,
            heads,
            embed,
            ffn_hidden: 2 * channels,
            scope: AttentionScope::Diagonal,
        }
    }
}

/// Dual-branch local fusion block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DlfBlock {
    pub config: DlfConfig,
    pub image_branch: CrossAttention,
    pub voxel_branch: CrossAttention,
    pub concat: Option<Linear>,
    pub ffn: Ffn,
}

impl DlfBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, config: DlfConfig) -> Result<Self> {
        let c = config.channels;
        if c == 0 || c % 4 != 0 {
            bail!(Config, "local channels must be a positive multiple of 4, got {c}");
        }
        let p = |leaf: &str| alloc::format!("{name}.{leaf}");
        let image_branch = CrossAttention::new(store, init, &p("image"), c, config.heads)?;
        let voxel_branch = CrossAttention::new(store, init, &p("voxel"), c, config.heads)?;
        let concat = (config.embed == EmbedMode::Concat).then(|| Linear::new(store, init, &p("embed"), 2 * c, c, true));
        let ffn = Ffn::new(store, init, &p("ffn"), 2 * c, config.ffn_hidden, c);
        Ok(Self {
            config,
            image_branch,
            voxel_branch,
            concat,
            ffn,
        })
    }

    /// Per-instance query `embed(f_local + P_inst, D_inst)`.
    pub fn query(&self, tape: &mut Tape, bound: &Bound, f: Var, pos: Var, depth: Option<Var>) -> Result<Var> {
        let fp = tape.add(f, pos)?;
        match depth {
            Some(d) => embed_depth(tape, bound, self.config.embed, self.concat.as_ref(), fp, d),
            None => Ok(fp),
        }
    }

    /// `FFN(cat(A_img(Q) + f, A_vox(Q) + f))`; all inputs `[t, c]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        f: Var,
        v: Var,
        i: Var,
        pos: Var,
        depth: Option<Var>,
    ) -> Result<Var> {
        let q = self.query(tape, bound, f, pos, depth)?;
        let o1 = self.image_branch.forward(tape, bound, q, i, i, self.config.scope)?;
        let o2 = self.voxel_branch.forward(tape, bound, q, v, v, self.config.scope)?;
        let r1 = tape.add(o1, f)?;
        let r2 = tape.add(o2, f)?;
        let cat = tape.concat_last(r1, r2)?;
        self.ffn.forward(tape, bound, cat)
    }

    /// Instance position and depth codes for a local set.
    pub fn encodings(&self, centers: &[(f64, f64)], depths: &[f64]) -> Result<(Tensor, Tensor)> {
        let c = self.config.channels;
        Ok((encode_positions(centers, c)?, encode_depths(depths, c, DEFAULT_FREQUENCY_BASE)?))
    }
}

/// Evaluates [`DlfBlock::forward`] on a local set without gradients.
pub fn dlf_fuse(
    block: &DlfBlock,
    store: &ParamStore,
    locals: &LocalFeatureSet,
    grid: &GridSpec,
    use_depth: bool,
) -> Result<Tensor> {
    if locals.channels() != block.config.channels {
        bail!(
            Dimension,
            "local features have {} channels, block expects {}",
            locals.channels(),
            block.config.channels
        );
    }
    let grid_coords: Vec<(f64, f64)> = locals.boxes.iter().map(|b| instance_center(grid, b)).collect();
    let (pos, depth) = block.encodings(&grid_coords, &locals.depths)?;
    let mut tape = Tape::new();
    let bound = store.bind_constants(&mut tape);
    let f = tape.constant(locals.f_local.clone());
    let v = tape.constant(locals.v_local.clone());
    let i = tape.constant(locals.i_local.clone());
    let p = tape.constant(pos);
    let d = use_depth.then(|| tape.constant(depth));
    let out = block.forward(&mut tape, &bound, f, v, i, p, d)?;
    Ok(tape.value(out).clone())
}

/// Cells whose centres lie inside the box footprint; the centre cell when
/// none do and it is on the grid.
pub fn footprint_cells(grid: &GridSpec, b: &Box3D) -> Vec<usize> {
    let (x0, y0, x1, y1) = b.footprint_aabb();
    let (lo_x, lo_y) = grid.cell_of_signed(x0, y0);
    let (hi_x, hi_y) = grid.cell_of_signed(x1, y1);
    let mut cells = Vec::new();
    for x in lo_x.max(0)..=hi_x.min(grid.width as i64 - 1) {
        for y in lo_y.max(0)..=hi_y.min(grid.height as i64 - 1) {
            let (cx, cy) = grid.cell_center(x as usize, y as usize);
            if b.contains_xy(cx, cy) {
                cells.push(grid.index(x as usize, y as usize));
            }
        }
    }
    if cells.is_empty() {
        if let Some((x, y)) = grid.cell_of(b.center[0], b.center[1]) {
            cells.push(grid.index(x, y));
        }
    }
    cells
}

/// Entries adding each box's enhanced row to its footprint cells, averaged
/// where footprints overlap.
pub fn merge_entries(grid: &GridSpec, boxes: &[Box3D]) -> Vec<RowEntry> {
    let per_box: Vec<Vec<usize>> = boxes.iter().map(|b| footprint_cells(grid, b)).collect();
    let mut counts = alloc::vec![0u32; grid.cells()];
    for cells in &per_box {
        for &c in cells {
            counts[c] += 1;
        }
    }
    let mut entries = Vec::new();
    for (bi, cells) in per_box.iter().enumerate() {
        for &c in cells {
            entries.push(RowEntry::new(c, bi, 1.0 / counts[c] as f64));
        }
    }
    entries
}

/// Residual write-back of enhanced local features into the global map.
pub fn merge_global(fused: &BevFeatureMap, enhanced: &Tensor, boxes: &[Box3D]) -> Result<BevFeatureMap> {
    if enhanced.shape() != [boxes.len(), fused.channels()] {
        bail!(
            Dimension,
            "enhanced features {:?} for {} boxes and {} channels",
            enhanced.shape(),
            boxes.len(),
            fused.channels()
        );
    }
    let grid = *fused.grid();
    let mut tape = Tape::new();
    let base = tape.constant(fused.tokens());
    let src = tape.constant(enhanced.clone());
    let out = tape.scatter_rows(Some(base), src, merge_entries(&grid, boxes), grid.cells())?;
    BevFeatureMap::from_tokens(grid, tape.value(out))
}
