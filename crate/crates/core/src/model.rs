//! End-to-end detector: voxel and image stubs, global and local fusion, and a
//! per-cell detection head with its training targets.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::depth::{sinusoidal_encode, DepthMatrix, GridSpec, DEFAULT_FREQUENCY_BASE};
use crate::dgf::{DgfBlock, DgfConfig, EmbedMode, PositionalEncoding2D};
use crate::dlf::{merge_entries, DlfBlock, DlfConfig, LocalPlan, LocalSelector, ViewLayout};
use crate::error::{bail, Error, Result};
use crate::geometry::{
    splat_targets, voxelize, BevColumns, Box3D, DepthBins, VoxelConfig, VoxelGrid, RAW_VOXEL_FEATURES,
};
use crate::math;
use crate::nn::{Bound, Init, LayerNorm, Linear, ParamStore};
use crate::scene::{Scene, CLASS_SIZES};
use crate::tape::{AttentionScope, RowEntry, Tape, Var};
use crate::tensor::Tensor;

/// Box regression parameters per cell: `dx, dy, z, ln l, ln w, ln h, yaw`.
pub const BOX_PARAMS: usize = 7;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
const SMOOTH_L1_BETA: f64 = 1.0;
/// Prior foreground probability used to initialise the classification bias.
const CLS_PRIOR: f64 = 0.01;

/// Architecture and input geometry of a [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub grid: GridSpec,
    /// BEV channels C; also the local channel count c.
    pub channels: usize,
    pub voxel_channels: usize,
    pub heads: usize,
    /// Proposal count t.
    pub proposals: usize,
    pub classes: usize,
    pub embed: EmbedMode,
    /// Depth encoding in both fusion blocks.
    pub use_depth: bool,
    pub use_dgf: bool,
    pub use_dlf: bool,
    pub dlf_scope: AttentionScope,
    pub depth_bins: DepthBins,
    /// Voxels per BEV cell along x and y.
    pub voxels_per_cell: usize,
    pub z_range: (f64, f64),
    pub voxel_height: f64,
    /// Channels of the raw image feature maps.
    pub image_channels: usize,
    /// Proposal centre jitter σ in metres.
    pub proposal_noise: f64,
}

impl ModelConfig {
    /// 60×60 cells of 0.6 m, C = c = 32, t = 8, four heads, three classes.
    pub fn desk() -> Self {
        Self {
            grid: GridSpec::centered(60, 60, 0.6).expect("static grid"),
            channels: 32,
            voxel_channels: 16,
            heads: 4,
            proposals: 8,
            classes: 3,
            embed: EmbedMode::Multiply,
            use_depth: true,
            use_dgf: true,
            use_dlf: true,
            dlf_scope: AttentionScope::Diagonal,
            depth_bins: DepthBins::default(),
            voxels_per_cell: 2,
            z_range: (-0.5, 3.5),
            voxel_height: 0.5,
            image_channels: 8,
            proposal_noise: 0.5,
        }
    }

    /// 180×180 grid, C = 128, t = 200.
    pub fn paper() -> Self {
        Self {
            grid: GridSpec::paper(),
            channels: 128,
            voxel_channels: 32,
            heads: 8,
            proposals: 200,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if c == 0 || c % 4 != 0 {
            bail!(Config, "channels must be a positive multiple of 4, got {c}");
        }
        if self.heads == 0 || c % self.heads != 0 {
            bail!(Config, "{c} channels are not divisible by {} heads", self.heads);
        }
        if self.classes == 0 || self.voxel_channels == 0 || self.image_channels == 0 {
            bail!(Config, "classes and channel counts must be positive");
        }
        if self.proposals == 0 || self.proposals > crate::dlf::MAX_INSTANCES {
            bail!(Config, "proposal count must lie in 1..={}", crate::dlf::MAX_INSTANCES);
        }
        if self.voxels_per_cell == 0 || !(self.z_range.1 > self.z_range.0) || !(self.voxel_height > 0.0) {
            bail!(Config, "invalid voxel layout");
        }
        if !(self.proposal_noise >= 0.0) {
            bail!(Config, "proposal noise must be non-negative");
        }
        self.voxel_config()?;
        Ok(())
    }

    /// Voxel lattice aligned with the BEV cells.
    pub fn voxel_config(&self) -> Result<VoxelConfig> {
        let g = &self.grid;
        let v = g.cell_size / self.voxels_per_cell as f64;
        let x0 = -(g.ego_index.0 as f64 + 0.5) * g.cell_size;
        let y0 = -(g.ego_index.1 as f64 + 0.5) * g.cell_size;
        VoxelConfig::new(
            [v, v, self.voxel_height],
            [
                [x0, x0 + g.width as f64 * g.cell_size],
                [y0, y0 + g.height as f64 * g.cell_size],
                [self.z_range.0, self.z_range.1],
            ],
        )
    }
}

/// Per-cell classifier and box regressor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionHead {
    pub linear: Linear,
    pub classes: usize,
}

impl DetectionHead {
    pub fn new(store: &mut ParamStore, init: &mut Init, channels: usize, classes: usize) -> Result<Self> {
        let linear = Linear::new(store, init, "head", channels, classes + BOX_PARAMS, true);
        let prior = -math::ln((1.0 - CLS_PRIOR) / CLS_PRIOR);
        let mut bias = Tensor::zeros(&[classes + BOX_PARAMS]);
        bias.data_mut()[..classes].fill(prior);
        store.set(linear.bias.expect("head has a bias"), bias)?;
        Ok(Self { linear, classes })
    }

    /// `[cells, C]` → `[cells, classes + 7]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        self.linear.forward(tape, bound, x)
    }
}

/// Learned parts of the detector.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub voxel_stub: Linear,
    pub height_stub: Linear,
    pub image_encoder: Linear,
    pub depth_head: Linear,
    pub dgf: Option<DgfBlock>,
    pub baseline_norm: Option<LayerNorm>,
    pub selector: Option<LocalSelector>,
    pub dlf: Option<DlfBlock>,
    pub head: DetectionHead,
    pub depth: DepthMatrix,
    pub positions: Tensor,
    pub depth_tokens: Tensor,
}

/// Geometry and targets derived from one scene, reused across training steps.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedScene {
    pub voxels: VoxelGrid,
    pub dropped_points: usize,
    pub voxel_raw: Tensor,
    pub columns: BevColumns,
    pub column_scatter: Vec<RowEntry>,
    pub layout: ViewLayout,
    pub image_tokens: Tensor,
    pub splat_targets: Vec<u32>,
    pub plan: LocalPlan,
    pub merge: Vec<RowEntry>,
    pub proposals: Vec<Box3D>,
    pub gt: Vec<Box3D>,
    pub cls_targets: Vec<f64>,
    pub reg_targets: Vec<f64>,
    pub reg_mask: Vec<bool>,
    pub positives: usize,
}

/// Tape handles of every pipeline stage.
#[derive(Debug, Clone, Copy)]
pub struct StageVars {
    pub voxel_features: Var,
    pub lidar_bev: Var,
    pub image_features: Var,
    pub depth_probs: Var,
    pub image_bev: Var,
    pub fused: Var,
    pub locals: Option<(Var, Var, Var)>,
    pub enhanced: Option<Var>,
    pub merged: Var,
    pub head: Var,
}

/// A decoded detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub cell: (usize, usize),
    pub score: f64,
    pub bbox: Box3D,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let c = config.channels;
        let voxel_stub = Linear::new(&mut store, &mut init, "voxel_stub", RAW_VOXEL_FEATURES, config.voxel_channels, true);
        let height_stub = Linear::new(&mut store, &mut init, "height_stub", config.voxel_channels, c, true);
        let image_encoder = Linear::new(&mut store, &mut init, "image_encoder", config.image_channels, c, true);
        let depth_head = Linear::new(&mut store, &mut init, "depth_head", c, config.depth_bins.len(), true);
        let (dgf, baseline_norm) = if config.use_dgf {
            let cfg = DgfConfig::new(c, config.heads, config.embed);
            (Some(DgfBlock::new(&mut store, &mut init, "dgf", cfg)?), None)
        } else {
            (None, Some(LayerNorm::new(&mut store, "fuse_norm", c)))
        };
        let (selector, dlf) = if config.use_dlf {
            let sel = LocalSelector::new(
                &mut store,
                &mut init,
                "local",
                c,
                config.voxel_channels,
                c,
                c,
            );
            let mut cfg = DlfConfig::new(c, config.heads, config.embed);
            cfg.scope = config.dlf_scope;
            (Some(sel), Some(DlfBlock::new(&mut store, &mut init, "dlf", cfg)?))
        } else {
            (None, None)
        };
        let head = DetectionHead::new(&mut store, &mut init, c, config.classes)?;
        let depth = DepthMatrix::build(&config.grid);
        let positions = PositionalEncoding2D::new(&config.grid, c)?.tokens();
        let depth_tokens = sinusoidal_encode(&depth, c, DEFAULT_FREQUENCY_BASE)?.tokens();
        Ok(Self {
            config,
            store,
            voxel_stub,
            height_stub,
            image_encoder,
            depth_head,
            dgf,
            baseline_norm,
            selector,
            dlf,
            head,
            depth,
            positions,
            depth_tokens,
        })
    }

    pub fn prepare(&self, scene: &Scene, proposal_seed: u64) -> Result<PreparedScene> {
        let cfg = &self.config;
        let grid = cfg.grid;
        let (voxels, dropped_points) = voxelize(&scene.points, &cfg.voxel_config()?);
        let columns = voxels.bev_columns(&grid)?;
        let column_scatter = columns
            .cells
            .iter()
            .enumerate()
            .map(|(i, &cell)| RowEntry::new(cell, i, 1.0))
            .collect();
        if scene.images.len() != scene.cameras.len() || scene.cameras.is_empty() {
            bail!(Dimension, "{} images for {} cameras", scene.images.len(), scene.cameras.len());
        }
        let s0 = scene.images[0].shape().to_vec();
        if s0.len() != 3 || s0[2] != cfg.image_channels {
            bail!(Dimension, "image features {:?} need {} channels", s0, cfg.image_channels);
        }
        let layout = ViewLayout {
            views: scene.images.len(),
            rows: s0[0],
            cols: s0[1],
        };
        let mut image_data = Vec::with_capacity(layout.pixels() * cfg.image_channels);
        let mut targets = Vec::with_capacity(layout.pixels() * cfg.depth_bins.len());
        for (img, cam) in scene.images.iter().zip(&scene.cameras) {
            if img.shape() != s0.as_slice() {
                bail!(Dimension, "all views must share one feature shape");
            }
            image_data.extend_from_slice(img.data());
            targets.extend(splat_targets(cam, (layout.rows, layout.cols), &cfg.depth_bins, &grid));
        }
        let image_tokens = Tensor::new(&[layout.pixels(), cfg.image_channels], image_data)?;
        let proposals = propose(&scene.boxes, cfg, proposal_seed);
        let plan = LocalPlan::build(&proposals, &self.depth, &voxels, &scene.cameras, layout)?;
        let merge = merge_entries(&grid, &proposals);
        let (cls_targets, reg_targets, reg_mask, positives) = build_targets(&scene.boxes, &grid, cfg.classes);
        Ok(PreparedScene {
            voxel_raw: voxels.raw_features(),
            voxels,
            dropped_points,
            columns,
            column_scatter,
            layout,
            image_tokens,
            splat_targets: targets,
            plan,
            merge,
            proposals,
            gt: scene.boxes.clone(),
            cls_targets,
            reg_targets,
            reg_mask,
            positives,
        })
    }

    /// Records the full forward pass on `tape`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, prep: &PreparedScene) -> Result<StageVars> {
        let cfg = &self.config;
        let cells = cfg.grid.cells();
        let raw = tape.constant(prep.voxel_raw.clone());
        let voxel_features = stage("voxelize", self.voxel_stub.forward(tape, bound, raw))?;
        let n_cols = prep.columns.cells.len();
        let col_sum = stage(
            "height_compress",
            tape.scatter_rows(None, voxel_features, prep.columns.entries.clone(), n_cols),
        )?;
        let col_feat = stage("height_compress", self.height_stub.forward(tape, bound, col_sum))?;
        let lidar_bev = stage(
            "height_compress",
            tape.scatter_rows(None, col_feat, prep.column_scatter.clone(), cells),
        )?;

        let img = tape.constant(prep.image_tokens.clone());
        let image_features = stage("lift_splat", self.image_encoder.forward(tape, bound, img))?;
        let logits = stage("lift_splat", self.depth_head.forward(tape, bound, image_features))?;
        let depth_probs = stage("lift_splat", tape.softmax_last(logits))?;
        let image_bev = stage(
            "lift_splat",
            tape.splat(image_features, depth_probs, prep.splat_targets.clone(), cells),
        )?;

        let pos = tape.constant(self.positions.clone());
        let depth = cfg.use_depth.then(|| tape.constant(self.depth_tokens.clone()));
        let fused = match (&self.dgf, &self.baseline_norm) {
            (Some(dgf), _) => stage("dgf", dgf.forward(tape, bound, lidar_bev, image_bev, pos, depth))?,
            (None, Some(norm)) => {
                let s = tape.add(lidar_bev, image_bev)?;
                stage("fuse", norm.forward(tape, bound, s))?
            }
            (None, None) => bail!(Usage, "model has neither a fusion block nor a baseline norm"),
        };

        let (locals, enhanced, merged) = match (&self.selector, &self.dlf) {
            (Some(sel), Some(dlf)) => {
                let (f, v, i) = stage(
                    "select_locals",
                    sel.forward(tape, bound, &prep.plan, fused, voxel_features, image_features),
                )?;
                let (p_inst, d_inst) = stage("dlf", dlf.encodings(&prep.plan.centers, &prep.plan.depths))?;
                let p_inst = tape.constant(p_inst);
                let d_inst = cfg.use_depth.then(|| tape.constant(d_inst));
                let enhanced = stage("dlf", dlf.forward(tape, bound, f, v, i, p_inst, d_inst))?;
                let merged = stage(
                    "merge_global",
                    tape.scatter_rows(Some(fused), enhanced, prep.merge.clone(), cells),
                )?;
                (Some((f, v, i)), Some(enhanced), merged)
            }
            _ => (None, None, fused),
        };
        let head = stage("head", self.head.forward(tape, bound, merged))?;
        Ok(StageVars {
            voxel_features,
            lidar_bev,
            image_features,
            depth_probs,
            image_bev,
            fused,
            locals,
            enhanced,
            merged,
            head,
        })
    }

    /// Focal classification plus smooth-L1 box loss, both normalised by the positive count.
    pub fn loss(&self, tape: &mut Tape, bound: &Bound, prep: &PreparedScene) -> Result<(Var, StageVars)> {
        let stages = self.forward(tape, bound, prep)?;
        let k = self.config.classes;
        let cls = tape.slice_last(stages.head, 0, k)?;
        let reg = tape.slice_last(stages.head, k, BOX_PARAMS)?;
        let norm = prep.positives.max(1) as f64;
        let lc = tape.focal_loss(cls, prep.cls_targets.clone(), FOCAL_ALPHA, FOCAL_GAMMA, norm)?;
        let lr = tape.smooth_l1(reg, prep.reg_targets.clone(), prep.reg_mask.clone(), SMOOTH_L1_BETA, norm)?;
        Ok((tape.add(lc, lr)?, stages))
    }

    pub fn evaluate_loss(&self, prep: &PreparedScene) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.bind_constants(&mut tape);
        let (loss, _) = self.loss(&mut tape, &bound, prep)?;
        Ok(tape.value(loss).data()[0])
    }

    /// Binds parameters as constants for inference.
    pub fn bind_constants(&self, tape: &mut Tape) -> Bound {
        self.store.bind_constants(tape)
    }

    /// Inference pass returning every stage's value and decoded detections.
    pub fn run(&self, prep: &PreparedScene, threshold: f64) -> Result<RunOutput> {
        let mut tape = Tape::new();
        let bound = self.bind_constants(&mut tape);
        let s = self.forward(&mut tape, &bound, prep)?;
        let grid = self.config.grid;
        let c = self.config.channels;
        let mut stages: Vec<(String, Tensor)> = Vec::new();
        let mut put = |name: &str, v: Var, shape: Option<Vec<usize>>| -> Result<()> {
            let t = tape.value(v);
            let t = match shape {
                Some(s) => t.reshape(&s)?,
                None => t.clone(),
            };
            stages.push((String::from(name), t));
            Ok(())
        };
        let bev = |ch: usize| Some(alloc::vec![grid.width, grid.height, ch]);
        put("voxel_features", s.voxel_features, None)?;
        put("lidar_bev", s.lidar_bev, bev(c))?;
        put("image_features", s.image_features, None)?;
        put("depth_probs", s.depth_probs, None)?;
        put("image_bev", s.image_bev, bev(c))?;
        put("fused", s.fused, bev(c))?;
        if let Some((f, v, i)) = s.locals {
            put("f_local", f, None)?;
            put("v_local", v, None)?;
            put("i_local", i, None)?;
        }
        if let Some(e) = s.enhanced {
            put("enhanced", e, None)?;
        }
        put("merged", s.merged, bev(c))?;
        put("head", s.head, bev(self.config.classes + BOX_PARAMS))?;
        let detections = decode(tape.value(s.head), &grid, self.config.classes, threshold)?;
        Ok(RunOutput { stages, detections })
    }

    pub fn parameter_count(&self) -> usize {
        self.store.iter().map(|(_, t)| t.numel()).sum()
    }
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| tag(name, e))
}

fn tag(name: &str, e: Error) -> Error {
    let wrap = |m: String| alloc::format!("[{name}] {m}");
    match e {
        Error::Dimension(m) => Error::Dimension(wrap(m)),
        Error::Numeric(m) => Error::Numeric(wrap(m)),
        Error::Usage(m) => Error::Usage(wrap(m)),
        Error::Bounds(m) => Error::Bounds(wrap(m)),
        Error::Config(m) => Error::Config(wrap(m)),
        Error::Validation(m) => Error::Validation(wrap(m)),
    }
}

/// Output of [`Model::run`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub stages: Vec<(String, Tensor)>,
    pub detections: Vec<Detection>,
}

impl RunOutput {
    pub fn stage(&self, name: &str) -> Option<&Tensor> {
        self.stages.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Jittered ground-truth boxes ranked by score, topped up with low-score
/// decoys to exactly `t` proposals.
pub fn propose(gt: &[Box3D], cfg: &ModelConfig, seed: u64) -> Vec<Box3D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e0_5a1);
    let sigma = cfg.proposal_noise;
    let noise = Normal::new(0.0, sigma.max(1e-12)).expect("finite sigma");
    let mut out: Vec<Box3D> = Vec::with_capacity(cfg.proposals);
    for b in gt {
        let (dx, dy) = if sigma > 0.0 {
            (noise.sample(&mut rng), noise.sample(&mut rng))
        } else {
            (0.0, 0.0)
        };
        let err2 = (dx * dx + dy * dy) / (2.0 * sigma * sigma).max(1e-12);
        let score = 0.5 + 0.5 * math::exp(-err2);
        let mut p = *b;
        p.center[0] += dx;
        p.center[1] += dy;
        p.score = score;
        out.push(p);
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(cfg.proposals);
    let g = &cfg.grid;
    let half_x = (g.width as f64 / 2.0 - 1.0) * g.cell_size;
    let half_y = (g.height as f64 / 2.0 - 1.0) * g.cell_size;
    while out.len() < cfg.proposals {
        let class_id = rng.random_range(0..cfg.classes) as u32;
        let size = CLASS_SIZES[class_id as usize % CLASS_SIZES.len()];
        let center = [
            rng.random_range(-half_x..half_x),
            rng.random_range(-half_y..half_y),
            size[2] / 2.0,
        ];
        let yaw = rng.random_range(-core::f64::consts::PI..core::f64::consts::PI);
        let score = rng.random_range(0.0..0.3);
        out.push(Box3D::new(center, size, yaw, score, class_id).expect("decoy box is valid"));
    }
    out
}

/// One-hot class targets at each ground-truth centre cell, plus regression
/// targets `[dx/cs, dy/cs, z, ln l, ln w, ln h, yaw]` and their mask.
pub fn build_targets(gt: &[Box3D], grid: &GridSpec, classes: usize) -> (Vec<f64>, Vec<f64>, Vec<bool>, usize) {
    let cells = grid.cells();
    let mut cls = alloc::vec![0.0; cells * classes];
    let mut reg = alloc::vec![0.0; cells * BOX_PARAMS];
    let mut mask = alloc::vec![false; cells];
    let mut positives = 0;
    for b in gt {
        let Some((x, y)) = grid.cell_of(b.center[0], b.center[1]) else {
            continue;
        };
        let cell = grid.index(x, y);
        let class = b.class_id as usize;
        if class >= classes {
            continue;
        }
        if cls[cell * classes + class] == 0.0 {
            positives += 1;
        }
        cls[cell * classes + class] = 1.0;
        let (cx, cy) = grid.cell_center(x, y);
        reg[cell * BOX_PARAMS..(cell + 1) * BOX_PARAMS].copy_from_slice(&[
            (b.center[0] - cx) / grid.cell_size,
            (b.center[1] - cy) / grid.cell_size,
            b.center[2],
            math::ln(b.size[0]),
            math::ln(b.size[1]),
            math::ln(b.size[2]),
            b.yaw,
        ]);
        mask[cell] = true;
    }
    (cls, reg, mask, positives)
}

/// Cells whose best class probability reaches `threshold`, highest first.
pub fn decode(head: &Tensor, grid: &GridSpec, classes: usize, threshold: f64) -> Result<Vec<Detection>> {
    let width = classes + BOX_PARAMS;
    if head.numel() != grid.cells() * width {
        bail!(Dimension, "head output {:?} for {} cells", head.shape(), grid.cells());
    }
    let mut out = Vec::new();
    for cell in 0..grid.cells() {
        let row = &head.data()[cell * width..(cell + 1) * width];
        let (class, &logit) = row[..classes]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("at least one class");
        let score = 1.0 / (1.0 + math::exp(-logit));
        if score < threshold {
            continue;
        }
        let (x, y) = grid.coords(cell);
        let (cx, cy) = grid.cell_center(x, y);
        let r = &row[classes..];
        let size = [
            math::exp(r[3].clamp(-5.0, 5.0)),
            math::exp(r[4].clamp(-5.0, 5.0)),
            math::exp(r[5].clamp(-5.0, 5.0)),
        ];
        let bbox = Box3D::new(
            [cx + r[0] * grid.cell_size, cy + r[1] * grid.cell_size, r[2]],
            size,
            r[6],
            score,
            class as u32,
        )?;
        out.push(Detection {
            cell: (x, y),
            score,
            bbox,
        });
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(out)
}
