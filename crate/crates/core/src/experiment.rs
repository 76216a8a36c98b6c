//! One-factor ablations, range drop-out degradation and the per-depth image
//! weight profile of the global fusion block.

use alloc::vec::Vec;

use crate::depth::GridSpec;
use crate::dgf::EmbedMode;
use crate::error::{bail, Result};
use crate::math;
use crate::model::{Model, ModelConfig, PreparedScene};
use crate::scene::{generate_corpus, inject_corruption, CorpusSpec, CorruptionSpec, Placement, Scene};
use crate::tape::Tape;
use crate::train::{corpus_loss, train_toy, TrainConfig};

/// The single switch flipped by an ablation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factor {
    Dgf,
    Dlf,
    Depth,
    Embed(EmbedMode),
}

impl Factor {
    pub fn name(&self) -> &'static str {
        match self {
            Factor::Dgf => "dgf",
            Factor::Dlf => "dlf",
            Factor::Depth => "depth",
            Factor::Embed(EmbedMode::Multiply) => "embed_multiply",
            Factor::Embed(EmbedMode::Sum) => "embed_sum",
            Factor::Embed(EmbedMode::Concat) => "embed_concat",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "dgf" => Factor::Dgf,
            "dlf" => Factor::Dlf,
            "depth" => Factor::Depth,
            _ => match s.strip_prefix("embed_") {
                Some(mode) => Factor::Embed(EmbedMode::parse(mode)?),
                None => bail!(Config, "unknown ablation factor {s:?}"),
            },
        })
    }

    /// `cfg` with exactly this factor changed.
    pub fn apply(&self, cfg: &ModelConfig) -> Result<ModelConfig> {
        let mut out = cfg.clone();
        match *self {
            Factor::Dgf => out.use_dgf = !cfg.use_dgf,
            Factor::Dlf => out.use_dlf = !cfg.use_dlf,
            Factor::Depth => out.use_depth = !cfg.use_depth,
            Factor::Embed(mode) => {
                if mode == cfg.embed {
                    bail!(Config, "embed mode is already {}", mode.name());
                }
                out.embed = mode;
            }
        }
        out.validate()?;
        Ok(out)
    }
}

/// Corpus, model and training settings shared by both arms of an ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub model: ModelConfig,
    pub corpus: CorpusSpec,
    pub scenes: usize,
    pub train: TrainConfig,
    /// Range drop-out threshold in metres.
    pub dropout: f64,
    /// σ of the image-noise condition in the attention profile.
    pub image_noise: f64,
    pub profile_edges: Vec<f64>,
}

impl ExperimentSpec {
    /// Far-heavy corpus on a 20×20 grid of 5 m cells (±50 m), C = 16.
    pub fn far_heavy() -> Self {
        let mut model = ModelConfig::desk();
        model.grid = GridSpec::centered(20, 20, 5.0).expect("static grid");
        model.channels = 16;
        model.voxel_channels = 8;
        model.heads = 2;
        model.voxels_per_cell = 1;
        model.voxel_height = 1.0;
        let half = 9.0 * 5.0;
        let corpus = CorpusSpec {
            distance: (3.0, half),
            placement: Placement::FarHeavy { far_from: 30.0 },
            ..CorpusSpec::default()
        };
        Self {
            model,
            corpus,
            scenes: 4,
            train: TrainConfig::default(),
            dropout: 40.0,
            image_noise: 1.0,
            profile_edges: alloc::vec![0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 80.0],
        }
    }

    pub fn corpus_for(&self, seed: u64) -> Result<Vec<Scene>> {
        let start = seed * 1000;
        generate_corpus(&self.corpus, start..start + self.scenes as u64)
    }
}

/// Mean image weight of the cells whose depth falls in `[low, high)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileBin {
    pub low: f64,
    pub high: f64,
    pub mean_weight: f64,
    pub cells: usize,
}

/// Per-cell share of the image branch in the global fusion residual,
/// `‖V̂‖ / (‖V̂‖ + ‖V‖)`, where `V̂` is the attended image feature and `V` the
/// LiDAR feature of the same cell. Scenes are averaged.
pub fn image_weights(model: &Model, preps: &[PreparedScene]) -> Result<Vec<f64>> {
    let Some(dgf) = model.dgf.as_ref() else {
        bail!(Usage, "image weights need the global fusion block");
    };
    if preps.is_empty() {
        bail!(Validation, "image weights need at least one scene");
    }
    let n = model.config.grid.cells();
    let mut acc = alloc::vec![0.0; n];
    for prep in preps {
        let mut tape = Tape::new();
        let bound = model.bind_constants(&mut tape);
        let s = model.forward(&mut tape, &bound, prep)?;
        let pos = tape.constant(model.positions.clone());
        let depth = model.config.use_depth.then(|| tape.constant(model.depth_tokens.clone()));
        let v_hat = dgf.attend(&mut tape, &bound, s.lidar_bev, s.image_bev, pos, depth)?;
        let (vh, v) = (tape.value(v_hat), tape.value(s.lidar_bev));
        for (q, a) in acc.iter_mut().enumerate() {
            let nh = norm(vh.row(q));
            let nv = norm(v.row(q));
            let total = nh + nv;
            *a += if total > 0.0 { nh / total } else { 0.0 };
        }
    }
    let k = preps.len() as f64;
    Ok(acc.into_iter().map(|a| a / k).collect())
}

fn norm(x: &[f64]) -> f64 {
    math::sqrt(x.iter().map(|v| v * v).sum())
}

/// Bins per-cell values by the cell's depth.
pub fn bin_by_depth(model: &Model, values: &[f64], edges: &[f64]) -> Result<Vec<ProfileBin>> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[1] > w[0])) {
        bail!(Config, "need at least two increasing bin edges");
    }
    let depths = model.depth.values();
    if values.len() != depths.len() {
        bail!(Dimension, "{} values for {} cells", values.len(), depths.len());
    }
    Ok(edges
        .windows(2)
        .map(|w| {
            let (mut sum, mut cells) = (0.0, 0);
            for (&d, &v) in depths.iter().zip(values) {
                if d >= w[0] && d < w[1] {
                    sum += v;
                    cells += 1;
                }
            }
            ProfileBin {
                low: w[0],
                high: w[1],
                mean_weight: if cells > 0 { sum / cells as f64 } else { 0.0 },
                cells,
            }
        })
        .collect())
}

pub fn attention_profile(model: &Model, preps: &[PreparedScene], edges: &[f64]) -> Result<Vec<ProfileBin>> {
    bin_by_depth(model, &image_weights(model, preps)?, edges)
}

/// Cell-weighted mean over bins entirely at or beyond `from`, and over bins
/// entirely below `to`.
pub fn far_near(profile: &[ProfileBin], from: f64, to: f64) -> (f64, f64) {
    let mean = |keep: &dyn Fn(&ProfileBin) -> bool| {
        let (s, n) = profile
            .iter()
            .filter(|b| keep(b))
            .fold((0.0, 0usize), |(s, n), b| (s + b.mean_weight * b.cells as f64, n + b.cells));
        if n > 0 {
            s / n as f64
        } else {
            0.0
        }
    };
    (mean(&|b| b.low >= from), mean(&|b| b.high <= to))
}

/// Metrics of one trained arm.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub config: ModelConfig,
    pub losses: Vec<f64>,
    pub final_loss: f64,
    /// Corpus loss after range drop-out, with the trained weights.
    pub dropout_loss: f64,
    /// Image-weight profile on the clean corpus; empty without the global block.
    pub profile: Vec<ProfileBin>,
    /// Same profile under image feature noise.
    pub noisy_profile: Vec<ProfileBin>,
}

impl ArmResult {
    pub fn degradation(&self) -> f64 {
        self.dropout_loss - self.final_loss
    }
}

pub fn prepare_all(model: &Model, scenes: &[Scene]) -> Result<Vec<PreparedScene>> {
    scenes.iter().enumerate().map(|(i, s)| model.prepare(s, i as u64)).collect()
}

pub fn corrupt_all(scenes: &[Scene], spec: &CorruptionSpec, seed: u64) -> Result<Vec<Scene>> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| inject_corruption(s, spec, seed.wrapping_add(i as u64)))
        .collect()
}

/// Trains one arm from `seed` on `scenes` and evaluates it.
pub fn run_arm(spec: &ExperimentSpec, config: ModelConfig, scenes: &[Scene], seed: u64) -> Result<(Model, ArmResult)> {
    let mut model = Model::new(config.clone(), seed)?;
    let preps = prepare_all(&model, scenes)?;
    let report = train_toy(&mut model, &preps, &spec.train)?;
    let dropped = corrupt_all(scenes, &CorruptionSpec::LidarRangeDropout { threshold: spec.dropout }, seed)?;
    let dropout_loss = corpus_loss(&model, &prepare_all(&model, &dropped)?)?;
    let (profile, noisy_profile) = if model.dgf.is_some() {
        let noisy = corrupt_all(scenes, &CorruptionSpec::ImageFeatureNoise { sigma: spec.image_noise }, seed)?;
        (
            attention_profile(&model, &preps, &spec.profile_edges)?,
            attention_profile(&model, &prepare_all(&model, &noisy)?, &spec.profile_edges)?,
        )
    } else {
        (Vec::new(), Vec::new())
    };
    let result = ArmResult {
        config,
        losses: report.losses,
        final_loss: report.final_loss,
        dropout_loss,
        profile,
        noisy_profile,
    };
    Ok((model, result))
}

/// Reference arm and the arm with `factor` flipped, trained on the same corpus from the same seed.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationPair {
    pub seed: u64,
    pub factor: Factor,
    pub reference: ArmResult,
    pub ablated: ArmResult,
}

impl AblationPair {
    pub fn loss_no_worse(&self) -> bool {
        self.reference.final_loss <= self.ablated.final_loss
    }

    pub fn degradation_no_worse(&self) -> bool {
        self.reference.degradation() <= self.ablated.degradation()
    }
}

pub fn ablation_pair(spec: &ExperimentSpec, factor: Factor, seed: u64) -> Result<AblationPair> {
    let scenes = spec.corpus_for(seed)?;
    let ablated_cfg = factor.apply(&spec.model)?;
    let (_, reference) = run_arm(spec, spec.model.clone(), &scenes, seed)?;
    let (_, ablated) = run_arm(spec, ablated_cfg, &scenes, seed)?;
    Ok(AblationPair {
        seed,
        factor,
        reference,
        ablated,
    })
}
