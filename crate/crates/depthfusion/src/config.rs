//! Run configuration in TOML, with named presets and environment overrides.
//!
//! A config file may set any subset of keys; missing keys come from the
//! preset named by `preset` (default `desk`). Environment variables of the
//! form `DEPTHFUSION_<KEY>` (top level) or `DEPTHFUSION_<SECTION>_<KEY>`
//! override single keys after the file is merged, e.g.
//! `DEPTHFUSION_TRAIN_LEARNING_RATE=0.001`.

use std::path::Path;

use depthfusion_core::depth::GridSpec;
use depthfusion_core::dgf::EmbedMode;
use depthfusion_core::experiment::ExperimentSpec;
use depthfusion_core::geometry::DepthBins;
use depthfusion_core::model::ModelConfig;
use depthfusion_core::scene::{CorpusSpec, CorruptionSpec, DensityModel, ImageSpec, Placement};
use depthfusion_core::train::TrainConfig;
use depthfusion_core::AttentionScope;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{AppError, Result};

pub const ENV_PREFIX: &str = "DEPTHFUSION_";
pub const PRESETS: [&str; 3] = ["desk", "paper", "far_heavy"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub output_dir: String,
    pub grid: GridSection,
    pub model: ModelSection,
    pub corpus: CorpusSection,
    pub corruption: CorruptionSection,
    pub train: TrainSection,
    pub experiment: ExperimentSection,
    pub stats: StatsSection,
}

/// Ego sits at cell `(width/2, height/2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub width: usize,
    pub height: usize,
    pub cell_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub channels: usize,
    pub voxel_channels: usize,
    pub heads: usize,
    pub proposals: usize,
    pub classes: usize,
    /// `multiply`, `sum` or `concat`.
    pub embed_mode: String,
    pub use_depth: bool,
    pub use_dgf: bool,
    pub use_dlf: bool,
    /// `diagonal` or `full`.
    pub dlf_scope: String,
    pub depth_bins: usize,
    pub depth_near: f64,
    pub depth_far: f64,
    pub voxels_per_cell: usize,
    pub voxel_height: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub image_channels: usize,
    pub proposal_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub scenes: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub distance_min: f64,
    pub distance_max: f64,
    /// `uniform`, `far_heavy` (half beyond `placement_distance`) or `fixed`.
    pub placement: String,
    pub placement_distance: f64,
    pub image_rows: usize,
    pub image_cols: usize,
    pub image_noise: f64,
    pub distractors: usize,
    pub distractor_min: f64,
    pub distractor_max: f64,
    pub background_rate: f64,
    pub clutter_extent: f64,
    pub density_edges: Vec<f64>,
    pub density_counts: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSection {
    /// `none`, `lidar_range_dropout`, `lidar_random_dropout` or `image_feature_noise`.
    pub kind: String,
    pub param: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub seeds: u64,
    /// Ablation factor: `dgf`, `dlf`, `depth` or `embed_<mode>`.
    pub factor: String,
    pub dropout: f64,
    pub image_noise: f64,
    pub profile_edges: Vec<f64>,
    /// Bins starting at or beyond this depth count as far.
    pub far_from: f64,
    /// Bins ending at or below this depth count as near.
    pub near_to: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsSection {
    pub scenes: usize,
    pub bin_edges: Vec<f64>,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (model, corpus, scenes) = match name {
            "desk" => (ModelConfig::desk(), CorpusSpec::default(), 8),
            "paper" => (ModelConfig::paper(), CorpusSpec::default(), 1),
            "far_heavy" => {
                let e = ExperimentSpec::far_heavy();
                (e.model, e.corpus, e.scenes)
            }
            _ => return Err(AppError::Config(format!("unknown preset {name:?}, expected one of {PRESETS:?}"))),
        };
        let exp = ExperimentSpec::far_heavy();
        let t = TrainConfig::default();
        Ok(Self {
            preset: name.to_string(),
            seed: 0,
            output_dir: "out".into(),
            grid: GridSection { width: model.grid.width, height: model.grid.height, cell_size: model.grid.cell_size },
            model: ModelSection::from_model(&model),
            corpus: CorpusSection::from_spec(&corpus, scenes),
            corruption: CorruptionSection { kind: "none".into(), param: 0.0 },
            train: TrainSection {
                steps: t.steps,
                learning_rate: t.learning_rate,
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
                clip_norm: t.clip_norm,
            },
            experiment: ExperimentSection {
                seeds: 10,
                factor: "depth".into(),
                dropout: exp.dropout,
                image_noise: exp.image_noise,
                profile_edges: exp.profile_edges,
                far_from: 40.0,
                near_to: 20.0,
            },
            stats: StatsSection { scenes: 100, bin_edges: vec![0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0] },
        })
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        Ok(GridSpec::centered(self.grid.width, self.grid.height, self.grid.cell_size)?)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let cfg = ModelConfig {
            grid: self.grid_spec()?,
            channels: m.channels,
            voxel_channels: m.voxel_channels,
            heads: m.heads,
            proposals: m.proposals,
            classes: m.classes,
            embed: EmbedMode::parse(&m.embed_mode)?,
            use_depth: m.use_depth,
            use_dgf: m.use_dgf,
            use_dlf: m.use_dlf,
            dlf_scope: parse_scope(&m.dlf_scope)?,
            depth_bins: DepthBins::uniform(m.depth_bins, m.depth_near, m.depth_far)?,
            voxels_per_cell: m.voxels_per_cell,
            z_range: (m.z_min, m.z_max),
            voxel_height: m.voxel_height,
            image_channels: m.image_channels,
            proposal_noise: m.proposal_noise,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Class count and image channels follow the model section.
    pub fn corpus_spec(&self) -> Result<CorpusSpec> {
        let c = &self.corpus;
        let placement = match c.placement.as_str() {
            "uniform" => Placement::Uniform,
            "far_heavy" => Placement::FarHeavy { far_from: c.placement_distance },
            "fixed" => Placement::Fixed(c.placement_distance),
            other => return Err(AppError::Config(format!("unknown placement {other:?}"))),
        };
        if c.scenes == 0 {
            return Err(AppError::Config("corpus needs at least one scene".into()));
        }
        if c.objects_min > c.objects_max || !(c.distance_max > c.distance_min) || c.distance_min < 0.0 {
            return Err(AppError::Config("corpus object count and distance ranges must be ordered".into()));
        }
        if c.image_rows == 0 || c.image_cols == 0 {
            return Err(AppError::Config("image size must be positive".into()));
        }
        Ok(CorpusSpec {
            objects: (c.objects_min, c.objects_max),
            distance: (c.distance_min, c.distance_max),
            placement,
            classes: self.model.classes,
            image_rows: c.image_rows,
            image_cols: c.image_cols,
            image: ImageSpec {
                channels: self.model.image_channels,
                noise: c.image_noise,
                distractors: c.distractors,
                distractor_range: (c.distractor_min, c.distractor_max),
            },
            background_rate: c.background_rate,
            clutter_extent: c.clutter_extent,
            density_model: DensityModel::new(c.density_edges.clone(), c.density_counts.clone())?,
        })
    }

    pub fn corruption_spec(&self) -> Result<CorruptionSpec> {
        Ok(CorruptionSpec::parse(&self.corruption.kind, self.corruption.param)?)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let cfg = TrainConfig {
            steps: t.steps,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            clip_norm: t.clip_norm,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn experiment_spec(&self) -> Result<ExperimentSpec> {
        let e = &self.experiment;
        if !(e.dropout > 0.0) || !(e.image_noise >= 0.0) {
            return Err(AppError::Config("dropout threshold must be positive and image noise non-negative".into()));
        }
        check_edges("experiment.profile_edges", &e.profile_edges)?;
        Ok(ExperimentSpec {
            model: self.model_config()?,
            corpus: self.corpus_spec()?,
            scenes: self.corpus.scenes,
            train: self.train_config()?,
            dropout: e.dropout,
            image_noise: e.image_noise,
            profile_edges: e.profile_edges.clone(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !PRESETS.contains(&self.preset.as_str()) {
            return Err(AppError::Config(format!("unknown preset {:?}", self.preset)));
        }
        self.experiment_spec()?;
        self.corruption_spec()?;
        depthfusion_core::experiment::Factor::parse(&self.experiment.factor)?;
        check_edges("stats.bin_edges", &self.stats.bin_edges)?;
        if self.stats.scenes == 0 || self.experiment.seeds == 0 {
            return Err(AppError::Config("stats scenes and experiment seeds must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| AppError::Config(e.to_string()))
    }

    fn to_table(&self) -> Result<Table> {
        Table::try_from(self).map_err(|e| AppError::Config(e.to_string()))
    }

    /// Parses a complete or partial config. `preset` (if given) wins over the
    /// file's own `preset` key; `env` holds `(name, value)` pairs, of which
    /// only those with [`ENV_PREFIX`] are read.
    pub fn from_toml_str(text: &str, preset: Option<&str>, env: &[(String, String)]) -> Result<Self> {
        let file: Table = text.parse().map_err(|e: toml::de::Error| AppError::Config(e.to_string()))?;
        let env_preset = env.iter().find(|(k, _)| k == "DEPTHFUSION_PRESET").map(|(_, v)| v.as_str());
        let name = match (preset, env_preset, file.get("preset")) {
            (Some(p), _, _) | (None, Some(p), _) => p.to_string(),
            (None, None, Some(Value::String(p))) => p.clone(),
            (None, None, Some(v)) => return Err(AppError::Config(format!("preset must be a string, got {v}"))),
            (None, None, None) => "desk".to_string(),
        };
        let mut table = Self::preset(&name)?.to_table()?;
        merge(&mut table, file, "")?;
        table.insert("preset".into(), Value::String(name));
        for (k, v) in env {
            if let Some(key) = k.strip_prefix(ENV_PREFIX) {
                if key != "PRESET" {
                    apply_override(&mut table, key, v)?;
                }
            }
        }
        let cfg: Self = Value::Table(table).try_into().map_err(|e: toml::de::Error| AppError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, preset: Option<&str>, env: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::from_toml_str(&text, preset, env)
    }
}

impl ModelSection {
    fn from_model(m: &ModelConfig) -> Self {
        let centers = m.depth_bins.centers();
        let w = if centers.len() > 1 { centers[1] - centers[0] } else { 0.0 };
        Self {
            channels: m.channels,
            voxel_channels: m.voxel_channels,
            heads: m.heads,
            proposals: m.proposals,
            classes: m.classes,
            embed_mode: m.embed.name().into(),
            use_depth: m.use_depth,
            use_dgf: m.use_dgf,
            use_dlf: m.use_dlf,
            dlf_scope: scope_name(m.dlf_scope).into(),
            depth_bins: centers.len(),
            depth_near: round6(centers[0] - w / 2.0),
            depth_far: round6(centers[centers.len() - 1] + w / 2.0),
            voxels_per_cell: m.voxels_per_cell,
            voxel_height: m.voxel_height,
            z_min: m.z_range.0,
            z_max: m.z_range.1,
            image_channels: m.image_channels,
            proposal_noise: m.proposal_noise,
        }
    }
}

impl CorpusSection {
    fn from_spec(c: &CorpusSpec, scenes: usize) -> Self {
        let (placement, placement_distance) = match c.placement {
            Placement::Uniform => ("uniform", 0.0),
            Placement::FarHeavy { far_from } => ("far_heavy", far_from),
            Placement::Fixed(d) => ("fixed", d),
        };
        Self {
            scenes,
            objects_min: c.objects.0,
            objects_max: c.objects.1,
            distance_min: c.distance.0,
            distance_max: c.distance.1,
            placement: placement.into(),
            placement_distance,
            image_rows: c.image_rows,
            image_cols: c.image_cols,
            image_noise: c.image.noise,
            distractors: c.image.distractors,
            distractor_min: c.image.distractor_range.0,
            distractor_max: c.image.distractor_range.1,
            background_rate: c.background_rate,
            clutter_extent: c.clutter_extent,
            density_edges: c.density_model.bin_edges.clone(),
            density_counts: c.density_model.points_per_object.clone(),
        }
    }
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

pub fn parse_scope(s: &str) -> Result<AttentionScope> {
    match s {
        "diagonal" => Ok(AttentionScope::Diagonal),
        "full" => Ok(AttentionScope::Full),
        _ => Err(AppError::Config(format!("unknown attention scope {s:?}, expected diagonal or full"))),
    }
}

pub fn scope_name(s: AttentionScope) -> &'static str {
    match s {
        AttentionScope::Diagonal => "diagonal",
        AttentionScope::Full => "full",
    }
}

fn check_edges(name: &str, edges: &[f64]) -> Result<()> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[1] > w[0])) || edges.iter().any(|e| !e.is_finite()) {
        return Err(AppError::Config(format!("{name} needs at least two finite increasing edges")));
    }
    Ok(())
}

/// Overlays `src` on `dst`; every key in `src` must already exist in `dst`.
fn merge(dst: &mut Table, src: Table, path: &str) -> Result<()> {
    for (k, v) in src {
        let full = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        match (dst.get_mut(&k), v) {
            (None, _) => return Err(AppError::Config(format!("unknown config key {full}"))),
            (Some(Value::Table(d)), Value::Table(s)) => merge(d, s, &full)?,
            (Some(Value::Table(_)), _) => return Err(AppError::Config(format!("{full} must be a table"))),
            (Some(slot @ Value::Float(_)), Value::Integer(i)) => *slot = Value::Float(i as f64),
            (Some(slot), v) => *slot = v,
        }
    }
    Ok(())
}

/// Applies one `KEY` or `SECTION_KEY` override, parsing `raw` as the type of
/// the value it replaces.
fn apply_override(table: &mut Table, key: &str, raw: &str) -> Result<()> {
    let lower = key.to_ascii_lowercase();
    let unknown = || AppError::Config(format!("environment override {ENV_PREFIX}{key} names no config key"));
    let slot = if table.get(&lower).is_some_and(|v| !v.is_table()) {
        table.get_mut(&lower).expect("checked above")
    } else {
        let (section, field) = lower.split_once('_').ok_or_else(unknown)?;
        match table.get_mut(section) {
            Some(Value::Table(t)) => t.get_mut(field).ok_or_else(unknown)?,
            _ => return Err(unknown()),
        }
    };
    let bad = |what: &str| AppError::Config(format!("{ENV_PREFIX}{key}={raw:?} is not a valid {what}"));
    *slot = match slot {
        Value::String(_) => Value::String(raw.to_string()),
        Value::Integer(_) => Value::Integer(raw.trim().parse().map_err(|_| bad("integer"))?),
        Value::Float(_) => Value::Float(raw.trim().parse().map_err(|_| bad("number"))?),
        Value::Boolean(_) => Value::Boolean(raw.trim().parse().map_err(|_| bad("boolean"))?),
        Value::Array(_) => {
            let t: Table = format!("v = {raw}").parse().map_err(|_| bad("array"))?;
            t.get("v").filter(|v| v.is_array()).cloned().ok_or_else(|| bad("array"))?
        }
        _ => return Err(bad("value")),
    };
    Ok(())
}

/// `DEPTHFUSION_*` variables of the current process, sorted by name.
pub fn env_overrides() -> Vec<(String, String)> {
    let mut v: Vec<(String, String)> = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    v.sort();
    v
}
