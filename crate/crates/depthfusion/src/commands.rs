//! Implementations of the CLI verbs. Each writes into an [`OutputDir`].

use std::path::{Path, PathBuf};

use depthfusion_core::depth::{sinusoidal_encode, DepthMatrix, DEFAULT_FREQUENCY_BASE};
use depthfusion_core::dlf::instance_center;
use depthfusion_core::experiment::{
    ablation_pair, attention_profile, corrupt_all, far_near, prepare_all, AblationPair, Factor, ProfileBin,
};
use depthfusion_core::gradcheck::{audit, AuditEntry};
use depthfusion_core::model::{Model, PreparedScene};
use depthfusion_core::scene::{
    compute_depth_stats, corpus_scene_spec, generate_corpus, generate_scene, inject_corruption, CorruptionSpec, Scene,
};
use depthfusion_core::train::{corpus_gradient, corpus_loss, Adam, TrainReport};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{AppError, Result};
use crate::format::{load_checkpoint, load_scene, save_checkpoint, save_scene, tensor_bytes, BoxJson};
use crate::output::{sha256_hex, OutputDir};

pub const CHECKPOINT_STEM: &str = "checkpoint/model";

/// A CLI verb with its arguments.
#[derive(Debug, Clone, PartialEq)]
pub enum Verb {
    Run { scene_dir: Option<PathBuf>, checkpoint: Option<PathBuf>, stages: Option<Vec<String>>, threshold: f64 },
    Train,
    Gradcheck { seeds: Option<u64> },
    Stats,
    AttnProfile { checkpoint: Option<PathBuf>, train: bool },
    Ablate { factor: Option<String> },
    DumpDepth,
    DumpLocals { scene_dir: Option<PathBuf>, checkpoint: Option<PathBuf> },
}

impl Verb {
    pub fn name(&self) -> &'static str {
        match self {
            Verb::Run { .. } => "run",
            Verb::Train => "train",
            Verb::Gradcheck { .. } => "gradcheck",
            Verb::Stats => "stats",
            Verb::AttnProfile { .. } => "attn-profile",
            Verb::Ablate { .. } => "ablate",
            Verb::DumpDepth => "dump-depth",
            Verb::DumpLocals { .. } => "dump-locals",
        }
    }

    fn args(&self) -> Vec<String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut v = Vec::new();
        let mut push = |k: &str, val: Option<String>| {
            if let Some(val) = val {
                v.push(format!("{k}={val}"));
            }
        };
        match self {
            Verb::Run { scene_dir, checkpoint, stages, threshold } => {
                push("scene_dir", path(scene_dir));
                push("checkpoint", path(checkpoint));
                push("stages", stages.as_ref().map(|s| s.join(",")));
                push("threshold", Some(threshold.to_string()));
            }
            Verb::Gradcheck { seeds } => push("seeds", seeds.map(|s| s.to_string())),
            Verb::AttnProfile { checkpoint, train } => {
                push("checkpoint", path(checkpoint));
                push("train", Some(train.to_string()));
            }
            Verb::Ablate { factor } => push("factor", factor.clone()),
            Verb::DumpLocals { scene_dir, checkpoint } => {
                push("scene_dir", path(scene_dir));
                push("checkpoint", path(checkpoint));
            }
            Verb::Train | Verb::Stats | Verb::DumpDepth => {}
        }
        v
    }
}

/// Written as `manifest.json` next to every verb's outputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub verb: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub config_sha256: String,
    pub depthfusion_version: String,
    pub core_version: String,
}

impl Manifest {
    pub fn new(verb: &Verb, cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            verb: verb.name().into(),
            args: verb.args(),
            seed: cfg.seed,
            config_sha256: sha256_hex(cfg.to_toml()?.as_bytes()),
            depthfusion_version: env!("CARGO_PKG_VERSION").into(),
            core_version: depthfusion_core::VERSION.into(),
        })
    }
}

/// Writes `config.toml` and `manifest.json`, then runs the verb.
pub fn execute(verb: &Verb, cfg: &RunConfig, out: &OutputDir) -> Result<()> {
    out.write("config.toml", cfg.to_toml()?.as_bytes())?;
    out.write_json("manifest.json", &Manifest::new(verb, cfg)?)?;
    match verb {
        Verb::Run { scene_dir, checkpoint, stages, threshold } => {
            run(cfg, out, scene_dir.as_deref(), checkpoint.as_deref(), stages.as_deref(), *threshold)
        }
        Verb::Train => train(cfg, out).map(|_| ()),
        Verb::Gradcheck { seeds } => gradcheck(cfg, out, seeds.unwrap_or(cfg.experiment.seeds)),
        Verb::Stats => stats(cfg, out),
        Verb::AttnProfile { checkpoint, train } => attn_profile(cfg, out, checkpoint.as_deref(), *train),
        Verb::Ablate { factor } => ablate(cfg, out, factor.as_deref().unwrap_or(&cfg.experiment.factor)).map(|_| ()),
        Verb::DumpDepth => dump_depth(cfg, out),
        Verb::DumpLocals { scene_dir, checkpoint } => dump_locals(cfg, out, scene_dir.as_deref(), checkpoint.as_deref()),
    }
}

fn staged<T>(stage: &str, r: depthfusion_core::Result<T>) -> Result<T> {
    r.map_err(|e| AppError::from(e).in_stage(stage))
}

/// The first scene of the seed's corpus, or one loaded from disk.
pub fn input_scene(cfg: &RunConfig, scene_dir: Option<&Path>) -> Result<Scene> {
    match scene_dir {
        Some(dir) => load_scene(dir).map_err(|e| e.in_stage("load_scene")),
        None => {
            let spec = cfg.corpus_spec()?;
            staged("generate_scene", corpus_scene_spec(&spec, cfg.seed * 1000).and_then(|s| generate_scene(&s)))
        }
    }
}

pub fn build_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Model> {
    let mcfg = cfg.model_config()?;
    let embed = mcfg.embed.name();
    let mut model = staged("init", Model::new(mcfg, cfg.seed))?;
    if let Some(stem) = checkpoint {
        load_checkpoint(stem, &mut model.store, embed).map_err(|e| e.in_stage("load_checkpoint"))?;
    }
    Ok(model)
}

pub fn corpus(cfg: &RunConfig) -> Result<Vec<Scene>> {
    Ok(staged("generate_corpus", cfg.experiment_spec()?.corpus_for(cfg.seed))?)
}

#[derive(Serialize)]
struct DetectionJson {
    cell: [usize; 2],
    score: f64,
    #[serde(rename = "box")]
    bbox: BoxJson,
}

fn run(
    cfg: &RunConfig,
    out: &OutputDir,
    scene_dir: Option<&Path>,
    checkpoint: Option<&Path>,
    stages: Option<&[String]>,
    threshold: f64,
) -> Result<()> {
    let scene = input_scene(cfg, scene_dir)?;
    if scene_dir.is_none() {
        save_scene(out, "scene", &scene)?;
    }
    let scene = staged("corruption", inject_corruption(&scene, &cfg.corruption_spec()?, cfg.seed))?;
    let model = build_model(cfg, checkpoint)?;
    let prep = staged("prepare", model.prepare(&scene, cfg.seed))?;
    let result = model.run(&prep, threshold).map_err(AppError::from)?;
    if let Some(names) = stages {
        for n in names {
            if result.stage(n).is_none() {
                return Err(AppError::Config(format!("no stage named {n:?}")));
            }
        }
    }
    for (name, t) in &result.stages {
        if stages.is_none_or(|s| s.iter().any(|n| n == name)) {
            out.write(&format!("stages/{name}.bin"), &tensor_bytes(t))?;
        }
    }
    let dets: Vec<DetectionJson> = result
        .detections
        .iter()
        .map(|d| DetectionJson { cell: [d.cell.0, d.cell.1], score: d.score, bbox: BoxJson::from(&d.bbox) })
        .collect();
    out.write_json("detections.json", &dets)
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    step: usize,
    error: crate::error::ErrorReport,
    losses: &'a [f64],
    param_max_abs: Vec<(String, f64)>,
}

/// Full-batch Adam on the seed's corpus. Writes `loss.csv`, `summary.json`
/// and a checkpoint; on divergence writes the partial trace and
/// `diagnostic.json` before failing.
pub fn train(cfg: &RunConfig, out: &OutputDir) -> Result<TrainReport> {
    let tcfg = cfg.train_config()?;
    let mut model = build_model(cfg, None)?;
    let scenes = corpus(cfg)?;
    let preps = staged("prepare", prepare_all(&model, &scenes))?;
    let mut adam = Adam::new(&model.store, tcfg);
    let mut losses = Vec::with_capacity(tcfg.steps);
    let step_result = |model: &Model, step: usize| -> Result<(f64, Vec<Vec<f64>>)> {
        let (loss, grads) = corpus_gradient(model, &preps)?;
        if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(depthfusion_core::Error::Numeric(format!("training diverged at step {step} (loss {loss})")).into());
        }
        Ok((loss, grads))
    };
    let mut failure = None;
    for step in 0..tcfg.steps {
        match step_result(&model, step) {
            Ok((loss, grads)) => {
                losses.push(loss);
                adam.update(&mut model.store, &grads);
            }
            Err(e) => {
                failure = Some((step, e.in_stage("train")));
                break;
            }
        }
    }
    let final_loss = match failure {
        None => match corpus_loss(&model, &preps) {
            Ok(l) if l.is_finite() => Some(l),
            Ok(l) => {
                failure = Some((tcfg.steps, AppError::Core(depthfusion_core::Error::Numeric(format!("final loss {l}")))));
                None
            }
            Err(e) => {
                failure = Some((tcfg.steps, AppError::from(e).in_stage("train")));
                None
            }
        },
        Some(_) => None,
    };
    let rows: Vec<LossRow> = losses.iter().enumerate().map(|(step, &loss)| LossRow { step, loss }).collect();
    out.write_csv("loss.csv", &rows)?;
    if let Some((step, err)) = failure {
        let param_max_abs = model
            .store
            .iter()
            .map(|(n, t)| (n.to_string(), t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()))))
            .collect();
        out.write_json("diagnostic.json", &Diagnostic { step, error: err.report(), losses: &losses, param_max_abs })?;
        return Err(err);
    }
    let report = TrainReport { losses, final_loss: final_loss.expect("set when no failure") };
    save_checkpoint(out, CHECKPOINT_STEM, &model.store, model.config.embed.name())?;
    out.write_json(
        "summary.json",
        &serde_json::json!({
            "steps": tcfg.steps,
            "scenes": scenes.len(),
            "initial_loss": report.initial_loss(),
            "final_loss": report.final_loss,
        }),
    )?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub seed: u64,
    pub case: String,
    pub max_relative_error: f64,
    pub checked: usize,
    pub passed: bool,
}

pub fn gradcheck_rows(first_seed: u64, seeds: u64) -> Result<Vec<GradcheckRow>> {
    let mut rows = Vec::new();
    for seed in first_seed..first_seed + seeds {
        for AuditEntry { name, max_relative_error, checked } in staged("gradcheck", audit(seed))? {
            let passed = max_relative_error < depthfusion_core::gradcheck::AUDIT_TOLERANCE;
            rows.push(GradcheckRow { seed, case: name, max_relative_error, checked, passed });
        }
    }
    Ok(rows)
}

fn gradcheck(cfg: &RunConfig, out: &OutputDir, seeds: u64) -> Result<()> {
    let rows = gradcheck_rows(cfg.seed, seeds)?;
    out.write_csv("gradcheck.csv", &rows)?;
    let failed: Vec<String> = rows.iter().filter(|r| !r.passed).map(|r| format!("{}@{}", r.case, r.seed)).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(AppError::Check(format!("gradient check failed for {}", failed.join(", "))))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsRow {
    pub bin_low: f64,
    pub bin_high: f64,
    pub mean_points: f64,
    pub mean_pixels: f64,
    pub n_objects: usize,
}

/// Per-depth-bin object statistics over `stats.scenes` generated scenes.
pub fn stats_rows(cfg: &RunConfig) -> Result<Vec<StatsRow>> {
    let spec = cfg.corpus_spec()?;
    let start = cfg.seed * 1000;
    let scenes = staged("generate_corpus", generate_corpus(&spec, start..start + cfg.stats.scenes as u64))?;
    let stats = staged("stats", compute_depth_stats(&scenes, &cfg.stats.bin_edges))?;
    Ok(stats
        .into_iter()
        .map(|s| StatsRow {
            bin_low: s.bin_low,
            bin_high: s.bin_high,
            mean_points: s.mean_points,
            mean_pixels: s.mean_pixels,
            n_objects: s.n_objects,
        })
        .collect())
}

fn stats(cfg: &RunConfig, out: &OutputDir) -> Result<()> {
    out.write_csv("stats.csv", &stats_rows(cfg)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileRow {
    pub condition: String,
    pub bin_low: f64,
    pub bin_high: f64,
    pub mean_weight: f64,
    pub cells: usize,
}

fn profile_rows(condition: &str, bins: &[ProfileBin]) -> Vec<ProfileRow> {
    bins.iter()
        .map(|b| ProfileRow {
            condition: condition.into(),
            bin_low: b.low,
            bin_high: b.high,
            mean_weight: b.mean_weight,
            cells: b.cells,
        })
        .collect()
}

/// Image-weight profile per depth bin, clean and under image feature noise.
fn attn_profile(cfg: &RunConfig, out: &OutputDir, checkpoint: Option<&Path>, train_first: bool) -> Result<()> {
    let stem = if train_first {
        train(cfg, out)?;
        Some(out.path(CHECKPOINT_STEM))
    } else {
        checkpoint.map(Path::to_path_buf)
    };
    let model = build_model(cfg, stem.as_deref())?;
    let scenes = corpus(cfg)?;
    let e = &cfg.experiment;
    let noise = CorruptionSpec::ImageFeatureNoise { sigma: e.image_noise };
    let noisy = staged("corruption", corrupt_all(&scenes, &noise, cfg.seed))?;
    let mut rows = Vec::new();
    let mut summary = serde_json::Map::new();
    for (condition, set) in [("clean", &scenes), (noise.kind(), &noisy)] {
        let preps: Vec<PreparedScene> = staged("prepare", prepare_all(&model, set))?;
        let bins = staged("dgf", attention_profile(&model, &preps, &e.profile_edges))?;
        let (far, near) = far_near(&bins, e.far_from, e.near_to);
        summary.insert(condition.into(), serde_json::json!({ "far": far, "near": near }));
        rows.extend(profile_rows(condition, &bins));
    }
    out.write_csv("attention_profile.csv", &rows)?;
    out.write_json("summary.json", &summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub seed: u64,
    pub factor: String,
    pub reference_final_loss: f64,
    pub ablated_final_loss: f64,
    pub reference_degradation: f64,
    pub ablated_degradation: f64,
    pub reference_far_weight: f64,
    pub reference_near_weight: f64,
    pub loss_no_worse: bool,
    pub degradation_no_worse: bool,
}

#[derive(Serialize)]
struct TraceRow {
    seed: u64,
    arm: &'static str,
    step: usize,
    loss: f64,
}

pub fn ablation_pairs(cfg: &RunConfig, factor: Factor) -> Result<Vec<AblationPair>> {
    let spec = cfg.experiment_spec()?;
    (cfg.seed..cfg.seed + cfg.experiment.seeds)
        .map(|s| staged("ablate", ablation_pair(&spec, factor, s)))
        .collect()
}

pub fn ablation_row(cfg: &RunConfig, p: &AblationPair) -> AblationRow {
    let (far, near) = far_near(&p.reference.profile, cfg.experiment.far_from, cfg.experiment.near_to);
    AblationRow {
        seed: p.seed,
        factor: p.factor.name().into(),
        reference_final_loss: p.reference.final_loss,
        ablated_final_loss: p.ablated.final_loss,
        reference_degradation: p.reference.degradation(),
        ablated_degradation: p.ablated.degradation(),
        reference_far_weight: far,
        reference_near_weight: near,
        loss_no_worse: p.loss_no_worse(),
        degradation_no_worse: p.degradation_no_worse(),
    }
}

/// One-factor ablation over `experiment.seeds` seeds.
pub fn ablate(cfg: &RunConfig, out: &OutputDir, factor: &str) -> Result<Vec<AblationPair>> {
    let factor = Factor::parse(factor)?;
    let pairs = ablation_pairs(cfg, factor)?;
    let rows: Vec<AblationRow> = pairs.iter().map(|p| ablation_row(cfg, p)).collect();
    let mut traces = Vec::new();
    for p in &pairs {
        for (arm, r) in [("reference", &p.reference), ("ablated", &p.ablated)] {
            traces.extend(r.losses.iter().enumerate().map(|(step, &loss)| TraceRow { seed: p.seed, arm, step, loss }));
        }
    }
    out.write_csv("ablation.csv", &rows)?;
    out.write_csv("traces.csv", &traces)?;
    let count = |f: &dyn Fn(&AblationRow) -> bool| rows.iter().filter(|r| f(r)).count();
    out.write_json(
        "summary.json",
        &serde_json::json!({
            "factor": factor.name(),
            "seeds": rows.len(),
            "loss_no_worse": count(&|r| r.loss_no_worse),
            "degradation_no_worse": count(&|r| r.degradation_no_worse),
            "far_above_near": count(&|r| r.reference_far_weight > r.reference_near_weight),
        }),
    )?;
    Ok(pairs)
}

#[derive(Serialize)]
struct DepthRow {
    x: usize,
    y: usize,
    depth: f64,
}

fn dump_depth(cfg: &RunConfig, out: &OutputDir) -> Result<()> {
    let grid = cfg.grid_spec()?;
    let m = DepthMatrix::build(&grid);
    let mut rows = Vec::with_capacity(grid.cells());
    for x in 0..grid.width {
        for y in 0..grid.height {
            rows.push(DepthRow { x, y, depth: m.get(x, y).expect("inside the grid") });
        }
    }
    out.write_csv("depth.csv", &rows)?;
    out.write("depth.bin", &tensor_bytes(&m.to_tensor()))?;
    let enc = staged("depth_encoding", sinusoidal_encode(&m, cfg.model.channels, DEFAULT_FREQUENCY_BASE))?;
    out.write("encoding.bin", &tensor_bytes(enc.channels()))
}

#[derive(Serialize)]
struct LocalEntry {
    index: usize,
    #[serde(rename = "box")]
    bbox: BoxJson,
    depth: f64,
    center: [f64; 2],
    best_view: Option<usize>,
    voxels: usize,
}

fn dump_locals(cfg: &RunConfig, out: &OutputDir, scene_dir: Option<&Path>, checkpoint: Option<&Path>) -> Result<()> {
    if !cfg.model.use_dlf {
        return Err(AppError::Config("dump-locals needs model.use_dlf = true".into()));
    }
    let scene = input_scene(cfg, scene_dir)?;
    let model = build_model(cfg, checkpoint)?;
    let prep = staged("prepare", model.prepare(&scene, cfg.seed))?;
    let result = model.run(&prep, 1.0).map_err(AppError::from)?;
    for name in ["f_local", "v_local", "i_local"] {
        let t = result.stage(name).ok_or_else(|| AppError::Config(format!("stage {name} missing")))?;
        out.write(&format!("locals/{name}.bin"), &tensor_bytes(t))?;
    }
    let grid = model.config.grid;
    let plan = &prep.plan;
    let entries = plan
        .boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let (cx, cy) = instance_center(&grid, b);
            LocalEntry {
                index: i,
                bbox: BoxJson::from(b),
                depth: plan.depths[i],
                center: [cx, cy],
                best_view: plan.best_view[i],
                voxels: plan.voxel_groups[i].len(),
            }
        })
        .collect::<Vec<_>>();
    out.write_json("locals/boxes.json", &entries)
}
