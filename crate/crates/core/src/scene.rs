//! Procedural LiDAR + multi-view scenes with depth-dependent point density,
//! corruption injection and per-depth statistics.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{bail, Result};
use crate::geometry::{project_box_to_image, Box3D, CameraModel, PointCloud};
use crate::math;
use crate::tensor::Tensor;

/// Expected LiDAR returns per object as a step function of ground distance.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityModel {
    /// Lower edge of each bin; the last bin is open-ended.
    pub bin_edges: Vec<f64>,
    pub points_per_object: Vec<f64>,
}

impl DensityModel {
    pub fn new(bin_edges: Vec<f64>, points_per_object: Vec<f64>) -> Result<Self> {
        if bin_edges.is_empty() || bin_edges.len() != points_per_object.len() {
            bail!(Config, "density model needs one count per bin edge");
        }
        if bin_edges[0] != 0.0 || bin_edges.windows(2).any(|w| !(w[1] > w[0])) {
            bail!(Config, "density bin edges must start at 0 and increase");
        }
        if points_per_object.iter().any(|&c| !(c >= 0.0) || !c.is_finite()) {
            bail!(Config, "density counts must be finite and non-negative");
        }
        if points_per_object.windows(2).any(|w| w[1] > w[0]) {
            bail!(Config, "density counts must not increase with depth");
        }
        Ok(Self {
            bin_edges,
            points_per_object,
        })
    }

    /// Synthetic curve anchored at 163.7 points within 10 m and below one point past 30 m.
    pub fn paper() -> Self {
        Self::new(
            alloc::vec![0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0],
            alloc::vec![163.7, 38.0, 7.5, 0.9, 0.4, 0.2, 0.1],
        )
        .expect("static density model is valid")
    }

    pub fn expected_points(&self, depth: f64) -> f64 {
        let bin = self.bin_edges.iter().rposition(|&e| depth >= e).unwrap_or(0);
        self.points_per_object[bin]
    }
}

/// One object to place in a scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectSpec {
    pub class_id: u32,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

/// Synthetic image feature maps: size, channel count and noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageSpec {
    pub channels: usize,
    pub noise: f64,
    /// Image-only patches (no LiDAR object behind them) per view, placed within `distractor_range`.
    pub distractors: usize,
    pub distractor_range: (f64, f64),
}

impl Default for ImageSpec {
    fn default() -> Self {
        Self {
            channels: 8,
            noise: 0.05,
            distractors: 0,
            distractor_range: (4.0, 15.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub objects: Vec<ObjectSpec>,
    pub density_model: DensityModel,
    pub cameras: Vec<CameraModel>,
    /// Ground clutter in points per square metre over `clutter_extent`.
    pub background_rate: f64,
    /// Half-width of the square clutter region around the ego.
    pub clutter_extent: f64,
    pub image: ImageSpec,
    pub classes: usize,
}

/// A generated scene. Images are `[rows, cols, C]` per camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub points: PointCloud,
    pub images: Vec<Tensor>,
    pub boxes: Vec<Box3D>,
    pub cameras: Vec<CameraModel>,
}

/// Two horizontal cameras facing forward and backward, 120° field of view.
pub fn default_cameras(rows: usize, cols: usize) -> Vec<CameraModel> {
    let focal = cols as f64 / 2.0 / math::tan(core::f64::consts::PI / 3.0);
    [0.0, core::f64::consts::PI]
        .iter()
        .map(|&yaw| CameraModel::looking([0.0, 0.0, 1.6], yaw, focal, (rows, cols)).expect("static camera is valid"))
        .collect()
}

/// Fixed per-class image signature, independent of the scene seed.
pub fn class_signature(class_id: u32, channels: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5167_0000 + class_id as u64);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let raw: Vec<f64> = (0..channels).map(|_| normal.sample(&mut rng)).collect();
    let norm = math::sqrt(raw.iter().map(|v| v * v).sum::<f64>()).max(1e-12);
    raw.iter().map(|v| v * math::sqrt(channels as f64) / norm).collect()
}

/// Mean LiDAR intensity per class.
pub fn class_intensity(class_id: u32, classes: usize) -> f64 {
    0.2 + 0.6 * (class_id as f64 + 0.5) / classes.max(1) as f64
}

const INSET: f64 = 1e-3;

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut boxes = Vec::with_capacity(spec.objects.len());
    for o in &spec.objects {
        boxes.push(Box3D::new(o.center, o.size, o.yaw, 1.0, o.class_id)?);
    }
    let mut points = Vec::new();
    for b in &boxes {
        let lambda = spec.density_model.expected_points(b.ground_distance());
        let n = if lambda > 0.0 {
            Poisson::new(lambda).expect("positive rate").sample(&mut rng) as usize
        } else {
            0
        };
        let base = class_intensity(b.class_id, spec.classes);
        for _ in 0..n {
            let p = sample_visible_surface(b, &mut rng);
            let intensity = (base + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0);
            points.push([p[0], p[1], p[2], intensity]);
        }
    }
    let e = spec.clutter_extent;
    let clutter_mean = spec.background_rate * (2.0 * e) * (2.0 * e);
    if clutter_mean > 0.0 {
        let n = Poisson::new(clutter_mean).expect("positive rate").sample(&mut rng) as usize;
        for _ in 0..n {
            let x = rng.random_range(-e..e);
            let y = rng.random_range(-e..e);
            let z = rng.random_range(-0.3..-0.05);
            points.push([x, y, z, rng.random_range(0.0..0.2)]);
        }
    }
    let images = spec
        .cameras
        .iter()
        .map(|cam| render_view(cam, &boxes, spec, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene {
        points: PointCloud::new(points)?,
        images,
        boxes,
        cameras: spec.cameras.clone(),
    })
}

/// Uniform point on the faces visible from the ego (top plus the sides whose
/// outward normal points toward the origin), slightly inside the box.
fn sample_visible_surface(b: &Box3D, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let [l, w, h] = b.size;
    let ego_local = b.to_local([0.0, 0.0, b.center[2]]);
    // (axis, sign, area)
    let mut faces: Vec<(usize, f64, f64)> = alloc::vec![(2, 1.0, l * w)];
    for (axis, extent, area) in [(0usize, l, w * h), (1usize, w, l * h)] {
        if ego_local[axis] > 0.5 * extent {
            faces.push((axis, 1.0, area));
        } else if ego_local[axis] < -0.5 * extent {
            faces.push((axis, -1.0, area));
        }
    }
    let total: f64 = faces.iter().map(|f| f.2).sum();
    let mut pick = rng.random_range(0.0..total);
    let mut face = faces[faces.len() - 1];
    for f in &faces {
        if pick < f.2 {
            face = *f;
            break;
        }
        pick -= f.2;
    }
    let mut local = [0.0; 3];
    for a in 0..3 {
        let half = 0.5 * b.size[a] * (1.0 - 2.0 * INSET);
        local[a] = if a == face.0 { face.1 * half } else { rng.random_range(-half..half) };
    }
    b.local_to_ego(local)
}

fn render_view(cam: &CameraModel, boxes: &[Box3D], spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (rows, cols) = cam.image_size();
    let c = spec.image.channels;
    let noise = Normal::new(0.0, spec.image.noise.max(0.0)).expect("finite noise");
    let mut data: Vec<f64> = (0..rows * cols * c).map(|_| noise.sample(rng)).collect();
    let mut patches: Vec<(f64, u32, crate::geometry::Rect)> = Vec::new();
    for b in boxes {
        if let Some(rect) = project_box_to_image(b, cam) {
            let depth = cam.to_camera(b.center)[2];
            patches.push((depth, b.class_id, rect));
        }
    }
    let (lo, hi) = spec.image.distractor_range;
    for _ in 0..spec.image.distractors {
        let d = rng.random_range(lo..hi);
        let bearing = rng.random_range(-0.8..0.8);
        let class = rng.random_range(0..spec.classes.max(1)) as u32;
        let size = [4.0, 1.8, 1.6];
        // Placed in the camera's own frame so it is always in view.
        let world = cam.unproject(cols as f64 * (0.5 + 0.5 * bearing), rows as f64 * 0.5, d);
        let fake = Box3D::new([world[0], world[1], 0.8], size, 0.0, 1.0, class)?;
        if let Some(rect) = project_box_to_image(&fake, cam) {
            patches.push((d, class, rect));
        }
    }
    // Far to near so nearer patches overwrite.
    patches.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (_, class, rect) in patches {
        let sig = class_signature(class, c);
        let (r0, r1) = (math::floor(rect.y0) as usize, (math::ceil(rect.y1) as usize).min(rows));
        let (c0, c1) = (math::floor(rect.x0) as usize, (math::ceil(rect.x1) as usize).min(cols));
        for r in r0..r1 {
            for col in c0..c1 {
                let px = &mut data[(r * cols + col) * c..(r * cols + col + 1) * c];
                for (o, &s) in px.iter_mut().zip(&sig) {
                    *o = s + noise.sample(rng);
                }
            }
        }
    }
    Tensor::new(&[rows, cols, c], data)
}

/// Distances of generated objects from the ego.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Placement {
    /// Ground distance uniform in the range.
    Uniform,
    /// Half the objects beyond `far_from`.
    FarHeavy { far_from: f64 },
    /// Every object at this ground distance.
    Fixed(f64),
}

/// Parameters of a random scene corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub objects: (usize, usize),
    pub distance: (f64, f64),
    pub placement: Placement,
    pub classes: usize,
    pub image_rows: usize,
    pub image_cols: usize,
    pub image: ImageSpec,
    pub background_rate: f64,
    pub clutter_extent: f64,
    pub density_model: DensityModel,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            objects: (3, 6),
            distance: (3.0, 50.0),
            placement: Placement::Uniform,
            classes: 3,
            image_rows: 16,
            image_cols: 48,
            image: ImageSpec::default(),
            background_rate: 0.01,
            clutter_extent: 50.0,
            density_model: DensityModel::paper(),
        }
    }
}

/// Object sizes (l, w, h) per class.
pub const CLASS_SIZES: [[f64; 3]; 3] = [[4.2, 1.9, 1.6], [0.8, 0.8, 1.8], [1.8, 0.7, 1.4]];

/// Random non-overlapping objects for one scene.
pub fn sample_objects(spec: &CorpusSpec, seed: u64) -> Result<Vec<ObjectSpec>> {
    if spec.classes == 0 || spec.objects.0 > spec.objects.1 || !(spec.distance.1 > spec.distance.0) {
        bail!(Config, "corpus needs classes > 0 and ordered object/distance ranges");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0b1e_c7);
    let n = rng.random_range(spec.objects.0..=spec.objects.1);
    let mut out: Vec<ObjectSpec> = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n && attempts < 1000 {
        attempts += 1;
        let (lo, hi) = spec.distance;
        let dist = match spec.placement {
            Placement::Uniform => rng.random_range(lo..hi),
            Placement::FarHeavy { far_from } => {
                if out.len() % 2 == 0 {
                    rng.random_range(far_from.max(lo)..hi)
                } else {
                    rng.random_range(lo..far_from.min(hi))
                }
            }
            Placement::Fixed(d) => d,
        };
        let bearing = rng.random_range(-core::f64::consts::PI..core::f64::consts::PI);
        let class_id = rng.random_range(0..spec.classes) as u32;
        let size = CLASS_SIZES[class_id as usize % CLASS_SIZES.len()];
        let yaw = rng.random_range(-core::f64::consts::PI..core::f64::consts::PI);
        let center = [dist * math::cos(bearing), dist * math::sin(bearing), size[2] / 2.0];
        let clear = out.iter().all(|o| {
            let dx = o.center[0] - center[0];
            let dy = o.center[1] - center[1];
            let r = 0.5 * (math::hypot(o.size[0], o.size[1]) + math::hypot(size[0], size[1]));
            dx * dx + dy * dy > r * r
        });
        if clear {
            out.push(ObjectSpec {
                class_id,
                center,
                size,
                yaw,
            });
        }
    }
    Ok(out)
}

/// Full scene spec for corpus member `seed`.
pub fn corpus_scene_spec(spec: &CorpusSpec, seed: u64) -> Result<SceneSpec> {
    Ok(SceneSpec {
        seed,
        objects: sample_objects(spec, seed)?,
        density_model: spec.density_model.clone(),
        cameras: default_cameras(spec.image_rows, spec.image_cols),
        background_rate: spec.background_rate,
        clutter_extent: spec.clutter_extent,
        image: spec.image,
        classes: spec.classes,
    })
}

pub fn generate_corpus(spec: &CorpusSpec, seeds: core::ops::Range<u64>) -> Result<Vec<Scene>> {
    seeds.map(|s| generate_scene(&corpus_scene_spec(spec, s)?)).collect()
}

/// Sensor corruptions applied to a generated scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CorruptionSpec {
    None,
    /// Removes points farther than `threshold` metres (Euclidean) from the ego.
    LidarRangeDropout { threshold: f64 },
    /// Removes each point independently with probability `p`.
    LidarRandomDropout { p: f64 },
    /// Adds `N(0, σ²)` to every image feature.
    ImageFeatureNoise { sigma: f64 },
}

impl CorruptionSpec {
    /// Builds from a kind name and its single parameter.
    pub fn parse(kind: &str, param: f64) -> Result<Self> {
        let spec = match kind {
            "none" => CorruptionSpec::None,
            "lidar_range_dropout" => CorruptionSpec::LidarRangeDropout { threshold: param },
            "lidar_random_dropout" => CorruptionSpec::LidarRandomDropout { p: param },
            "image_feature_noise" => CorruptionSpec::ImageFeatureNoise { sigma: param },
            _ => bail!(Config, "unknown corruption kind {kind:?}"),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CorruptionSpec::None => "none",
            CorruptionSpec::LidarRangeDropout { .. } => "lidar_range_dropout",
            CorruptionSpec::LidarRandomDropout { .. } => "lidar_random_dropout",
            CorruptionSpec::ImageFeatureNoise { .. } => "image_feature_noise",
        }
    }

    pub fn param(&self) -> f64 {
        match *self {
            CorruptionSpec::None => 0.0,
            CorruptionSpec::LidarRangeDropout { threshold } => threshold,
            CorruptionSpec::LidarRandomDropout { p } => p,
            CorruptionSpec::ImageFeatureNoise { sigma } => sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            CorruptionSpec::None => {}
            CorruptionSpec::LidarRangeDropout { threshold } => {
                if !(threshold > 0.0) || !threshold.is_finite() {
                    bail!(Config, "range dropout threshold must be positive, got {threshold}");
                }
            }
            CorruptionSpec::LidarRandomDropout { p } => {
                if !(0.0..=1.0).contains(&p) {
                    bail!(Config, "dropout probability must lie in [0, 1], got {p}");
                }
            }
            CorruptionSpec::ImageFeatureNoise { sigma } => {
                if !(sigma >= 0.0) || !sigma.is_finite() {
                    bail!(Config, "noise sigma must be non-negative, got {sigma}");
                }
            }
        }
        Ok(())
    }
}

pub fn inject_corruption(scene: &Scene, spec: &CorruptionSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut out = scene.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0_5eed);
    match *spec {
        CorruptionSpec::None => {}
        CorruptionSpec::LidarRangeDropout { threshold } => {
            out.points = scene
                .points
                .filtered(|p| math::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]) <= threshold);
        }
        CorruptionSpec::LidarRandomDropout { p } => {
            out.points = scene.points.filtered(|_| rng.random::<f64>() >= p);
        }
        CorruptionSpec::ImageFeatureNoise { sigma } => {
            let noise = Normal::new(0.0, sigma).expect("validated sigma");
            for img in &mut out.images {
                for v in img.data_mut() {
                    *v += noise.sample(&mut rng);
                }
            }
        }
    }
    Ok(out)
}

/// Per-bin object statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthBinStats {
    pub bin_low: f64,
    pub bin_high: f64,
    pub mean_points: f64,
    pub mean_pixels: f64,
    /// Zero marks an empty bin whose means are reported as zero.
    pub n_objects: usize,
}

/// Mean in-box point count and best-view projected pixel area per object, by
/// ground distance of the object centre. `bin_edges` bound consecutive bins;
/// the last edge may be infinite.
pub fn compute_depth_stats(scenes: &[Scene], bin_edges: &[f64]) -> Result<Vec<DepthBinStats>> {
    if scenes.is_empty() {
        bail!(Validation, "depth statistics need at least one scene");
    }
    if bin_edges.len() < 2 || bin_edges.windows(2).any(|w| !(w[1] > w[0])) {
        bail!(Config, "need at least two increasing bin edges");
    }
    let bins = bin_edges.len() - 1;
    let mut points = alloc::vec![0.0; bins];
    let mut pixels = alloc::vec![0.0; bins];
    let mut counts = alloc::vec![0usize; bins];
    for scene in scenes {
        for b in &scene.boxes {
            let d = b.ground_distance();
            let Some(bin) = (0..bins).find(|&i| d >= bin_edges[i] && d < bin_edges[i + 1]) else {
                continue;
            };
            counts[bin] += 1;
            points[bin] += scene.points.count_in_box(b) as f64;
            pixels[bin] += scene
                .cameras
                .iter()
                .filter_map(|c| project_box_to_image(b, c))
                .map(|r| r.area())
                .fold(0.0, f64::max);
        }
    }
    Ok((0..bins)
        .map(|i| {
            let n = counts[i].max(1) as f64;
            DepthBinStats {
                bin_low: bin_edges[i],
                bin_high: bin_edges[i + 1],
                mean_points: points[i] / n,
                mean_pixels: pixels[i] / n,
                n_objects: counts[i],
            }
        })
        .collect())
}
