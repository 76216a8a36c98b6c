//! Binary tensor and point-cloud layouts, JSON cameras and boxes, and
//! parameter checkpoints.

use std::io::{Read, Write};
use std::path::Path;

use depthfusion_core::geometry::{Box3D, CameraModel, PointCloud};
use depthfusion_core::nn::ParamStore;
use depthfusion_core::scene::Scene;
use depthfusion_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};
use crate::output::OutputDir;

/// `u32 rank`, `rank × u32 extents`, then `f64` data, all little-endian.
pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    let rank = u32::try_from(t.rank()).map_err(|_| AppError::Format("tensor rank exceeds u32".into()))?;
    w.write_all(&rank.to_le_bytes())?;
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| AppError::Format(format!("extent {e} exceeds u32")))?;
        w.write_all(&e.to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(4 + 4 * t.rank() + 8 * t.numel());
    write_tensor(&mut buf, t).expect("writing to a Vec cannot fail");
    buf
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> AppError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        AppError::Format("truncated tensor data".into())
    } else {
        AppError::Io(e)
    }
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let rank = read_u32(r)? as usize;
    if rank > 16 {
        return Err(AppError::Format(format!("implausible tensor rank {rank}")));
    }
    let shape: Vec<usize> = (0..rank).map(|_| read_u32(r).map(|e| e as usize)).collect::<Result<_>>()?;
    let n = shape
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .ok_or_else(|| AppError::Format("tensor size overflows".into()))?;
    let mut bytes = vec![0u8; n.checked_mul(8).ok_or_else(|| AppError::Format("tensor size overflows".into()))?];
    r.read_exact(&mut bytes).map_err(truncated)?;
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Tensor::new(&shape, data)?)
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let mut cur = bytes.as_slice();
    let t = read_tensor(&mut cur)?;
    if !cur.is_empty() {
        return Err(AppError::Format(format!("{} trailing bytes after tensor", cur.len())));
    }
    Ok(t)
}

/// Headerless `N × (x, y, z, intensity)` as `f32` little-endian.
pub fn points_bytes(pc: &PointCloud) -> Vec<u8> {
    let mut buf = Vec::with_capacity(pc.len() * 16);
    for p in pc.points() {
        for v in p {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    buf
}

pub fn parse_points(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() % 16 != 0 {
        return Err(AppError::Format(format!("point buffer of {} bytes is not a multiple of 16", bytes.len())));
    }
    let points = bytes
        .chunks_exact(16)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[4 * i..4 * i + 4].try_into().unwrap()) as f64;
            [f(0), f(1), f(2), f(3)]
        })
        .collect();
    Ok(PointCloud::new(points)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraJson {
    /// Row-major 3×3.
    pub intrinsics: [[f64; 3]; 3],
    /// Row-major 4×4 ego → camera transform.
    pub extrinsics: [[f64; 4]; 4],
    /// `[rows, cols]`.
    pub image_size: [usize; 2],
}

impl From<&CameraModel> for CameraJson {
    fn from(c: &CameraModel) -> Self {
        let (r, k) = c.image_size();
        Self {
            intrinsics: *c.intrinsics(),
            extrinsics: *c.extrinsics(),
            image_size: [r, k],
        }
    }
}

impl CameraJson {
    pub fn to_model(&self) -> Result<CameraModel> {
        Ok(CameraModel::new(self.intrinsics, self.extrinsics, (self.image_size[0], self.image_size[1]))?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxJson {
    pub center: [f64; 3],
    /// `[l, w, h]`.
    pub size: [f64; 3],
    pub yaw: f64,
    pub score: f64,
    pub class_id: u32,
}

impl From<&Box3D> for BoxJson {
    fn from(b: &Box3D) -> Self {
        Self {
            center: b.center,
            size: b.size,
            yaw: b.yaw,
            score: b.score,
            class_id: b.class_id,
        }
    }
}

impl BoxJson {
    pub fn to_box(&self) -> Result<Box3D> {
        Ok(Box3D::new(self.center, self.size, self.yaw, self.score, self.class_id)?)
    }
}

pub fn boxes_json(boxes: &[Box3D]) -> Vec<BoxJson> {
    boxes.iter().map(BoxJson::from).collect()
}

/// Writes `points.bin`, `cameras.json`, `boxes.json` and `view<k>.bin` under `dir`.
pub fn save_scene(out: &OutputDir, dir: &str, scene: &Scene) -> Result<()> {
    out.write(&format!("{dir}/points.bin"), &points_bytes(&scene.points))?;
    let cams: Vec<CameraJson> = scene.cameras.iter().map(CameraJson::from).collect();
    out.write_json(&format!("{dir}/cameras.json"), &cams)?;
    out.write_json(&format!("{dir}/boxes.json"), &boxes_json(&scene.boxes))?;
    for (k, img) in scene.images.iter().enumerate() {
        out.write(&format!("{dir}/view{k}.bin"), &tensor_bytes(img))?;
    }
    Ok(())
}

pub fn load_scene(dir: &Path) -> Result<Scene> {
    let points = parse_points(&std::fs::read(dir.join("points.bin"))?)?;
    let cams: Vec<CameraJson> = serde_json::from_slice(&std::fs::read(dir.join("cameras.json"))?)?;
    let cameras = cams.iter().map(CameraJson::to_model).collect::<Result<Vec<_>>>()?;
    let boxes: Vec<BoxJson> = serde_json::from_slice(&std::fs::read(dir.join("boxes.json"))?)?;
    let boxes = boxes.iter().map(BoxJson::to_box).collect::<Result<Vec<_>>>()?;
    let images = (0..cameras.len())
        .map(|k| load_tensor(&dir.join(format!("view{k}.bin"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene { points, images, boxes, cameras })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the tensor record in `weights.bin`.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub embed_mode: String,
    pub params: Vec<ParamEntry>,
}

/// Parameters as consecutive tensor records plus a JSON index.
pub fn checkpoint_bytes(store: &ParamStore, embed_mode: &str) -> (Vec<u8>, CheckpointIndex) {
    let mut buf = Vec::new();
    let mut params = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        params.push(ParamEntry { name: name.to_string(), shape: t.shape().to_vec(), offset: buf.len() });
        write_tensor(&mut buf, t).expect("writing to a Vec cannot fail");
    }
    (buf, CheckpointIndex { embed_mode: embed_mode.to_string(), params })
}

pub fn save_checkpoint(out: &OutputDir, stem: &str, store: &ParamStore, embed_mode: &str) -> Result<()> {
    let (bytes, index) = checkpoint_bytes(store, embed_mode);
    out.write(&format!("{stem}.bin"), &bytes)?;
    out.write_json(&format!("{stem}.json"), &index)
}

/// Loads `<stem>.bin` / `<stem>.json` into `store`; names and shapes must match.
pub fn load_checkpoint(stem: &Path, store: &mut ParamStore, embed_mode: &str) -> Result<()> {
    let index: CheckpointIndex = serde_json::from_slice(&std::fs::read(stem.with_extension("json"))?)?;
    if index.embed_mode != embed_mode {
        return Err(AppError::Config(format!(
            "checkpoint was trained with embed mode {}, config asks for {embed_mode}",
            index.embed_mode
        )));
    }
    let bytes = std::fs::read(stem.with_extension("bin"))?;
    let mut entries = Vec::with_capacity(index.params.len());
    for p in &index.params {
        let mut cur = bytes
            .get(p.offset..)
            .ok_or_else(|| AppError::Format(format!("offset of {} is past the end", p.name)))?;
        let t = read_tensor(&mut cur)?;
        if t.shape() != p.shape.as_slice() {
            return Err(AppError::Format(format!("{}: index shape {:?}, stored {:?}", p.name, p.shape, t.shape())));
        }
        entries.push((p.name.clone(), t));
    }
    store.load(entries)?;
    Ok(())
}
