use crate::error::{bail, Result};
use crate::math;

use super::Box3D;

const ORTHO_TOL: f64 = 1e-9;
const MIN_DEPTH: f64 = 1e-6;

/// Pinhole camera. Camera frame: x right, y down, z forward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    intrinsics: [[f64; 3]; 3],
    extrinsics: [[f64; 4]; 4],
    image_size: (usize, usize),
    intrinsics_inv: [[f64; 3]; 3],
}

/// Axis-aligned rectangle; `x` runs along columns, `y` along rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }
}

impl CameraModel {
    /// `intrinsics` is the 3×3 projection, `extrinsics` the 4×4 ego→camera transform,
    /// `image_size` is `(rows, cols)`.
    pub fn new(intrinsics: [[f64; 3]; 3], extrinsics: [[f64; 4]; 4], image_size: (usize, usize)) -> Result<Self> {
        if intrinsics.iter().flatten().chain(extrinsics.iter().flatten()).any(|v| !v.is_finite()) {
            bail!(Validation, "camera matrices must be finite");
        }
        if image_size.0 == 0 || image_size.1 == 0 {
            bail!(Validation, "image size must be non-empty, got {:?}", image_size);
        }
        let det = det3(&intrinsics);
        if det.abs() < 1e-12 {
            bail!(Validation, "intrinsics are singular");
        }
        let r = rotation(&extrinsics);
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (d - expect).abs() > ORTHO_TOL {
                    bail!(Validation, "extrinsic rotation is not orthonormal");
                }
            }
        }
        if (det3(&r) - 1.0).abs() > ORTHO_TOL {
            bail!(Validation, "extrinsic rotation must have determinant +1");
        }
        if extrinsics[3] != [0.0, 0.0, 0.0, 1.0] {
            bail!(Validation, "extrinsics must be a rigid homogeneous transform");
        }
        Ok(Self {
            intrinsics,
            extrinsics,
            image_size,
            intrinsics_inv: inv3(&intrinsics, det),
        })
    }

    /// Camera at ego position `(x, y, z)` looking horizontally along `yaw`,
    /// principal point at the image centre.
    pub fn looking(position: [f64; 3], yaw: f64, focal: f64, image_size: (usize, usize)) -> Result<Self> {
        let (s, c) = (math::sin(yaw), math::cos(yaw));
        let r = [[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]];
        let mut ext = [[0.0; 4]; 4];
        for i in 0..3 {
            ext[i][..3].copy_from_slice(&r[i]);
            ext[i][3] = -(0..3).map(|k| r[i][k] * position[k]).sum::<f64>();
        }
        ext[3][3] = 1.0;
        let k = [
            [focal, 0.0, image_size.1 as f64 / 2.0],
            [0.0, focal, image_size.0 as f64 / 2.0],
            [0.0, 0.0, 1.0],
        ];
        Self::new(k, ext, image_size)
    }

    pub fn intrinsics(&self) -> &[[f64; 3]; 3] {
        &self.intrinsics
    }

    pub fn extrinsics(&self) -> &[[f64; 4]; 4] {
        &self.extrinsics
    }

    /// `(rows, cols)`.
    pub fn image_size(&self) -> (usize, usize) {
        self.image_size
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let e = &self.extrinsics;
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = e[i][0] * p[0] + e[i][1] * p[1] + e[i][2] * p[2] + e[i][3];
        }
        out
    }

    /// Pixel `(u, v)` and camera depth of an ego-frame point in front of the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64, f64)> {
        let c = self.to_camera(p);
        if c[2] <= MIN_DEPTH {
            return None;
        }
        let k = &self.intrinsics;
        let u = (k[0][0] * c[0] + k[0][1] * c[1] + k[0][2] * c[2]) / c[2];
        let v = (k[1][0] * c[0] + k[1][1] * c[1] + k[1][2] * c[2]) / c[2];
        Some((u, v, c[2]))
    }

    /// Ego-frame point at camera depth `depth` along the ray through pixel `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> [f64; 3] {
        let ki = &self.intrinsics_inv;
        let ray = [
            ki[0][0] * u + ki[0][1] * v + ki[0][2],
            ki[1][0] * u + ki[1][1] * v + ki[1][2],
            ki[2][0] * u + ki[2][1] * v + ki[2][2],
        ];
        // Scale so the camera-frame z equals `depth`.
        let s = depth / ray[2];
        let pc = [ray[0] * s, ray[1] * s, ray[2] * s];
        let e = &self.extrinsics;
        let d = [pc[0] - e[0][3], pc[1] - e[1][3], pc[2] - e[2][3]];
        let mut out = [0.0; 3];
        for (j, o) in out.iter_mut().enumerate() {
            *o = e[0][j] * d[0] + e[1][j] * d[1] + e[2][j] * d[2];
        }
        out
    }
}

/// Image-space bounds of the box corners that lie in front of the camera,
/// clipped to the image. `None` when no corner is in front or the clipped
/// rectangle is empty.
pub fn project_box_to_image(b: &Box3D, cam: &CameraModel) -> Option<Rect> {
    let mut r = Rect {
        x0: f64::INFINITY,
        y0: f64::INFINITY,
        x1: f64::NEG_INFINITY,
        y1: f64::NEG_INFINITY,
    };
    let mut any = false;
    for corner in b.corners() {
        if let Some((u, v, _)) = cam.project(corner) {
            any = true;
            r.x0 = r.x0.min(u);
            r.y0 = r.y0.min(v);
            r.x1 = r.x1.max(u);
            r.y1 = r.y1.max(v);
        }
    }
    if !any {
        return None;
    }
    let (rows, cols) = cam.image_size;
    let clipped = Rect {
        x0: r.x0.clamp(0.0, cols as f64),
        y0: r.y0.clamp(0.0, rows as f64),
        x1: r.x1.clamp(0.0, cols as f64),
        y1: r.y1.clamp(0.0, rows as f64),
    };
    (clipped.width() > 0.0 && clipped.height() > 0.0).then_some(clipped)
}

fn rotation(e: &[[f64; 4]; 4]) -> [[f64; 3]; 3] {
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        r[i].copy_from_slice(&e[i][..3]);
    }
    r
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn inv3(m: &[[f64; 3]; 3], det: f64) -> [[f64; 3]; 3] {
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let adj = [
        [c(1, 1, 2, 2), -c(0, 1, 2, 2), c(0, 1, 1, 2)],
        [-c(1, 0, 2, 2), c(0, 0, 2, 2), -c(0, 0, 1, 2)],
        [c(1, 0, 2, 1), -c(0, 0, 2, 1), c(0, 0, 1, 1)],
    ];
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = adj[i][j] / det;
        }
    }
    out
}
